use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// 2-D convolution with zero padding. Weights are `[out_ch, in_ch, k, k]`.
///
/// Forward/backward are implemented as im2col + sgemm; gradients accumulate
/// into `grad_weight`/`grad_bias` until `zero_grad` is called.
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array4<f32>,
    pub grad_bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

/// Cache for one forward call: the im2col matrices (or the raw input for the
/// 1x1 fast path) needed by the backward pass.
pub struct ConvCtx {
    cols: Option<Vec<Array2<f32>>>,
    input: Option<Array4<f32>>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_ch, in_ch, k, k)),
            bias: Array1::zeros(out_ch),
            grad_weight: Array4::zeros((out_ch, in_ch, k, k)),
            grad_bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn kaiming(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Self::new(in_ch, out_ch, k, stride, pad);
        let fan_in = (in_ch * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        for v in conv.weight.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    /// Copy parameters from another layer of identical geometry.
    pub fn copy_params_from(&mut self, other: &Conv2d) {
        self.weight.assign(&other.weight);
        self.bias.assign(&other.bias);
    }

    fn weight_mat(&self) -> ArrayView2<'_, f32> {
        let (oc, ic, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .expect("conv weight is standard layout")
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Array4<f32>, keep_ctx: bool) -> (Array4<f32>, Option<ConvCtx>) {
        let (b, in_ch, h, w) = x.dim();
        assert_eq!(
            in_ch,
            self.in_channels(),
            "conv input channels {} != expected {}",
            in_ch,
            self.in_channels()
        );
        let (oh, ow) = self.out_hw(h, w);
        let oc = self.out_channels();
        let k = self.kernel();
        let w_mat = self.weight_mat();
        let mut y = Array4::<f32>::zeros((b, oc, oh, ow));
        let mut cols: Vec<Array2<f32>> = Vec::new();
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let mut yb = y
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((oc, oh * ow))
                .expect("output is standard layout");
            if self.is_pointwise() {
                let xb_mat = xb
                    .into_shape_with_order((in_ch, h * w))
                    .expect("input is standard layout");
                general_mat_mul(1.0, &w_mat, &xb_mat, 0.0, &mut yb);
            } else {
                let col = im2col(&xb, k, self.stride, self.pad, oh, ow);
                general_mat_mul(1.0, &w_mat, &col.view(), 0.0, &mut yb);
                if keep_ctx {
                    cols.push(col);
                }
            }
        }
        for bi in 0..b {
            for co in 0..oc {
                let bias = self.bias[co];
                if bias != 0.0 {
                    y.index_axis_mut(Axis(0), bi)
                        .index_axis_move(Axis(0), co)
                        .mapv_inplace(|v| v + bias);
                }
            }
        }
        let ctx = keep_ctx.then(|| ConvCtx {
            cols: (!self.is_pointwise()).then_some(cols),
            input: self.is_pointwise().then(|| x.clone()),
            in_hw: (h, w),
            out_hw: (oh, ow),
        });
        (y, ctx)
    }

    /// Backpropagate `grad_out`, accumulating parameter gradients. Returns the
    /// input gradient unless `need_dx` is false (first layer of the net).
    pub fn backward(&mut self, ctx: &ConvCtx, grad_out: &Array4<f32>, need_dx: bool) -> Option<Array4<f32>> {
        let (b, oc, oh, ow) = grad_out.dim();
        assert_eq!(oc, self.out_channels());
        assert_eq!((oh, ow), ctx.out_hw);
        let (h, w) = ctx.in_hw;
        let in_ch = self.in_channels();
        let k = self.kernel();
        let ckk = in_ch * k * k;
        let pointwise = self.is_pointwise();
        let (stride, pad) = (self.stride, self.pad);

        // Field-level borrows so weight (read) and grad_weight (write) views
        // can coexist.
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((oc, ckk))
            .expect("weight is standard layout");
        let mut gw_mat = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((oc, ckk))
            .expect("grad weight is standard layout");
        let grad_bias = &mut self.grad_bias;

        let mut dx = need_dx.then(|| Array4::<f32>::zeros((b, in_ch, h, w)));
        let mut dcol = Array2::<f32>::zeros((ckk, oh * ow));
        for bi in 0..b {
            let gb = grad_out
                .index_axis(Axis(0), bi)
                .into_shape_with_order((oc, oh * ow))
                .expect("grad is standard layout");
            for co in 0..oc {
                grad_bias[co] += gb.row(co).sum();
            }
            if pointwise {
                let x = ctx.input.as_ref().expect("pointwise ctx stores input");
                let xb_mat = x
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((in_ch, h * w))
                    .expect("input is standard layout");
                general_mat_mul(1.0, &gb, &xb_mat.t(), 1.0, &mut gw_mat);
                if let Some(dx) = dx.as_mut() {
                    let mut dxb = dx
                        .index_axis_mut(Axis(0), bi)
                        .into_shape_with_order((in_ch, h * w))
                        .expect("dx is standard layout");
                    general_mat_mul(1.0, &w_mat.t(), &gb, 0.0, &mut dxb);
                }
            } else {
                let col = &ctx.cols.as_ref().expect("conv ctx stores cols")[bi];
                general_mat_mul(1.0, &gb, &col.t(), 1.0, &mut gw_mat);
                if let Some(dx) = dx.as_mut() {
                    general_mat_mul(1.0, &w_mat.t(), &gb, 0.0, &mut dcol.view_mut());
                    let mut dxb = dx.index_axis_mut(Axis(0), bi);
                    col2im_add(&dcol, k, stride, pad, oh, ow, &mut dxb);
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut super::ParamFn<'_>) {
        let wshape = self.weight.shape().to_vec();
        f(
            &format!("{prefix}/weight"),
            &wshape,
            self.weight.as_slice_mut().expect("standard layout"),
            self.grad_weight.as_slice_mut().expect("standard layout"),
        );
        let bshape = self.bias.shape().to_vec();
        f(
            &format!("{prefix}/bias"),
            &bshape,
            self.bias.as_slice_mut().expect("standard layout"),
            self.grad_bias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// Unfold a `[C, H, W]` view into a `[C*k*k, oh*ow]` patch matrix.
fn im2col(x: &ArrayView3<'_, f32>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        let plane = plane.to_slice().expect("input plane is contiguous");
        for kh in 0..k {
            for kw in 0..k {
                let row_idx = (ci * k + kh) * k + kw;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().expect("col row is contiguous");
                let (ox_lo, ox_hi) = valid_range(w, kw, pad, stride, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..iy as usize * w + w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // ix = ox + kw - pad; valid_range guarantees no underflow.
                        let ix_lo = ox_lo + kw - pad;
                        let n = ox_hi - ox_lo;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + n]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * stride + kw - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back onto the input plane.
fn col2im_add(
    dcol: &Array2<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut ArrayViewMut3<'_, f32>,
) {
    let (c, h, w) = dx.dim();
    for ci in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ci);
        let plane = plane.as_slice_mut().expect("dx plane is contiguous");
        for kh in 0..k {
            for kw in 0..k {
                let row_idx = (ci * k + kh) * k + kw;
                let row = dcol.row(row_idx);
                let row = row.to_slice().expect("dcol row is contiguous");
                let (ox_lo, ox_hi) = valid_range(w, kw, pad, stride, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..iy as usize * w + w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox * stride + kw - pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Output-column range for which `ox*stride + kw - pad` lands inside `[0, w)`.
fn valid_range(w: usize, kw: usize, pad: usize, stride: usize, ow: usize) -> (usize, usize) {
    let lo = if kw >= pad { 0 } else { (pad - kw).div_ceil(stride) };
    let hi = if w + pad > kw {
        (((w + pad - kw - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}
