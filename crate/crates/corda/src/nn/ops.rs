//! Elementwise activations and bilinear resampling with explicit backward passes.

use ndarray::Array4;

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Mask `grad` in place with the activation pattern of the forward output.
pub fn relu_backward_inplace(y: &Array4<f32>, grad: &mut Array4<f32>) {
    ndarray::azip!((g in grad, &y in y) if y <= 0.0 { *g = 0.0 });
}

pub fn sigmoid(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// d/dx sigmoid given the forward output: y * (1 - y) * grad.
pub fn sigmoid_backward(y: &Array4<f32>, grad: &Array4<f32>) -> Array4<f32> {
    let mut out = grad.clone();
    ndarray::azip!((g in &mut out, &y in y) *g *= y * (1.0 - y));
    out
}

/// Precomputed source indices and fractional offsets for one output axis.
struct AxisPlan {
    i0: Vec<usize>,
    i1: Vec<usize>,
    frac: Vec<f32>,
}

/// Half-pixel-centre mapping with edge clamping.
fn axis_plan(in_len: usize, out_len: usize) -> AxisPlan {
    let scale = in_len as f32 / out_len as f32;
    let mut i0 = Vec::with_capacity(out_len);
    let mut i1 = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = (o as f32 + 0.5) * scale - 0.5;
        if src <= 0.0 {
            i0.push(0);
            i1.push(0);
            frac.push(0.0);
        } else if src >= (in_len - 1) as f32 {
            i0.push(in_len - 1);
            i1.push(in_len - 1);
            frac.push(0.0);
        } else {
            let f = src.floor();
            i0.push(f as usize);
            i1.push(f as usize + 1);
            frac.push(src - f);
        }
    }
    AxisPlan { i0, i1, frac }
}

/// Bilinear resize of a `[B, C, H, W]` tensor to `out_h x out_w`.
///
/// Interpolation uses the lerp form `a + t*(b-a)`, which reproduces constant
/// inputs bit-exactly.
pub fn bilinear_resize(x: &Array4<f32>, out_h: usize, out_w: usize) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ys = axis_plan(h, out_h);
    let xs = axis_plan(w, out_w);
    let mut y = Array4::<f32>::zeros((b, c, out_h, out_w));
    let src = x.as_slice().expect("input is standard layout");
    let dst = y.as_slice_mut().expect("output is standard layout");
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        let out_plane = &mut dst[bc * out_h * out_w..(bc + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ys.i0[oy], ys.i1[oy], ys.frac[oy]);
            let row0 = &plane[y0 * w..y0 * w + w];
            let row1 = &plane[y1 * w..y1 * w + w];
            let out_row = &mut out_plane[oy * out_w..(oy + 1) * out_w];
            for ox in 0..out_w {
                let (x0, x1, fx) = (xs.i0[ox], xs.i1[ox], xs.frac[ox]);
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                out_row[ox] = top + fy * (bot - top);
            }
        }
    }
    y
}

/// Adjoint of `bilinear_resize`: scatter output gradients back to an
/// `in_h x in_w` grid.
pub fn bilinear_resize_backward(grad: &Array4<f32>, in_h: usize, in_w: usize) -> Array4<f32> {
    let (b, c, oh, ow) = grad.dim();
    if (oh, ow) == (in_h, in_w) {
        return grad.clone();
    }
    let ys = axis_plan(in_h, oh);
    let xs = axis_plan(in_w, ow);
    let mut dx = Array4::<f32>::zeros((b, c, in_h, in_w));
    let src = grad.as_slice().expect("grad is standard layout");
    let dst = dx.as_slice_mut().expect("dx is standard layout");
    for bc in 0..b * c {
        let g_plane = &src[bc * oh * ow..(bc + 1) * oh * ow];
        let d_plane = &mut dst[bc * in_h * in_w..(bc + 1) * in_h * in_w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ys.i0[oy], ys.i1[oy], ys.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (xs.i0[ox], xs.i1[ox], xs.frac[ox]);
                let g = g_plane[oy * ow + ox];
                d_plane[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                d_plane[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                d_plane[y1 * in_w + x0] += g * fy * (1.0 - fx);
                d_plane[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants_exactly() {
        for &c in &[0.0f32, 1.0, -3.25, 0.7318] {
            let x = Array4::from_elem((1, 2, 4, 4), c);
            let y = bilinear_resize(&x, 32, 32);
            assert!(y.iter().all(|&v| v == c), "constant {c} not preserved");
        }
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let mut x = Array4::<f32>::zeros((1, 1, 3, 3));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f32;
        }
        let y = bilinear_resize(&x, 3, 3);
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <A x, y> == <x, A^T y> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut x = Array4::<f32>::zeros((1, 2, 4, 5));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut y = Array4::<f32>::zeros((1, 2, 9, 11));
        for v in y.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let ax = bilinear_resize(&x, 9, 11);
        let aty = bilinear_resize_backward(&y, 4, 5);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "adjoint identity violated: {lhs} vs {rhs}");
    }
}
