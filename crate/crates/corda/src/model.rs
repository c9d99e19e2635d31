//! Dual-task segmentation/depth network with a shared encoder, shared
//! semantic heads, domain-specific depth heads and a domain-shared task
//! feature correlation module.
//!
//! Layout per forward pass:
//! backbone -> per-task bottlenecks -> intermediate heads (sem shared, depth
//! per-domain) -> feature correlation -> final decoders (sem shared, depth
//! per-domain). All predictions are rescaled to the input resolution with
//! bilinear interpolation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Domain;
use crate::error::{CordaError, Result};
use crate::nn::ops::{bilinear_resize, bilinear_resize_backward, relu, relu_backward_inplace, sigmoid, sigmoid_backward};
use crate::nn::{Conv2d, ConvCtx, ParamFn};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each backbone block.
    pub backbone_channels: Vec<usize>,
    /// Stride of each backbone block; the product is the feature stride.
    pub backbone_strides: Vec<usize>,
    /// Channels of the per-task bottleneck features.
    pub feature_channels: usize,
    pub num_classes: usize,
    /// Nominal input size, used for validation and the checkpoint echo.
    pub input_size: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            feature_channels: 64,
            num_classes: 5,
            input_size: [64, 64],
        }
    }
}

impl ModelConfig {
    pub fn total_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return Err(CordaError::config(
                "backbone_channels and backbone_strides must be non-empty and equal length",
            ));
        }
        if self.feature_channels == 0 {
            return Err(CordaError::config("feature_channels must be > 0"));
        }
        if self.num_classes < 2 {
            return Err(CordaError::config("num_classes must be >= 2"));
        }
        let stride = self.total_stride();
        if stride == 0 || self.input_size[0] % stride != 0 || self.input_size[1] % stride != 0 {
            return Err(CordaError::config(format!(
                "total stride {stride} must divide input size {:?}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// The four attention convolutions of the task feature correlation module.
///
/// Distillation is residual:
/// `F_seg_o   = F_seg   + (w_d1 * F_depth) .* sigmoid(w_d2 * F_depth)`
/// `F_depth_o = F_depth + (w_s1 * F_seg)   .* sigmoid(w_s2 * F_seg)`
pub struct CorrelationParams {
    pub w_d1: Conv2d,
    pub w_d2: Conv2d,
    pub w_s1: Conv2d,
    pub w_s2: Conv2d,
}

pub struct CorrCtx {
    d1: ConvCtx,
    d2: ConvCtx,
    s1: ConvCtx,
    s2: ConvCtx,
    att_d: Array4<f32>,
    gate_d: Array4<f32>,
    att_s: Array4<f32>,
    gate_s: Array4<f32>,
}

impl CorrelationParams {
    fn new(feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        // The additive branches start at zero so distillation begins as the
        // identity; the gate convolutions start from the usual random init.
        CorrelationParams {
            w_d1: Conv2d::new(feature_channels, feature_channels, 3, 1, 1),
            w_d2: Conv2d::kaiming(feature_channels, feature_channels, 3, 1, 1, rng),
            w_s1: Conv2d::new(feature_channels, feature_channels, 3, 1, 1),
            w_s2: Conv2d::kaiming(feature_channels, feature_channels, 3, 1, 1, rng),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.w_d1.in_channels()
    }

    /// Apply the correlation module to one pair of feature maps.
    pub fn distill(
        &self,
        f_seg: &Array4<f32>,
        f_depth: &Array4<f32>,
        keep_ctx: bool,
    ) -> Result<(Array4<f32>, Array4<f32>, Option<CorrCtx>)> {
        let channels = self.feature_channels();
        if f_seg.dim() != f_depth.dim() || f_seg.dim().1 != channels {
            return Err(CordaError::contract(format!(
                "correlation features must both be [B, {channels}, h, w], got {:?} and {:?}",
                f_seg.dim(),
                f_depth.dim()
            )));
        }
        let (att_d, d1) = self.w_d1.forward(f_depth, keep_ctx);
        let (pre_d, d2) = self.w_d2.forward(f_depth, keep_ctx);
        let gate_d = sigmoid(&pre_d);
        let mut f_seg_o = f_seg.clone();
        ndarray::azip!((o in &mut f_seg_o, &a in &att_d, &g in &gate_d) *o += a * g);

        let (att_s, s1) = self.w_s1.forward(f_seg, keep_ctx);
        let (pre_s, s2) = self.w_s2.forward(f_seg, keep_ctx);
        let gate_s = sigmoid(&pre_s);
        let mut f_depth_o = f_depth.clone();
        ndarray::azip!((o in &mut f_depth_o, &a in &att_s, &g in &gate_s) *o += a * g);

        let ctx = keep_ctx.then(|| CorrCtx {
            d1: d1.unwrap(),
            d2: d2.unwrap(),
            s1: s1.unwrap(),
            s2: s2.unwrap(),
            att_d,
            gate_d,
            att_s,
            gate_s,
        });
        Ok((f_seg_o, f_depth_o, ctx))
    }

    /// Backward through the module; returns gradients w.r.t. the raw
    /// `(f_seg, f_depth)` inputs.
    fn backward(
        &mut self,
        ctx: &CorrCtx,
        d_seg_o: &Array4<f32>,
        d_depth_o: &Array4<f32>,
    ) -> (Array4<f32>, Array4<f32>) {
        // Seg output path: F_seg_o = F_seg + att_d .* gate_d.
        let mut d_att_d = d_seg_o.clone();
        ndarray::azip!((g in &mut d_att_d, &s in &ctx.gate_d) *g *= s);
        let mut d_gate_d = d_seg_o.clone();
        ndarray::azip!((g in &mut d_gate_d, &a in &ctx.att_d) *g *= a);
        let d_pre_d = sigmoid_backward(&ctx.gate_d, &d_gate_d);

        // Depth output path: F_depth_o = F_depth + att_s .* gate_s.
        let mut d_att_s = d_depth_o.clone();
        ndarray::azip!((g in &mut d_att_s, &s in &ctx.gate_s) *g *= s);
        let mut d_gate_s = d_depth_o.clone();
        ndarray::azip!((g in &mut d_gate_s, &a in &ctx.att_s) *g *= a);
        let d_pre_s = sigmoid_backward(&ctx.gate_s, &d_gate_s);

        let mut d_seg = d_seg_o.clone();
        let s1 = self.w_s1.backward(&ctx.s1, &d_att_s, true).unwrap();
        let s2 = self.w_s2.backward(&ctx.s2, &d_pre_s, true).unwrap();
        d_seg += &s1;
        d_seg += &s2;

        let mut d_depth = d_depth_o.clone();
        let d1 = self.w_d1.backward(&ctx.d1, &d_att_d, true).unwrap();
        let d2 = self.w_d2.backward(&ctx.d2, &d_pre_d, true).unwrap();
        d_depth += &d1;
        d_depth += &d2;

        (d_seg, d_depth)
    }

    fn visit_params(&mut self, f: &mut ParamFn<'_>) {
        self.w_d1.visit_params("corr/w_d1", f);
        self.w_d2.visit_params("corr/w_d2", f);
        self.w_s1.visit_params("corr/w_s1", f);
        self.w_s2.visit_params("corr/w_s2", f);
    }

    fn zero_grad(&mut self) {
        self.w_d1.zero_grad();
        self.w_d2.zero_grad();
        self.w_s1.zero_grad();
        self.w_s2.zero_grad();
    }
}

/// Two-layer decoder: 3x3 conv + relu, then a 1x1 projection.
struct DecoderBlock {
    conv: Conv2d,
    out: Conv2d,
}

struct DecoderCtx {
    conv_ctx: ConvCtx,
    hidden: Array4<f32>,
    out_ctx: ConvCtx,
}

impl DecoderBlock {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderBlock {
            conv: Conv2d::kaiming(in_ch, in_ch, 3, 1, 1, rng),
            out: Conv2d::kaiming(in_ch, out_ch, 1, 1, 0, rng),
        }
    }

    fn forward(&self, x: &Array4<f32>, keep_ctx: bool) -> (Array4<f32>, Option<DecoderCtx>) {
        let (pre, conv_ctx) = self.conv.forward(x, keep_ctx);
        let hidden = relu(&pre);
        let (y, out_ctx) = self.out.forward(&hidden, keep_ctx);
        let ctx = keep_ctx.then(|| DecoderCtx {
            conv_ctx: conv_ctx.unwrap(),
            hidden,
            out_ctx: out_ctx.unwrap(),
        });
        (y, ctx)
    }

    fn backward(&mut self, ctx: &DecoderCtx, grad_out: &Array4<f32>) -> Array4<f32> {
        let mut d_hidden = self.out.backward(&ctx.out_ctx, grad_out, true).unwrap();
        relu_backward_inplace(&ctx.hidden, &mut d_hidden);
        self.conv.backward(&ctx.conv_ctx, &d_hidden, true).unwrap()
    }

    fn copy_params_from(&mut self, other: &DecoderBlock) {
        self.conv.copy_params_from(&other.conv);
        self.out.copy_params_from(&other.out);
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.conv.visit_params(&format!("{prefix}/conv"), f);
        self.out.visit_params(&format!("{prefix}/out"), f);
    }

    fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.out.zero_grad();
    }
}

/// Every prediction and feature map produced by one forward pass.
pub struct ModelOutput {
    /// Intermediate semantic logits, upsampled to input resolution.
    pub sem_init: Array4<f32>,
    /// Intermediate inverse-depth prediction at input resolution.
    pub depth_init: Array3<f32>,
    pub sem_final: Array4<f32>,
    pub depth_final: Array3<f32>,
    pub f_seg: Array4<f32>,
    pub f_depth: Array4<f32>,
    pub f_seg_o: Array4<f32>,
    pub f_depth_o: Array4<f32>,
}

pub struct IntermediateOut {
    pub sem_init: Array4<f32>,
    pub depth_init: Array3<f32>,
    pub f_seg: Array4<f32>,
    pub f_depth: Array4<f32>,
}

/// Gradients flowing into the outputs of one forward pass; `None` entries
/// contribute nothing.
#[derive(Default)]
pub struct OutputGrads {
    pub sem_init: Option<Array4<f32>>,
    pub depth_init: Option<Array3<f32>>,
    pub sem_final: Option<Array4<f32>>,
    pub depth_final: Option<Array3<f32>>,
}

pub struct Tape {
    domain: Domain,
    feat_hw: (usize, usize),
    backbone: Vec<(ConvCtx, Array4<f32>)>,
    seg_bn: (ConvCtx, Array4<f32>),
    depth_bn: (ConvCtx, Array4<f32>),
    sem_init_ctx: ConvCtx,
    depth_init_ctx: ConvCtx,
    corr: Option<CorrCtx>,
    sem_dec: DecoderCtx,
    depth_dec: DecoderCtx,
}

pub struct CordaNet {
    pub config: ModelConfig,
    backbone: Vec<Conv2d>,
    seg_bottleneck: Conv2d,
    depth_bottleneck: Conv2d,
    sem_head_init: Conv2d,
    depth_head_init_src: Conv2d,
    depth_head_init_tgt: Conv2d,
    pub corr: CorrelationParams,
    sem_decoder: DecoderBlock,
    depth_decoder_src: DecoderBlock,
    depth_decoder_tgt: DecoderBlock,
}

impl CordaNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let f = config.feature_channels;
        let c = config.num_classes;

        let mut backbone = Vec::new();
        let mut in_ch = 3;
        for (&out_ch, &stride) in config.backbone_channels.iter().zip(&config.backbone_strides) {
            backbone.push(Conv2d::kaiming(in_ch, out_ch, 3, stride, 1, rng));
            in_ch = out_ch;
        }
        let fb = in_ch;

        let seg_bottleneck = Conv2d::kaiming(fb, f, 1, 1, 0, rng);
        let depth_bottleneck = Conv2d::kaiming(fb, f, 1, 1, 0, rng);
        let sem_head_init = Conv2d::kaiming(f, c, 1, 1, 0, rng);
        // Depth heads and decoders start tied across domains: before any
        // training the two decoders agree everywhere, so the discrepancy-based
        // weights start at 1 and drift only as the domains diverge.
        let depth_head_init_src = Conv2d::kaiming(f, 1, 1, 1, 0, rng);
        let mut depth_head_init_tgt = Conv2d::new(f, 1, 1, 1, 0);
        depth_head_init_tgt.copy_params_from(&depth_head_init_src);

        let corr = CorrelationParams::new(f, rng);
        let sem_decoder = DecoderBlock::new(f, c, rng);
        let depth_decoder_src = DecoderBlock::new(f, 1, rng);
        let mut depth_decoder_tgt = DecoderBlock::new(f, 1, rng);
        depth_decoder_tgt.copy_params_from(&depth_decoder_src);

        Ok(CordaNet {
            config,
            backbone,
            seg_bottleneck,
            depth_bottleneck,
            sem_head_init,
            depth_head_init_src,
            depth_head_init_tgt,
            corr,
            sem_decoder,
            depth_decoder_src,
            depth_decoder_tgt,
        })
    }

    fn depth_head_init(&self, domain: Domain) -> &Conv2d {
        match domain {
            Domain::Source => &self.depth_head_init_src,
            Domain::Target => &self.depth_head_init_tgt,
        }
    }

    fn depth_decoder(&self, domain: Domain) -> &DecoderBlock {
        match domain {
            Domain::Source => &self.depth_decoder_src,
            Domain::Target => &self.depth_decoder_tgt,
        }
    }

    fn check_input(&self, images: &Array4<f32>) -> Result<(usize, usize)> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(CordaError::contract(format!("expected 3 input channels, got {c}")));
        }
        let stride = self.config.total_stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(CordaError::contract(format!(
                "input dims {h}x{w} not divisible by total stride {stride}"
            )));
        }
        Ok((h, w))
    }

    /// Shared encoder. Deterministic; `h_out = h / total_stride`.
    pub fn backbone_forward(&self, images: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(images)?;
        let mut x = images.clone();
        for conv in &self.backbone {
            let (y, _) = conv.forward(&x, false);
            x = relu(&y);
        }
        Ok(x)
    }

    fn backbone_forward_tape(&self, images: &Array4<f32>) -> (Array4<f32>, Vec<(ConvCtx, Array4<f32>)>) {
        let mut tape = Vec::with_capacity(self.backbone.len());
        let mut x = images.clone();
        for conv in &self.backbone {
            let (y, ctx) = conv.forward(&x, true);
            x = relu(&y);
            tape.push((ctx.unwrap(), x.clone()));
        }
        (x, tape)
    }

    /// Bottlenecks plus intermediate heads. The semantic head is shared by
    /// both domains; the depth head is selected by `domain`.
    pub fn intermediate_stage(
        &self,
        features: &Array4<f32>,
        domain: Domain,
        out_hw: (usize, usize),
    ) -> Result<IntermediateOut> {
        let (f_seg, _) = self.seg_bottleneck.forward(features, false);
        let f_seg = relu(&f_seg);
        let (f_depth, _) = self.depth_bottleneck.forward(features, false);
        let f_depth = relu(&f_depth);
        let (sem_lo, _) = self.sem_head_init.forward(&f_seg, false);
        let (dep_lo, _) = self.depth_head_init(domain).forward(&f_depth, false);
        Ok(IntermediateOut {
            sem_init: bilinear_resize(&sem_lo, out_hw.0, out_hw.1),
            depth_init: squeeze_channel(&bilinear_resize(&dep_lo, out_hw.0, out_hw.1)),
            f_seg,
            f_depth,
        })
    }

    /// Final decoders on distilled features: shared semantic decoder,
    /// domain-selected depth decoder.
    pub fn final_stage(
        &self,
        f_seg_o: &Array4<f32>,
        f_depth_o: &Array4<f32>,
        domain: Domain,
        out_hw: (usize, usize),
    ) -> Result<(Array4<f32>, Array3<f32>)> {
        let (sem_lo, _) = self.sem_decoder.forward(f_seg_o, false);
        let (dep_lo, _) = self.depth_decoder(domain).forward(f_depth_o, false);
        Ok((
            bilinear_resize(&sem_lo, out_hw.0, out_hw.1),
            squeeze_channel(&bilinear_resize(&dep_lo, out_hw.0, out_hw.1)),
        ))
    }

    /// Final depth prediction from already-distilled features using the
    /// decoder of an arbitrary domain (used to compare the two decoders on
    /// one target image).
    pub fn decode_depth_final(
        &self,
        f_depth_o: &Array4<f32>,
        domain: Domain,
        out_hw: (usize, usize),
    ) -> Array3<f32> {
        let (dep_lo, _) = self.depth_decoder(domain).forward(f_depth_o, false);
        squeeze_channel(&bilinear_resize(&dep_lo, out_hw.0, out_hw.1))
    }

    /// Full forward pass. `distill` gates the correlation module (identity
    /// pass-through when false); `keep_tape` records the caches needed by
    /// [`CordaNet::backward`].
    pub fn forward(
        &self,
        images: &Array4<f32>,
        domain: Domain,
        distill: bool,
        keep_tape: bool,
    ) -> Result<(ModelOutput, Option<Tape>)> {
        let (h, w) = self.check_input(images)?;

        if !keep_tape {
            let features = self.backbone_forward(images)?;
            let inter = self.intermediate_stage(&features, domain, (h, w))?;
            let (f_seg_o, f_depth_o) = if distill {
                let (a, b, _) = self.corr.distill(&inter.f_seg, &inter.f_depth, false)?;
                (a, b)
            } else {
                (inter.f_seg.clone(), inter.f_depth.clone())
            };
            let (sem_final, depth_final) = self.final_stage(&f_seg_o, &f_depth_o, domain, (h, w))?;
            return Ok((
                ModelOutput {
                    sem_init: inter.sem_init,
                    depth_init: inter.depth_init,
                    sem_final,
                    depth_final,
                    f_seg: inter.f_seg,
                    f_depth: inter.f_depth,
                    f_seg_o,
                    f_depth_o,
                },
                None,
            ));
        }

        let (features, backbone_tape) = self.backbone_forward_tape(images);
        let feat_hw = (features.dim().2, features.dim().3);

        let (seg_pre, seg_ctx) = self.seg_bottleneck.forward(&features, true);
        let f_seg = relu(&seg_pre);
        let (depth_pre, depth_ctx) = self.depth_bottleneck.forward(&features, true);
        let f_depth = relu(&depth_pre);

        let (sem_lo, sem_init_ctx) = self.sem_head_init.forward(&f_seg, true);
        let (dep_lo, depth_init_ctx) = self.depth_head_init(domain).forward(&f_depth, true);
        let sem_init = bilinear_resize(&sem_lo, h, w);
        let depth_init = squeeze_channel(&bilinear_resize(&dep_lo, h, w));

        let (f_seg_o, f_depth_o, corr_ctx) = if distill {
            self.corr.distill(&f_seg, &f_depth, true)?
        } else {
            (f_seg.clone(), f_depth.clone(), None)
        };

        let (sem_fin_lo, sem_dec_ctx) = self.sem_decoder.forward(&f_seg_o, true);
        let (dep_fin_lo, depth_dec_ctx) = self.depth_decoder(domain).forward(&f_depth_o, true);
        let sem_final = bilinear_resize(&sem_fin_lo, h, w);
        let depth_final = squeeze_channel(&bilinear_resize(&dep_fin_lo, h, w));

        let tape = Tape {
            domain,
            feat_hw,
            backbone: backbone_tape,
            seg_bn: (seg_ctx.unwrap(), f_seg.clone()),
            depth_bn: (depth_ctx.unwrap(), f_depth.clone()),
            sem_init_ctx: sem_init_ctx.unwrap(),
            depth_init_ctx: depth_init_ctx.unwrap(),
            corr: corr_ctx,
            sem_dec: sem_dec_ctx.unwrap(),
            depth_dec: depth_dec_ctx.unwrap(),
        };

        Ok((
            ModelOutput {
                sem_init,
                depth_init,
                sem_final,
                depth_final,
                f_seg,
                f_depth,
                f_seg_o,
                f_depth_o,
            },
            Some(tape),
        ))
    }

    /// Accumulate parameter gradients for one recorded forward pass.
    pub fn backward(&mut self, tape: &Tape, grads: &OutputGrads) -> Result<()> {
        let (fh, fw) = tape.feat_hw;
        let domain = tape.domain;

        // Final decoders.
        let d_f_seg_o = match &grads.sem_final {
            Some(g) => {
                let g_lo = bilinear_resize_backward(g, fh, fw);
                Some(self.sem_decoder.backward(&tape.sem_dec, &g_lo))
            }
            None => None,
        };
        let d_f_depth_o = match &grads.depth_final {
            Some(g) => {
                let g_lo = bilinear_resize_backward(&unsqueeze_channel(g), fh, fw);
                let dec = match domain {
                    Domain::Source => &mut self.depth_decoder_src,
                    Domain::Target => &mut self.depth_decoder_tgt,
                };
                Some(dec.backward(&tape.depth_dec, &g_lo))
            }
            None => None,
        };

        // Correlation module (identity when not distilled).
        let zero_feat = || Array4::<f32>::zeros(tape.seg_bn.1.dim());
        let (mut d_f_seg, mut d_f_depth) = if let Some(corr_ctx) = &tape.corr {
            let d_seg_o = d_f_seg_o.unwrap_or_else(zero_feat);
            let d_depth_o = d_f_depth_o.unwrap_or_else(zero_feat);
            self.corr.backward(corr_ctx, &d_seg_o, &d_depth_o)
        } else {
            (
                d_f_seg_o.unwrap_or_else(zero_feat),
                d_f_depth_o.unwrap_or_else(zero_feat),
            )
        };

        // Intermediate heads.
        if let Some(g) = &grads.sem_init {
            let g_lo = bilinear_resize_backward(g, fh, fw);
            d_f_seg += &self.sem_head_init.backward(&tape.sem_init_ctx, &g_lo, true).unwrap();
        }
        if let Some(g) = &grads.depth_init {
            let g_lo = bilinear_resize_backward(&unsqueeze_channel(g), fh, fw);
            let head = match domain {
                Domain::Source => &mut self.depth_head_init_src,
                Domain::Target => &mut self.depth_head_init_tgt,
            };
            d_f_depth += &head.backward(&tape.depth_init_ctx, &g_lo, true).unwrap();
        }

        // Bottlenecks.
        relu_backward_inplace(&tape.seg_bn.1, &mut d_f_seg);
        let mut d_features = self.seg_bottleneck.backward(&tape.seg_bn.0, &d_f_seg, true).unwrap();
        relu_backward_inplace(&tape.depth_bn.1, &mut d_f_depth);
        d_features += &self.depth_bottleneck.backward(&tape.depth_bn.0, &d_f_depth, true).unwrap();

        // Backbone, reversed.
        let mut grad = d_features;
        for (i, conv) in self.backbone.iter_mut().enumerate().rev() {
            let (ctx, post_relu) = &tape.backbone[i];
            relu_backward_inplace(post_relu, &mut grad);
            match conv.backward(ctx, &grad, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for conv in &mut self.backbone {
            conv.zero_grad();
        }
        self.seg_bottleneck.zero_grad();
        self.depth_bottleneck.zero_grad();
        self.sem_head_init.zero_grad();
        self.depth_head_init_src.zero_grad();
        self.depth_head_init_tgt.zero_grad();
        self.corr.zero_grad();
        self.sem_decoder.zero_grad();
        self.depth_decoder_src.zero_grad();
        self.depth_decoder_tgt.zero_grad();
    }

    /// Visit every parameter block in canonical checkpoint order.
    pub fn visit_params(&mut self, f: &mut ParamFn<'_>) {
        for (i, conv) in self.backbone.iter_mut().enumerate() {
            conv.visit_params(&format!("backbone/{i}"), f);
        }
        self.seg_bottleneck.visit_params("seg_bottleneck", f);
        self.depth_bottleneck.visit_params("depth_bottleneck", f);
        self.sem_head_init.visit_params("sem_head_init", f);
        self.depth_head_init_src.visit_params("depth_head_init_src", f);
        self.depth_head_init_tgt.visit_params("depth_head_init_tgt", f);
        self.corr.visit_params(f);
        self.sem_decoder.visit_params("sem_decoder", f);
        self.depth_decoder_src.visit_params("depth_decoder_src", f);
        self.depth_decoder_tgt.visit_params("depth_decoder_tgt", f);
    }

    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _, _, _| names.push(name.to_string()));
        names
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, data, _| n += data.len());
        n
    }
}

fn squeeze_channel(x: &Array4<f32>) -> Array3<f32> {
    debug_assert_eq!(x.dim().1, 1);
    x.index_axis(Axis(1), 0).to_owned()
}

fn unsqueeze_channel(x: &Array3<f32>) -> Array4<f32> {
    let (b, h, w) = x.dim();
    x.clone().into_shape_with_order((b, 1, h, w)).expect("standard layout")
}

// ---------------------------------------------------------------------------
// Checkpoint format: versioned single-file archive of all parameter blocks
// keyed by canonical path, plus the model config and training iteration.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"CORDANET";
const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub momentum: Vec<(String, Vec<f32>)>,
}

pub fn save_checkpoint(
    path: &Path,
    net: &mut CordaNet,
    iteration: u64,
    momentum: &[(String, Vec<f32>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(&net.config).expect("config serializes");
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&iteration.to_le_bytes());

    let mut blocks: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    net.visit_params(&mut |name, shape, data, _| {
        blocks.push((name.to_string(), shape.to_vec(), data.to_vec()));
    });
    write_blocks(&mut buf, &blocks);

    buf.push(u8::from(!momentum.is_empty()));
    if !momentum.is_empty() {
        let blocks: Vec<(String, Vec<usize>, Vec<f32>)> = momentum
            .iter()
            .map(|(n, v)| (n.clone(), vec![v.len()], v.clone()))
            .collect();
        write_blocks(&mut buf, &blocks);
    }

    let mut file = std::fs::File::create(path).map_err(|e| CordaError::io(path, e))?;
    file.write_all(&buf).map_err(|e| CordaError::io(path, e))
}

fn write_blocks(buf: &mut Vec<u8>, blocks: &[(String, Vec<usize>, Vec<f32>)]) {
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, shape, data) in blocks {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CordaError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| CordaError::io(path, e))?;
    let err = |msg: &str| CordaError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(err("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let config_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut pos, config_len)?)
        .map_err(|_| err("bad config json"))?;
    let iteration = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());

    let params = read_blocks(&bytes, &mut pos, path)?;
    let has_momentum = take(&mut pos, 1)?[0] != 0;
    let momentum = if has_momentum {
        read_blocks(&bytes, &mut pos, path)?
            .into_iter()
            .map(|(n, _, v)| (n, v))
            .collect()
    } else {
        Vec::new()
    };

    Ok(Checkpoint {
        config,
        iteration,
        params,
        momentum,
    })
}

fn read_blocks(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let err = |msg: &str| CordaError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(err("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap());
    let mut blocks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(pos, name_len)?.to_vec()).map_err(|_| err("bad block name"))?;
        let ndim = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(pos, n * 4)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        blocks.push((name, shape, data));
    }
    Ok(blocks)
}

/// Rebuild a network from a checkpoint. Every parameter block must be present
/// with a matching shape.
pub fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<CordaNet> {
    let mut net = CordaNet::new(ckpt.config.clone(), 0)?;
    let mut by_name: std::collections::HashMap<&str, (&[usize], &[f32])> = ckpt
        .params
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
        .collect();
    let mut missing = Vec::new();
    net.visit_params(&mut |name, shape, data, _| match by_name.remove(name) {
        Some((s, d)) if s == shape && d.len() == data.len() => data.copy_from_slice(d),
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(CordaError::Checkpoint {
            path: std::path::PathBuf::from("<checkpoint>"),
            msg: format!("missing or mismatched blocks: {missing:?}"),
        });
    }
    Ok(net)
}
