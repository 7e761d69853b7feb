//! Composite network blocks: GhostConv, GSConv, GSBottleneck, VoVGSCSPC and
//! the LEDH detection head, plus anchor-free detection decoding.
//!
//! Each block is a fixed composition of `tensor` primitives. A block's
//! convolutions are described by [`plan`] functions returning the `ConvSpec`s
//! in forward order; weight allocation, forward execution and the static cost
//! model all consume the same plan, so they cannot drift apart.
//!
//! Every internal convolution is followed by SiLU; the 1x1 output
//! convolutions of detection heads emit raw logits.

use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::tensor::{
    add, channel_shuffle, concat_channels, conv2d, silu, ConvSpec, Tensor, WeightBlock,
};

/// GhostConv parameters: dense primary conv to c2/2 channels with kernel
/// `k_m`, then a depthwise "ghost" conv with kernel `k_c` over the primary
/// output; the two halves are concatenated.
#[derive(Debug, Clone, Copy)]
pub struct GhostSpec {
    pub c1: usize,
    pub c2: usize,
    pub k_m: usize,
    pub k_c: usize,
    pub stride: usize,
}

impl GhostSpec {
    pub fn new(c1: usize, c2: usize) -> Self {
        GhostSpec {
            c1,
            c2,
            k_m: 3,
            k_c: 5,
            stride: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn kernels(mut self, k_m: usize, k_c: usize) -> Self {
        self.k_m = k_m;
        self.k_c = k_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c2 % 2 != 0 {
            return Err(Error::config(format!(
                "ghost_conv c2 must be even, got {}",
                self.c2
            )));
        }
        if self.k_m % 2 == 0 || self.k_c % 2 == 0 {
            return Err(Error::config("ghost kernels must be odd"));
        }
        Ok(())
    }
}

/// Plan for GhostConv: [primary SC, cheap depthwise].
pub fn ghost_plan(spec: &GhostSpec) -> Result<Vec<ConvSpec>> {
    spec.validate()?;
    let half = spec.c2 / 2;
    Ok(vec![
        ConvSpec::new(spec.c1, half, spec.k_m).stride(spec.stride),
        ConvSpec::depthwise(half, spec.k_c),
    ])
}

pub fn ghost_conv(x: &Tensor, spec: &GhostSpec, weights: &[WeightBlock]) -> Result<Tensor> {
    let plan = ghost_plan(spec)?;
    check_weights("ghost_conv", &plan, weights)?;
    let y1 = silu(&conv2d(x, &plan[0], &weights[0])?);
    let y2 = silu(&conv2d(&y1, &plan[1], &weights[1])?);
    concat_channels(&[&y1, &y2])
}

/// Plan for GSConv: [SC c1 -> c2/2 (carries the stride), DW 3x3].
pub fn gs_conv_plan(c1: usize, c2: usize, stride: usize) -> Result<Vec<ConvSpec>> {
    if c2 % 2 != 0 {
        return Err(Error::config(format!("gs_conv c2 must be even, got {c2}")));
    }
    let half = c2 / 2;
    Ok(vec![
        ConvSpec::new(c1, half, 3).stride(stride),
        ConvSpec::depthwise(half, 3),
    ])
}

/// GSConv: Shuffle(Cat(SC(x), DW(SC(x)))) with a 2-group shuffle.
pub fn gs_conv(x: &Tensor, c2: usize, stride: usize, weights: &[WeightBlock]) -> Result<Tensor> {
    let plan = gs_conv_plan(x.c(), c2, stride)?;
    check_weights("gs_conv", &plan, weights)?;
    let y1 = silu(&conv2d(x, &plan[0], &weights[0])?);
    let y2 = silu(&conv2d(&y1, &plan[1], &weights[1])?);
    channel_shuffle(&concat_channels(&[&y1, &y2])?, 2)
}

/// Plan for GSBottleneck on C1 input channels, at constant C1/2 inner width:
/// [main 1x1 C1 -> C1/2, gs_conv a (2 convs), gs_conv b (2 convs),
///  shortcut 1x1 C1 -> C1/2].
pub fn gs_bottleneck_plan(c1: usize) -> Result<Vec<ConvSpec>> {
    if c1 % 2 != 0 {
        return Err(Error::config(format!(
            "gs_bottleneck input channels must be even, got {c1}"
        )));
    }
    let half = c1 / 2;
    let mut plan = vec![ConvSpec::new(c1, half, 1)];
    plan.extend(gs_conv_plan(half, half, 1)?);
    plan.extend(gs_conv_plan(half, half, 1)?);
    plan.push(ConvSpec::new(c1, half, 1));
    Ok(plan)
}

pub fn gs_bottleneck(x: &Tensor, weights: &[WeightBlock]) -> Result<Tensor> {
    let plan = gs_bottleneck_plan(x.c())?;
    check_weights("gs_bottleneck", &plan, weights)?;
    let half = x.c() / 2;
    let m = silu(&conv2d(x, &plan[0], &weights[0])?);
    let m = gs_conv(&m, half, 1, &weights[1..3])?;
    let m = gs_conv(&m, half, 1, &weights[3..5])?;
    let s = silu(&conv2d(x, &plan[5], &weights[5])?);
    add(&m, &s)
}

/// Plan for VoVGSCSPC: gs_bottleneck plan (6 convs) + projection branch
/// 1x1 C1 -> C1/2 + final 1x1 C1 -> c2.
pub fn vov_gscspc_plan(c1: usize, c2: usize) -> Result<Vec<ConvSpec>> {
    let mut plan = gs_bottleneck_plan(c1)?;
    plan.push(ConvSpec::new(c1, c1 / 2, 1));
    plan.push(ConvSpec::new(c1, c2, 1));
    Ok(plan)
}

pub fn vov_gscspc(x: &Tensor, c2: usize, weights: &[WeightBlock]) -> Result<Tensor> {
    let plan = vov_gscspc_plan(x.c(), c2)?;
    check_weights("vov_gscspc", &plan, weights)?;
    let a = gs_bottleneck(x, &weights[0..6])?;
    let b = silu(&conv2d(x, &plan[6], &weights[6])?);
    let cat = concat_channels(&[&a, &b])?;
    Ok(silu(&conv2d(&cat, &plan[7], &weights[7])?))
}

/// LEDH configuration for the four pyramid levels P2..P5.
#[derive(Debug, Clone)]
pub struct LedhSpec {
    pub level_channels: [usize; 4],
    pub n_c: usize,
    pub r: usize,
    /// per-group input width target; group count is c_i / divisor
    pub divisor: usize,
}

impl LedhSpec {
    pub fn new(level_channels: [usize; 4], n_c: usize) -> Self {
        LedhSpec {
            level_channels,
            n_c,
            r: 16,
            divisor: 16,
        }
    }
}

/// Group count for an LEDH level: c / divisor when divisible, otherwise the
/// largest divisor of c not exceeding c / divisor. Returns the group count
/// and whether rounding was applied.
pub fn ledh_groups(c: usize, divisor: usize) -> Result<(usize, bool)> {
    if c < divisor {
        return Err(Error::config(format!(
            "ledh level channels {c} below group divisor {divisor}"
        )));
    }
    let target = c / divisor;
    if c % divisor == 0 && c % target == 0 {
        return Ok((target, false));
    }
    let g = (1..=target).rev().find(|d| c % d == 0).unwrap_or(1);
    Ok((g, true))
}

/// Plan for one LEDH level: two shared grouped 3x3 convs, then the 4r
/// regression and n_c classification 1x1 branches (logits, no activation).
pub fn ledh_level_plan(c: usize, n_c: usize, r: usize, divisor: usize) -> Result<Vec<ConvSpec>> {
    let (g, _) = ledh_groups(c, divisor)?;
    Ok(vec![
        ConvSpec::new(c, c, 3).groups(g),
        ConvSpec::new(c, c, 3).groups(g),
        ConvSpec::new(c, 4 * r, 1),
        ConvSpec::new(c, n_c, 1),
    ])
}

/// Plan for one baseline ("plain") dense head level: two non-shared dense
/// 3x3 stacks (regression at width w_reg, classification at width w_cls)
/// followed by the 1x1 output convs.
pub fn plain_head_level_plan(
    c: usize,
    n_c: usize,
    r: usize,
    w_reg: usize,
    w_cls: usize,
) -> Result<Vec<ConvSpec>> {
    Ok(vec![
        ConvSpec::new(c, w_reg, 3),
        ConvSpec::new(w_reg, w_reg, 3),
        ConvSpec::new(w_reg, 4 * r, 1),
        ConvSpec::new(c, w_cls, 3),
        ConvSpec::new(w_cls, w_cls, 3),
        ConvSpec::new(w_cls, n_c, 1),
    ])
}

/// Output of one detection-head level: regression logits (4r channels) and
/// classification logits (n_c channels) at the level's spatial size.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub reg: Tensor,
    pub cls: Tensor,
}

impl HeadOutput {
    /// Concatenated (4r + n_c)-channel map, regression first.
    pub fn combined(&self) -> Result<Tensor> {
        concat_channels(&[&self.reg, &self.cls])
    }
}

/// Forward one LEDH level. The two grouped convs form a shared
/// transformation read by both 1x1 branches.
pub fn ledh_level_forward(
    x: &Tensor,
    n_c: usize,
    r: usize,
    divisor: usize,
    weights: &[WeightBlock],
) -> Result<HeadOutput> {
    let plan = ledh_level_plan(x.c(), n_c, r, divisor)?;
    check_weights("ledh_head", &plan, weights)?;
    let f = silu(&conv2d(x, &plan[0], &weights[0])?);
    let f = silu(&conv2d(&f, &plan[1], &weights[1])?);
    let reg = conv2d(&f, &plan[2], &weights[2])?;
    let cls = conv2d(&f, &plan[3], &weights[3])?;
    Ok(HeadOutput { reg, cls })
}

/// Forward one plain (dense, non-shared) head level.
pub fn plain_head_level_forward(
    x: &Tensor,
    n_c: usize,
    r: usize,
    w_reg: usize,
    w_cls: usize,
    weights: &[WeightBlock],
) -> Result<HeadOutput> {
    let plan = plain_head_level_plan(x.c(), n_c, r, w_reg, w_cls)?;
    check_weights("plain_head", &plan, weights)?;
    let fr = silu(&conv2d(x, &plan[0], &weights[0])?);
    let fr = silu(&conv2d(&fr, &plan[1], &weights[1])?);
    let reg = conv2d(&fr, &plan[2], &weights[2])?;
    let fc = silu(&conv2d(x, &plan[3], &weights[3])?);
    let fc = silu(&conv2d(&fc, &plan[4], &weights[4])?);
    let cls = conv2d(&fc, &plan[5], &weights[5])?;
    Ok(HeadOutput { reg, cls })
}

/// Forward the full LEDH over four pyramid levels. `features` and
/// `weights_per_level` are ordered P2..P5; spatial sizes must strictly halve.
pub fn ledh_forward(
    features: &[Tensor],
    spec: &LedhSpec,
    weights_per_level: &[Vec<WeightBlock>],
) -> Result<Vec<HeadOutput>> {
    if features.len() != 4 || weights_per_level.len() != 4 {
        return Err(Error::config(format!(
            "ledh expects exactly 4 pyramid levels, got {}",
            features.len()
        )));
    }
    for i in 1..4 {
        let (.., ph, pw) = features[i - 1].shape();
        let (.., h, w) = features[i].shape();
        if h * 2 != ph || w * 2 != pw {
            return Err(Error::config(format!(
                "pyramid level {i} spatial size ({h}x{w}) is not half of level {} ({ph}x{pw})",
                i - 1
            )));
        }
    }
    features
        .iter()
        .zip(weights_per_level)
        .enumerate()
        .map(|(i, (x, w))| {
            if x.c() != spec.level_channels[i] {
                return Err(Error::config(format!(
                    "level {i} has {} channels, spec expects {}",
                    x.c(),
                    spec.level_channels[i]
                )));
            }
            ledh_level_forward(x, spec.n_c, spec.r, spec.divisor, w)
        })
        .collect()
}

/// One decoded, scored detection.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Anchor-free decode: per cell, the four side distances are the softmax
/// expectations of r-bin regression logits scaled by the level stride; class
/// scores are sigmoids. Greedy per-class NMS follows.
pub fn decode_detections(
    head_outputs: &[HeadOutput],
    strides: &[usize],
    n_c: usize,
    r: usize,
    score_threshold: f64,
    iou_nms_threshold: f64,
) -> Result<Vec<Decoded>> {
    if head_outputs.len() != strides.len() {
        return Err(Error::config(format!(
            "{} head outputs but {} strides",
            head_outputs.len(),
            strides.len()
        )));
    }
    let mut all: Vec<Decoded> = Vec::new();
    for (out, &stride) in head_outputs.iter().zip(strides) {
        let (n, cr, h, w) = out.reg.shape();
        let (_, cc, ..) = out.cls.shape();
        if cr != 4 * r || cc != n_c {
            return Err(Error::shape(
                "decode_detections",
                format!("head channels ({cr} reg, {cc} cls) != (4r={}, n_c={n_c})", 4 * r),
            ));
        }
        if n != 1 {
            return Err(Error::shape("decode_detections", "batch size must be 1"));
        }
        let s = stride as f64;
        for cy in 0..h {
            for cx in 0..w {
                let mut dist = [0.0f64; 4];
                for (side, d) in dist.iter_mut().enumerate() {
                    let mut logits = Vec::with_capacity(r);
                    for bin in 0..r {
                        logits.push(out.reg.at(0, side * r + bin, cy, cx));
                    }
                    *d = softmax_expectation(&logits) * s;
                }
                let center_x = (cx as f64 + 0.5) * s;
                let center_y = (cy as f64 + 0.5) * s;
                let x1 = center_x - dist[0];
                let y1 = center_y - dist[1];
                let x2 = center_x + dist[2];
                let y2 = center_y + dist[3];
                for class_id in 0..n_c {
                    let score = sigmoid(out.cls.at(0, class_id, cy, cx));
                    if score >= score_threshold {
                        all.push(Decoded {
                            class_id,
                            score,
                            bbox: BBox {
                                cx: 0.5 * (x1 + x2),
                                cy: 0.5 * (y1 + y2),
                                w: (x2 - x1).max(1e-9),
                                h: (y2 - y1).max(1e-9),
                            },
                        });
                    }
                }
            }
        }
    }
    Ok(nms_per_class(all, n_c, iou_nms_threshold))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Expectation of the bin index under the softmax of `logits`.
pub fn softmax_expectation(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut e = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        let p = (v - m).exp();
        z += p;
        e += i as f64 * p;
    }
    e / z
}

/// Greedy per-class NMS: detections sorted by descending score; a detection
/// suppresses later ones of the same class with IoU strictly above the
/// threshold. Score ties keep input order (stable sort).
pub fn nms_per_class(mut dets: Vec<Decoded>, n_c: usize, iou_threshold: f64) -> Vec<Decoded> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut keep: Vec<Decoded> = Vec::new();
    for class_id in 0..n_c {
        let mut kept_boxes: Vec<BBox> = Vec::new();
        for d in dets.iter().filter(|d| d.class_id == class_id) {
            if kept_boxes
                .iter()
                .all(|k| crate::losses::iou(k, &d.bbox) <= iou_threshold)
            {
                kept_boxes.push(d.bbox);
                keep.push(d.clone());
            }
        }
    }
    keep.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    keep
}

fn check_weights(what: &'static str, plan: &[ConvSpec], weights: &[WeightBlock]) -> Result<()> {
    if weights.len() != plan.len() {
        return Err(Error::config(format!(
            "{what} expects {} weight blocks, got {}",
            plan.len(),
            weights.len()
        )));
    }
    Ok(())
}
