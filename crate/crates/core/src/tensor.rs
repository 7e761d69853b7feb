//! Forward-only dense tensor engine.
//!
//! Tensors are rank-4 `(n, c, h, w)` arrays of `f64` in row-major order.
//! Every operation here is a pure function of its inputs; values are
//! immutable after construction and safe to share across threads.

use crate::error::{Error, Result};

/// Dense rank-4 tensor in `(batch, channel, height, width)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "Tensor::new",
                format!("all shape components must be >= 1, got ({n}, {c}, {h}, {w})"),
            ));
        }
        let want = n * c * h * w;
        if data.len() != want {
            return Err(Error::shape(
                "Tensor::new",
                format!("data length {} != n*c*h*w = {}", data.len(), want),
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Convenience constructor filling the tensor from a function of
    /// `(n, c, y, x)` indices.
    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor::zeros(n, c, h, w);
        for in_ in 0..n {
            for ic in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = f(in_, ic, y, x);
                        *t.at_mut(in_, ic, y, x) = v;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Channel slice `[start, start+len)`, copied out as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("slice [{start}, {}) out of {} channels", start + len, self.c),
            ));
        }
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(self.n * len * plane);
        for n in 0..self.n {
            let base = (n * self.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new(self.n, len, self.h, self.w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Parameters of a (possibly grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Spec with "same" padding at stride 1, no grouping, with bias.
    pub fn new(c1: usize, c2: usize, k: usize) -> Self {
        ConvSpec {
            c1,
            c2,
            k,
            stride: 1,
            padding: k / 2,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.has_bias = b;
        self
    }

    /// Depthwise spec: one k x k kernel per channel.
    pub fn depthwise(c: usize, k: usize) -> Self {
        ConvSpec::new(c, c, k).groups(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 {
            return Err(Error::config(format!(
                "channel counts must be >= 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::config(format!("kernel must be odd, got k={}", self.k)));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        if self.groups == 0 || self.c1 % self.groups != 0 || self.c2 % self.groups != 0 {
            return Err(Error::config(format!(
                "c1={} and c2={} must both be divisible by groups={}",
                self.c1, self.c2, self.groups
            )));
        }
        Ok(())
    }

    /// Number of weight scalars, excluding bias: (c1/g) * c2 * k^2.
    pub fn weight_len(&self) -> usize {
        (self.c1 / self.groups) * self.c2 * self.k * self.k
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.c2
        } else {
            0
        }
    }

    /// Closed-form output spatial size: floor((d + 2p - k)/s) + 1.
    pub fn out_dim(&self, d: usize) -> Result<usize> {
        let padded = d + 2 * self.padding;
        if padded < self.k {
            return Err(Error::shape(
                "conv2d",
                format!("input dim {d} + 2*pad {} smaller than kernel {}", self.padding, self.k),
            ));
        }
        Ok((padded - self.k) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_dim(h)?, self.out_dim(w)?))
    }
}

/// Weights of one convolution: kernel block shaped `(c2, c1/g, k, k)` plus
/// an optional bias of length `c2`, both stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub w: Vec<f64>,
    pub b: Option<Vec<f64>>,
}

impl WeightBlock {
    pub fn zeros(spec: &ConvSpec) -> Self {
        WeightBlock {
            w: vec![0.0; spec.weight_len()],
            b: if spec.has_bias {
                Some(vec![0.0; spec.c2])
            } else {
                None
            },
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, |b| b.len())
    }
}

/// Grouped cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, spec: &ConvSpec, wb: &WeightBlock) -> Result<Tensor> {
    spec.validate()?;
    let (n, c, h, w) = x.shape();
    if c != spec.c1 {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects c1={}", spec.c1),
        ));
    }
    if wb.w.len() != spec.weight_len() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight length {} != (c1/g)*c2*k^2 = {}",
                wb.w.len(),
                spec.weight_len()
            ),
        ));
    }
    if spec.has_bias {
        match &wb.b {
            Some(b) if b.len() == spec.c2 => {}
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias missing or not of length c2={}", spec.c2),
                ))
            }
        }
    }
    let (oh, ow) = spec.out_hw(h, w)?;
    let cig = spec.c1 / spec.groups; // input channels per group
    let cog = spec.c2 / spec.groups; // output channels per group
    let k = spec.k;
    let pad = spec.padding as isize;

    let mut out = Tensor::zeros(n, spec.c2, oh, ow);
    for bn in 0..n {
        for g in 0..spec.groups {
            for ocg in 0..cog {
                let oc = g * cog + ocg;
                let bias = wb.b.as_ref().map_or(0.0, |b| b[oc]);
                let wbase = oc * cig * k * k;
                for oy in 0..oh {
                    let iy0 = (oy * spec.stride) as isize - pad;
                    for ox in 0..ow {
                        let ix0 = (ox * spec.stride) as isize - pad;
                        let mut acc = bias;
                        for icg in 0..cig {
                            let ic = g * cig + icg;
                            let wrow = wbase + icg * k * k;
                            for ky in 0..k {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.at(bn, ic, iy as usize, ix as usize)
                                        * wb.w[wrow + ky * k + kx];
                                }
                            }
                        }
                        *out.at_mut(bn, oc, oy, ox) = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise convolution: one k x k kernel per channel (groups = c1 = c2).
pub fn depthwise_conv2d(x: &Tensor, k: usize, wb: &WeightBlock) -> Result<Tensor> {
    let spec = ConvSpec::depthwise(x.c(), k).bias(wb.b.is_some());
    conv2d(x, &spec, wb)
}

/// Interleaving channel permutation: output channel `j` receives input
/// channel `(j mod groups) * (c / groups) + j / groups`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "channel count {c} not divisible by groups {groups}"
        )));
    }
    let per = c / groups;
    let plane = h * w;
    let mut out = Tensor::zeros(n, c, h, w);
    for bn in 0..n {
        for j in 0..c {
            let src = (j % groups) * per + j / groups;
            let sbase = (bn * c + src) * plane;
            let dbase = (bn * c + j) * plane;
            out.data[dbase..dbase + plane].copy_from_slice(&x.data[sbase..sbase + plane]);
        }
    }
    Ok(out)
}

/// Inverse of [`channel_shuffle`] with the same group count.
pub fn channel_unshuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let c = x.c();
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "channel count {c} not divisible by groups {groups}"
        )));
    }
    // shuffle with the transposed grouping undoes the permutation
    channel_shuffle(x, c / groups)
}

/// Channel concatenation in argument order. All inputs must share (n, h, w).
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "empty input list".to_string()))?;
    let (n, _, h, w) = first.shape();
    let mut c_total = 0;
    for (i, t) in xs.iter().enumerate() {
        let (tn, tc, th, tw) = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "input {i} has (n,h,w)=({tn},{th},{tw}), expected ({n},{h},{w})"
                ),
            ));
        }
        c_total += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c_total * plane);
    for bn in 0..n {
        for t in xs {
            let tc = t.c();
            let base = bn * tc * plane;
            data.extend_from_slice(&t.data[base..base + tc * plane]);
        }
    }
    Tensor::new(n, c_total, h, w, data)
}

/// Elementwise sum; shapes must match exactly.
pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let data = x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect();
    Tensor::new(x.n, x.c, x.h, x.w, data)
}

/// Nearest-neighbor 2x upsampling: each value replicated into a 2x2 block.
pub fn upsample2x_nearest(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor::zeros(n, c, 2 * h, 2 * w);
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    *out.at_mut(bn, ch, y, xx) = x.at(bn, ch, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

#[inline]
pub fn silu_scalar(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// SiLU activation, elementwise: v * sigmoid(v).
pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Max pooling with "same"-style padding of k/2 (padding cells never win).
pub fn maxpool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(Error::config("maxpool kernel and stride must be >= 1"));
    }
    let (n, c, h, w) = x.shape();
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(n, c, oh, ow);
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            best = best.max(x.at(bn, ch, iy as usize, ix as usize));
                        }
                    }
                    *out.at_mut(bn, ch, oy, ox) = best;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(n, c, h, w, vec![1.0; n * c * h * w]).unwrap()
    }

    #[test]
    fn conv_box_filter_counts() {
        // all-ones 3x3 input, all-ones 3x3 kernel, pad 1: center 9, corners 4
        let x = ones(1, 1, 3, 3);
        let spec = ConvSpec::new(1, 1, 3).bias(false);
        let wb = WeightBlock {
            w: vec![1.0; 9],
            b: None,
        };
        let y = conv2d(&x, &spec, &wb).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_pointwise_dot() {
        let x = Tensor::new(1, 2, 1, 1, vec![1.0, 2.0]).unwrap();
        let spec = ConvSpec::new(2, 1, 1).bias(false);
        let wb = WeightBlock {
            w: vec![0.5, 0.5],
            b: None,
        };
        let y = conv2d(&x, &spec, &wb).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 1.5);
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let x = ones(1, 3, 4, 4);
        let spec = ConvSpec::new(2, 1, 1);
        let wb = WeightBlock::zeros(&spec);
        let err = conv2d(&x, &spec, &wb).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "got {err:?}");
    }

    #[test]
    fn conv_bad_groups_is_config_error() {
        let spec = ConvSpec::new(4, 6, 3).groups(4);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_identity_kernel() {
        // center-tap kernels leave the input unchanged
        let x = Tensor::from_fn(1, 2, 3, 3, |_, c, y, xx| (c * 9 + y * 3 + xx) as f64);
        let mut w = vec![0.0; 2 * 9];
        w[4] = 1.0;
        w[13] = 1.0;
        let y = depthwise_conv2d(&x, 3, &WeightBlock { w, b: None }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_box_filter_center() {
        let x = ones(1, 2, 3, 3);
        let wb = WeightBlock {
            w: vec![1.0; 18],
            b: None,
        };
        let y = depthwise_conv2d(&x, 3, &wb).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 1, 1, 1), 9.0);
    }

    #[test]
    fn shuffle_interleaves_two_groups() {
        let x = Tensor::from_fn(1, 4, 1, 1, |_, c, _, _| c as f64);
        let y = channel_shuffle(&x, 2).unwrap();
        let got: Vec<f64> = (0..4).map(|c| y.at(0, c, 0, 0)).collect();
        assert_eq!(got, vec![0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn shuffle_groups_one_is_identity() {
        let x = Tensor::from_fn(1, 6, 2, 2, |_, c, y, xx| (c + y + xx) as f64);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn shuffle_twice_groups2_on_4ch_is_identity() {
        let x = Tensor::from_fn(2, 4, 2, 3, |n, c, y, xx| (n * 100 + c * 10 + y * 3 + xx) as f64);
        let y = channel_shuffle(&channel_shuffle(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shuffle_non_divisible_is_error() {
        let x = ones(1, 5, 1, 1);
        assert!(matches!(channel_shuffle(&x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn concat_channel_arithmetic() {
        let a = ones(1, 2, 4, 4);
        let b = ones(1, 3, 4, 4);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), (1, 5, 4, 4));
        // single-input concat is the identity
        let y1 = concat_channels(&[&a]).unwrap();
        assert_eq!(y1, a);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = Tensor::from_fn(2, 2, 3, 3, |n, c, y, x| (n + c * 2 + y * 7 + x) as f64);
        let b = Tensor::from_fn(2, 3, 3, 3, |n, c, y, x| -((n + c + y + x) as f64));
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.slice_channels(0, 2).unwrap(), a);
        assert_eq!(y.slice_channels(2, 3).unwrap(), b);
    }

    #[test]
    fn concat_spatial_mismatch_is_error() {
        let a = ones(1, 2, 4, 4);
        let b = ones(1, 2, 3, 4);
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn upsample_replicates_2x2_blocks() {
        let x = Tensor::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x_nearest(&x);
        assert_eq!(y.shape(), (1, 1, 4, 4));
        for (yy, xx, want) in [
            (0, 0, 1.0),
            (0, 1, 1.0),
            (1, 1, 1.0),
            (0, 2, 2.0),
            (1, 3, 2.0),
            (2, 0, 3.0),
            (3, 1, 3.0),
            (2, 2, 4.0),
            (3, 3, 4.0),
        ] {
            assert_eq!(y.at(0, 0, yy, xx), want);
        }
    }

    #[test]
    fn silu_fixed_point_at_zero() {
        assert_eq!(silu_scalar(0.0), 0.0);
        let x = Tensor::zeros(1, 1, 2, 2);
        assert_eq!(silu(&x), x);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::from_fn(1, 2, 3, 3, |_, c, y, xx| (c + y * 3 + xx) as f64);
        let z = Tensor::zeros(1, 2, 3, 3);
        assert_eq!(add(&x, &z).unwrap(), x);
        assert!(matches!(
            add(&x, &Tensor::zeros(1, 2, 3, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn maxpool_basic() {
        let x = Tensor::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), (1, 1, 1, 1));
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        let y = maxpool(&x, 5, 1).unwrap(); // same-size pooling
        assert_eq!(y.shape(), (1, 1, 2, 2));
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }
}
