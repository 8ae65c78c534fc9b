//! Gaussian-mask convolution layers.
//!
//! [`StaticGmConv`] learns one sigma per layer and masks its kernel with a
//! circular mask (elliptic masks take two sigmas). [`DynamicGmConv`] predicts
//! mask parameters per input sample with a [`DynamicSigmaModule`]: pooled
//! max/avg descriptor, bottleneck `FC -> ReLU -> FC`, positivity head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{Error, Result};
use crate::mask::{GaussianMask, MaskKind};
use crate::tape::{self, PoolMode, Tape, Var};
use crate::tensor::Tensor;

/// Offset added after softplus so predicted sigmas and ratios stay away from 0.
pub const POSITIVITY_FLOOR: f64 = 0.1;

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `softplus(t) + 0.1`.
pub fn positive(t: f64) -> f64 {
    softplus(t) + POSITIVITY_FLOOR
}

/// Inverse of [`positive`]; `value` must exceed the floor.
pub fn positive_inverse(value: f64) -> Result<f64> {
    let s = value - POSITIVITY_FLOOR;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("{value} is not reachable by softplus(t) + {POSITIVITY_FLOOR}")));
    }
    // ln(e^s - 1) = s + ln(1 - e^-s)
    Ok(s + (-(-s).exp()).ln_1p())
}

/// What the dynamic sigma module predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPattern {
    /// One value used for both axes.
    Sigma,
    /// Independent `(sigma1, sigma2)`.
    SigmaPair,
    /// `sigma1` and the ratio `sigma2 / sigma1`.
    SigmaRatio,
}

impl SigmaPattern {
    pub const ALL: [SigmaPattern; 3] = [SigmaPattern::Sigma, SigmaPattern::SigmaPair, SigmaPattern::SigmaRatio];

    /// Number of raw outputs of the second fully connected stage.
    pub fn arity(self) -> usize {
        match self {
            SigmaPattern::Sigma => 1,
            SigmaPattern::SigmaPair | SigmaPattern::SigmaRatio => 2,
        }
    }

    /// Raw outputs to `(sigma1, sigma2)`.
    pub fn map(self, raw: &[f64]) -> (f64, f64) {
        match self {
            SigmaPattern::Sigma => {
                let s = positive(raw[0]);
                (s, s)
            }
            SigmaPattern::SigmaPair => (positive(raw[0]), positive(raw[1])),
            SigmaPattern::SigmaRatio => {
                let s1 = positive(raw[0]);
                (s1, s1 * positive(raw[1]))
            }
        }
    }

    /// Adjoint of [`SigmaPattern::map`] given upstream `(g1, g2)`.
    pub fn backward(self, raw: &[f64], g1: f64, g2: f64) -> Vec<f64> {
        match self {
            SigmaPattern::Sigma => vec![(g1 + g2) * sigmoid(raw[0])],
            SigmaPattern::SigmaPair => vec![g1 * sigmoid(raw[0]), g2 * sigmoid(raw[1])],
            SigmaPattern::SigmaRatio => {
                let (a, r) = (positive(raw[0]), positive(raw[1]));
                vec![(g1 + g2 * r) * sigmoid(raw[0]), g2 * a * sigmoid(raw[1])]
            }
        }
    }

    /// Raw outputs that map to `sigma1` with `sigma2 == sigma1`.
    pub fn isotropic_raw(self, sigma: f64) -> Result<Vec<f64>> {
        let t = positive_inverse(sigma)?;
        Ok(match self {
            SigmaPattern::Sigma => vec![t],
            SigmaPattern::SigmaPair => vec![t, t],
            SigmaPattern::SigmaRatio => vec![t, positive_inverse(1.0)?],
        })
    }
}

impl fmt::Display for SigmaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaPattern::Sigma => "sigma",
            SigmaPattern::SigmaPair => "sigma_pair",
            SigmaPattern::SigmaRatio => "sigma_ratio",
        })
    }
}

impl FromStr for SigmaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(SigmaPattern::Sigma),
            "sigma_pair" => Ok(SigmaPattern::SigmaPair),
            "sigma_ratio" => Ok(SigmaPattern::SigmaRatio),
            _ => Err(Error::InvalidArgument(format!("unknown sigma pattern {s:?}"))),
        }
    }
}

/// Reduction ratio `r = num / den` of the sigma module bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reduction {
    pub num: usize,
    pub den: usize,
}

impl Default for Reduction {
    fn default() -> Self {
        Self { num: 4, den: 3 }
    }
}

impl Reduction {
    /// `floor(2C / r)` in exact integer arithmetic.
    pub fn hidden_width(self, channels: usize) -> Result<usize> {
        if self.num == 0 || self.den == 0 {
            return Err(Error::InvalidArgument("reduction ratio terms must be positive".into()));
        }
        let h = 2 * channels * self.den / self.num;
        if h == 0 {
            return Err(Error::InvalidArgument(format!(
                "reduction {}/{} leaves no hidden units for {channels} channels",
                self.num, self.den
            )));
        }
        Ok(h)
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, rng).scale((2.0 / fan_in as f64).sqrt())
}

/// Kaiming-normal conv weight of shape `O x C x K x K`.
pub fn init_conv_weight<R: Rng + ?Sized>(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> Tensor {
    he_normal(&[out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, rng)
}

fn sigma_tensor(kind: MaskKind, sigma: f64) -> Tensor {
    match kind {
        MaskKind::Circular => Tensor::scalar(sigma),
        MaskKind::Elliptic => Tensor::full(&[2], sigma),
    }
}

/// Record `conv2d(x, W * M(sigma), b)` on a tape.
#[allow(clippy::too_many_arguments)]
pub fn record_static(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Var,
    sigma: Var,
    kind: MaskKind,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let masked = tape.mask_weight(weight, sigma, kind)?;
    tape.conv2d(input, masked, Some(bias), stride, padding)
}

/// Record the sigma module on a tape; returns the `N x 2` sigma pairs.
pub fn record_sigma_module(
    tape: &mut Tape,
    input: Var,
    w0: Var,
    w1: Var,
    b1: Var,
    pattern: SigmaPattern,
) -> Result<Var> {
    let mx = tape.global_pool(input, PoolMode::Max)?;
    let av = tape.global_pool(input, PoolMode::Avg)?;
    let z = tape.concat(mx, av)?;
    let h = tape.dense(z, w0, None)?;
    let h = tape.relu(h);
    let raw = tape.dense(h, w1, Some(b1))?;
    tape.sigma_head(raw, pattern)
}

/// Static layer: one learnable sigma shared by every kernel slice.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticGmConv {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Raw (unclamped) sigma: one value for circular masks, two for elliptic.
    pub sigma: Tensor,
    pub kind: MaskKind,
    pub stride: usize,
    pub padding: usize,
}

impl StaticGmConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        sigma_init: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: init_conv_weight(in_channels, out_channels, kernel, rng),
            bias: Tensor::zeros(&[out_channels]),
            sigma: sigma_tensor(MaskKind::Circular, sigma_init),
            kind: MaskKind::Circular,
            stride,
            padding,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn mask(&self) -> Result<GaussianMask> {
        let s = self.sigma.data();
        GaussianMask::new(tape::mask_params(self.kind, s[0], *s.last().unwrap_or(&s[0]), self.kernel_size()))
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.sigma.numel()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let w = t.constant(self.weight.clone());
        let b = t.constant(self.bias.clone());
        let s = t.constant(self.sigma.clone());
        let y = record_static(&mut t, x, w, b, s, self.kind, self.stride, self.padding)?;
        Ok(t.value(y).clone())
    }

    /// Bake the mask into the weights. Consumes the layer, so the sigma cannot
    /// be applied twice.
    pub fn fold(self) -> Result<FoldedConv> {
        let mask = self.mask()?;
        Ok(FoldedConv {
            weight: tape::apply_mask(&self.weight, &mask),
            bias: self.bias,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

/// A plain convolution produced by [`StaticGmConv::fold`].
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl FoldedConv {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv::conv2d(input, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

/// Pooling + two fully connected stages predicting per-sample mask parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSigmaModule {
    /// `hidden x 2C`, no bias.
    pub w0: Tensor,
    /// `arity x hidden`.
    pub w1: Tensor,
    /// `arity`.
    pub b1: Tensor,
    pub pattern: SigmaPattern,
    pub reduction: Reduction,
}

impl DynamicSigmaModule {
    /// Small uniform weights; the bias makes a zero descriptor predict
    /// `sigma1 = sigma_init` with unit aspect ratio.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        pattern: SigmaPattern,
        reduction: Reduction,
        sigma_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = reduction.hidden_width(channels)?;
        let fan0 = 2 * channels;
        Ok(Self {
            w0: Tensor::uniform(&[hidden, fan0], 1.0 / (fan0 as f64).sqrt(), rng),
            w1: Tensor::uniform(&[pattern.arity(), hidden], 1.0 / (hidden as f64).sqrt(), rng),
            b1: Tensor::new(&[pattern.arity()], pattern.isotropic_raw(sigma_init)?)?,
            pattern,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w0.shape()[1] / 2
    }

    pub fn hidden_width(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.w0.numel() + self.w1.numel() + self.b1.numel()
    }

    /// Per-sample `(sigma1, sigma2)` for an `N x C x H x W` input.
    pub fn predict_sigmas(&self, input: &Tensor) -> Result<Vec<(f64, f64)>> {
        let (_, c, _, _) = input.dims4()?;
        if c != self.channels() {
            return Err(Error::Shape(format!("sigma module built for {} channels, input has {c}", self.channels())));
        }
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let w0 = t.constant(self.w0.clone());
        let w1 = t.constant(self.w1.clone());
        let b1 = t.constant(self.b1.clone());
        let s = record_sigma_module(&mut t, x, w0, w1, b1, self.pattern)?;
        Ok(t.value(s).data().chunks(2).map(|p| (p[0], p[1])).collect())
    }
}

/// Dynamic layer: every sample gets its own mask from its own descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGmConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kind: MaskKind,
    pub stride: usize,
    pub padding: usize,
    pub sigma_module: DynamicSigmaModule,
}

impl DynamicGmConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        pattern: SigmaPattern,
        sigma_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = init_conv_weight(in_channels, out_channels, kernel, rng);
        Ok(Self {
            weight,
            bias: Tensor::zeros(&[out_channels]),
            kind: MaskKind::Elliptic,
            stride,
            padding,
            sigma_module: DynamicSigmaModule::new(in_channels, pattern, Reduction::default(), sigma_init, rng)?,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.sigma_module.num_params()
    }

    /// Batched forward through the tape op.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let w = t.constant(self.weight.clone());
        let b = t.constant(self.bias.clone());
        let m = &self.sigma_module;
        let (w0, w1, b1) = (t.constant(m.w0.clone()), t.constant(m.w1.clone()), t.constant(m.b1.clone()));
        let s = record_sigma_module(&mut t, x, w0, w1, b1, m.pattern)?;
        let y = t.dynamic_conv(x, w, Some(b), s, self.kind, self.stride, self.padding)?;
        Ok(t.value(y).clone())
    }

    /// Reference semantics: one masked kernel and one convolution per sample.
    pub fn forward_per_sample(&self, input: &Tensor) -> Result<Tensor> {
        let sigmas = self.sigma_module.predict_sigmas(input)?;
        let outs = sigmas
            .iter()
            .enumerate()
            .map(|(n, &(s1, s2))| {
                let mask = GaussianMask::new(tape::mask_params(self.kind, s1, s2, self.kernel_size()))?;
                let w = tape::apply_mask(&self.weight, &mask);
                conv::conv2d(&input.sample(n)?, &w, Some(&self.bias), self.stride, self.padding)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&outs)
    }

    /// Alternative route: one unmasked convolution per kernel tap for the whole
    /// batch, then a per-sample mask-weighted sum of the tap responses.
    pub fn forward_tap_decomposed(&self, input: &Tensor) -> Result<Tensor> {
        let sigmas = self.sigma_module.predict_sigmas(input)?;
        let (o, c, k, _) = self.weight.dims4()?;
        let masks = sigmas
            .iter()
            .map(|&(s1, s2)| GaussianMask::new(tape::mask_params(self.kind, s1, s2, k)))
            .collect::<Result<Vec<_>>>()?;
        let mut out: Option<Tensor> = None;
        for tap in 0..k * k {
            let mut wt = Tensor::zeros(&[o, c, k, k]);
            for (dst, src) in wt.data_mut().chunks_mut(k * k).zip(self.weight.data().chunks(k * k)) {
                dst[tap] = src[tap];
            }
            let resp = conv::conv2d(input, &wt, None, self.stride, self.padding)?;
            let per = resp.numel() / masks.len();
            let acc = out.get_or_insert_with(|| Tensor::zeros(resp.shape()));
            for (n, m) in masks.iter().enumerate() {
                let mv = m.values()[tap];
                let span = n * per..(n + 1) * per;
                for (a, r) in acc.data_mut()[span.clone()].iter_mut().zip(&resp.data()[span]) {
                    *a += mv * r;
                }
            }
        }
        let mut out = out.ok_or_else(|| Error::Shape("empty kernel".into()))?;
        let (_, _, h, w) = out.dims4()?;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[(i / (h * w)) % o];
        }
        Ok(out)
    }
}

/// Either GMConv layer flavor.
#[derive(Debug, Clone, PartialEq)]
pub enum GmConvLayer {
    Static(StaticGmConv),
    Dynamic(DynamicGmConv),
}

/// Fold a static layer's mask into its kernel. Dynamic masks depend on the
/// input and cannot be folded.
pub fn fold_mask(layer: GmConvLayer) -> Result<FoldedConv> {
    match layer {
        GmConvLayer::Static(s) => s.fold(),
        GmConvLayer::Dynamic(_) => {
            Err(Error::Unsupported("dynamic GMConv masks are input-dependent and cannot be folded".into()))
        }
    }
}
