//! Declarative model specs, the GMConv conversion policy and the desk-scale
//! architectures.
//!
//! A [`ModelSpec`] is a plain value that serializes to JSON. Layers carry a
//! [`Role`] (stem, body or head); [`apply_policy`] rewrites every convolution
//! according to its role.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Reduction, SigmaPattern};
use crate::mask::MaskKind;
use crate::tape::PoolMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Stem,
    Body,
    Head,
}

/// Geometry shared by every convolution flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    fn weight_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::Config("conv stride and kernel must be positive".into()));
        }
        if self.kernel > h + 2 * self.padding || self.kernel > w + 2 * self.padding {
            return Err(Error::Config(format!(
                "kernel {} does not fit a {h}x{w} input with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shortcut {
    Identity,
    /// Subsample by `stride` and zero-pad channels to `out_channels`.
    PadChannels {
        stride: usize,
        out_channels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        #[serde(flatten)]
        shape: ConvShape,
    },
    StaticGmconv {
        #[serde(flatten)]
        shape: ConvShape,
        sigma_init: f64,
        mask: MaskKind,
    },
    DynamicGmconv {
        #[serde(flatten)]
        shape: ConvShape,
        sigma_init: f64,
        pattern: SigmaPattern,
        reduction: Reduction,
        mask: MaskKind,
    },
    Relu,
    /// Multiply by a fixed constant.
    Scale {
        factor: f64,
    },
    GlobalPool {
        mode: PoolMode,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// `branch(x) + shortcut(x)`.
    Residual {
        branch: Vec<Layer>,
        shortcut: Shortcut,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub role: Role,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(role: Role, kind: LayerKind) -> Self {
        Self { role, kind }
    }

    pub fn conv_shape(&self) -> Option<&ConvShape> {
        match &self.kind {
            LayerKind::Conv { shape }
            | LayerKind::StaticGmconv { shape, .. }
            | LayerKind::DynamicGmconv { shape, .. } => Some(shape),
            _ => None,
        }
    }
}

/// Feature shape flowing between layers (batch axis omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Check that layer shapes compose on a `input_channels x 32 x 32` input
    /// and that the spec has exactly one head classifier.
    pub fn validate(&self) -> Result<()> {
        let out = self.output_shape(32, 32)?;
        if out != FeatureShape::Flat(self.num_classes) {
            return Err(Error::Config(format!("model ends in {out:?}, expected {} class scores", self.num_classes)));
        }
        let heads =
            self.layers.iter().filter(|l| l.role == Role::Head && matches!(l.kind, LayerKind::Dense { .. })).count();
        if heads != 1 {
            return Err(Error::Config(format!("expected exactly one head classifier, found {heads}")));
        }
        if let Some(first_head) = self.layers.iter().position(|l| l.role == Role::Head) {
            if self.layers[first_head..].iter().any(|l| l.role != Role::Head) {
                return Err(Error::Config("head layers must form the tail of the model".into()));
            }
        }
        Ok(())
    }

    /// Shape after every top-level layer for an input of `height x width`.
    pub fn layer_shapes(&self, height: usize, width: usize) -> Result<Vec<FeatureShape>> {
        let mut cur = FeatureShape::Map { channels: self.input_channels, height, width };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = propagate(l, cur).map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// The same network fed `channels`-channel images.
    pub fn with_input_channels(mut self, channels: usize) -> Result<Self> {
        let first = match self.layers.first_mut().map(|l| &mut l.kind) {
            Some(LayerKind::Conv { shape })
            | Some(LayerKind::StaticGmconv { shape, .. })
            | Some(LayerKind::DynamicGmconv { shape, .. }) => shape,
            _ => return Err(Error::Config("first layer is not a convolution".into())),
        };
        first.in_channels = channels;
        self.input_channels = channels;
        self.validate()?;
        Ok(self)
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Result<FeatureShape> {
        Ok(self.layer_shapes(height, width)?.last().copied().unwrap_or(FeatureShape::Map {
            channels: self.input_channels,
            height,
            width,
        }))
    }

    /// Every layer in traversal order (residual branches expanded in place).
    pub fn flat_layers(&self) -> Vec<&Layer> {
        fn walk<'a>(ls: &'a [Layer], out: &mut Vec<&'a Layer>) {
            for l in ls {
                out.push(l);
                if let LayerKind::Residual { branch, .. } = &l.kind {
                    walk(branch, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.flat_layers().into_iter().filter(|l| pred(&l.kind)).count()
    }
}

fn propagate(layer: &Layer, cur: FeatureShape) -> Result<FeatureShape> {
    match (&layer.kind, cur) {
        (LayerKind::Relu | LayerKind::Scale { .. }, s) => Ok(s),
        (
            LayerKind::Conv { shape } | LayerKind::StaticGmconv { shape, .. } | LayerKind::DynamicGmconv { shape, .. },
            FeatureShape::Map { channels, height, width },
        ) => {
            if shape.in_channels != channels {
                return Err(Error::Config(format!(
                    "conv expects {} input channels, got {channels}",
                    shape.in_channels
                )));
            }
            if shape.in_channels == 0 || shape.out_channels == 0 {
                return Err(Error::Config("conv channel counts must be positive".into()));
            }
            let (h, w) = shape.out_hw(height, width)?;
            Ok(FeatureShape::Map { channels: shape.out_channels, height: h, width: w })
        }
        (LayerKind::GlobalPool { .. }, FeatureShape::Map { channels, .. }) => Ok(FeatureShape::Flat(channels)),
        (LayerKind::Dense { in_features, out_features }, FeatureShape::Flat(f)) => {
            if *in_features != f {
                return Err(Error::Config(format!("dense expects {in_features} features, got {f}")));
            }
            Ok(FeatureShape::Flat(*out_features))
        }
        (LayerKind::Residual { branch, shortcut }, FeatureShape::Map { channels, height, width }) => {
            let mut b = cur;
            for l in branch {
                b = propagate(l, b)?;
            }
            let s = match *shortcut {
                Shortcut::Identity => cur,
                Shortcut::PadChannels { stride, out_channels } => {
                    if stride == 0 || out_channels < channels {
                        return Err(Error::Config("invalid padded shortcut".into()));
                    }
                    FeatureShape::Map {
                        channels: out_channels,
                        height: height.div_ceil(stride),
                        width: width.div_ceil(stride),
                    }
                }
            };
            if b != s {
                return Err(Error::Config(format!("residual branch {b:?} != shortcut {s:?}")));
            }
            Ok(b)
        }
        (kind, shape) => Err(Error::Config(format!("{kind:?} cannot consume {shape:?}"))),
    }
}

/// Which convolution flavor a policy assigns to a role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Std,
    Static,
    Dynamic,
}

impl FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(ConvMode::Std),
            "static" => Ok(ConvMode::Static),
            "dynamic" => Ok(ConvMode::Dynamic),
            _ => Err(Error::Config(format!("unknown conv mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvPolicy {
    pub stem: ConvMode,
    pub body: ConvMode,
    pub sigma_init: f64,
    pub pattern: SigmaPattern,
    pub reduction: Reduction,
    pub static_mask: MaskKind,
    pub dynamic_mask: MaskKind,
}

impl Default for ConvPolicy {
    /// Dynamic stem, static body, sigma 5, `(sigma1, ratio)` prediction.
    fn default() -> Self {
        Self {
            stem: ConvMode::Dynamic,
            body: ConvMode::Static,
            sigma_init: 5.0,
            pattern: SigmaPattern::SigmaRatio,
            reduction: Reduction::default(),
            static_mask: MaskKind::Circular,
            dynamic_mask: MaskKind::Elliptic,
        }
    }
}

impl ConvPolicy {
    pub fn uniform(stem: ConvMode, body: ConvMode) -> Self {
        Self { stem, body, ..Self::default() }
    }

    pub fn standard() -> Self {
        Self::uniform(ConvMode::Std, ConvMode::Std)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_init > 0.0) || !self.sigma_init.is_finite() {
            return Err(Error::Config(format!("sigma_init must be positive, got {}", self.sigma_init)));
        }
        Ok(())
    }

    fn convert(&self, mode: ConvMode, shape: ConvShape) -> Result<LayerKind> {
        Ok(match mode {
            ConvMode::Std => LayerKind::Conv { shape },
            ConvMode::Static => LayerKind::StaticGmconv { shape, sigma_init: self.sigma_init, mask: self.static_mask },
            ConvMode::Dynamic => {
                if shape.in_channels == 0 {
                    return Err(Error::Config("dynamic GMConv needs at least one input channel".into()));
                }
                self.reduction.hidden_width(shape.in_channels).map_err(|e| Error::Config(e.to_string()))?;
                LayerKind::DynamicGmconv {
                    shape,
                    sigma_init: self.sigma_init,
                    pattern: self.pattern,
                    reduction: self.reduction,
                    mask: self.dynamic_mask,
                }
            }
        })
    }
}

/// Rewrite stem and body convolutions per `policy`; head layers are untouched.
pub fn apply_policy(spec: &ModelSpec, policy: &ConvPolicy) -> Result<ModelSpec> {
    policy.validate()?;
    fn rewrite(layers: &[Layer], policy: &ConvPolicy) -> Result<Vec<Layer>> {
        layers
            .iter()
            .map(|l| {
                let kind = match (&l.kind, l.role) {
                    (LayerKind::Residual { branch, shortcut }, _) => {
                        LayerKind::Residual { branch: rewrite(branch, policy)?, shortcut: shortcut.clone() }
                    }
                    (_, Role::Head) => l.kind.clone(),
                    (_, role) => match l.conv_shape() {
                        Some(&shape) => {
                            let mode = if role == Role::Stem { policy.stem } else { policy.body };
                            policy.convert(mode, shape)?
                        }
                        None => l.kind.clone(),
                    },
                };
                Ok(Layer::new(l.role, kind))
            })
            .collect()
    }
    Ok(ModelSpec { layers: rewrite(&spec.layers, policy)?, ..spec.clone() })
}

/// Architectures available through [`build_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "resnet20-slim")]
    Resnet20Slim,
    #[serde(rename = "cnn-small")]
    CnnSmall,
    #[serde(rename = "alexnet-lite")]
    AlexnetLite,
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet20-slim" => Ok(ModelName::Resnet20Slim),
            "cnn-small" => Ok(ModelName::CnnSmall),
            "alexnet-lite" => Ok(ModelName::AlexnetLite),
            _ => Err(Error::Config(format!("unknown model {s:?} (expected resnet20-slim, cnn-small or alexnet-lite)"))),
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelName::Resnet20Slim => "resnet20-slim",
            ModelName::CnnSmall => "cnn-small",
            ModelName::AlexnetLite => "alexnet-lite",
        })
    }
}

fn conv(role: Role, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::new(role, LayerKind::Conv { shape: ConvShape { in_channels, out_channels, kernel, stride, padding } })
}

fn relu(role: Role) -> Layer {
    Layer::new(role, LayerKind::Relu)
}

fn head(features: usize, num_classes: usize) -> [Layer; 2] {
    [
        Layer::new(Role::Head, LayerKind::GlobalPool { mode: PoolMode::Avg }),
        Layer::new(Role::Head, LayerKind::Dense { in_features: features, out_features: num_classes }),
    ]
}

pub fn build_model(name: &str, num_classes: usize) -> Result<ModelSpec> {
    build_named(name.parse()?, num_classes, 1.0)
}

/// Build with a width multiplier (only affects `resnet20-slim`).
pub fn build_named(name: ModelName, num_classes: usize, width: f64) -> Result<ModelSpec> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let spec = match name {
        ModelName::Resnet20Slim => resnet20_slim(num_classes, width)?,
        ModelName::CnnSmall => cnn_small(num_classes),
        ModelName::AlexnetLite => alexnet_lite(num_classes),
    };
    spec.validate()?;
    Ok(spec)
}

/// Residual branches are scaled by `1/sqrt(blocks)` in place of batch
/// normalization.
pub const RESNET20_BLOCKS: usize = 9;

/// CIFAR ResNet-20: a 3x3 stem, three stages of three basic blocks, and
/// parameter-free padded shortcuts.
pub fn resnet20_slim(num_classes: usize, width: f64) -> Result<ModelSpec> {
    if !(width > 0.0) {
        return Err(Error::Config(format!("width multiplier must be positive, got {width}")));
    }
    let widths: Vec<usize> = [16.0, 32.0, 64.0].iter().map(|w| ((w * width).round() as usize).max(1)).collect();
    let branch_scale = 1.0 / (RESNET20_BLOCKS as f64).sqrt();
    let mut layers = vec![conv(Role::Stem, 3, widths[0], 3, 1, 1), relu(Role::Stem)];
    let mut in_ch = widths[0];
    for (stage, &out_ch) in widths.iter().enumerate() {
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let branch = vec![
                conv(Role::Body, in_ch, out_ch, 3, stride, 1),
                relu(Role::Body),
                conv(Role::Body, out_ch, out_ch, 3, 1, 1),
                Layer::new(Role::Body, LayerKind::Scale { factor: branch_scale }),
            ];
            let shortcut = if stride == 1 && in_ch == out_ch {
                Shortcut::Identity
            } else {
                Shortcut::PadChannels { stride, out_channels: out_ch }
            };
            layers.push(Layer::new(Role::Body, LayerKind::Residual { branch, shortcut }));
            layers.push(relu(Role::Body));
            in_ch = out_ch;
        }
    }
    layers.extend(head(in_ch, num_classes));
    Ok(ModelSpec { name: ModelName::Resnet20Slim.to_string(), input_channels: 3, num_classes, layers })
}

/// Four-conv plain network.
pub fn cnn_small(num_classes: usize) -> ModelSpec {
    let mut layers = vec![
        conv(Role::Stem, 3, 16, 3, 1, 1),
        relu(Role::Stem),
        conv(Role::Body, 16, 32, 3, 2, 1),
        relu(Role::Body),
        conv(Role::Body, 32, 32, 3, 1, 1),
        relu(Role::Body),
        conv(Role::Body, 32, 64, 3, 2, 1),
        relu(Role::Body),
    ];
    layers.extend(head(64, num_classes));
    ModelSpec { name: ModelName::CnnSmall.to_string(), input_channels: 3, num_classes, layers }
}

/// Large-kernel network: an 11x11 stem and a 5x5 body conv.
pub fn alexnet_lite(num_classes: usize) -> ModelSpec {
    let mut layers = vec![
        conv(Role::Stem, 3, 32, 11, 2, 5),
        relu(Role::Stem),
        conv(Role::Body, 32, 64, 5, 2, 2),
        relu(Role::Body),
        conv(Role::Body, 64, 64, 3, 1, 1),
        relu(Role::Body),
    ];
    layers.extend(head(64, num_classes));
    ModelSpec { name: ModelName::AlexnetLite.to_string(), input_channels: 3, num_classes, layers }
}

/// Exact number of learnable scalars.
pub fn count_params(spec: &ModelSpec) -> usize {
    spec.flat_layers()
        .into_iter()
        .map(|l| match &l.kind {
            LayerKind::Conv { shape } => shape.weight_params() + shape.out_channels,
            LayerKind::StaticGmconv { shape, mask, .. } => {
                shape.weight_params() + shape.out_channels + static_sigma_count(*mask)
            }
            LayerKind::DynamicGmconv { shape, pattern, reduction, .. } => {
                let hidden = reduction.hidden_width(shape.in_channels).unwrap_or(0);
                shape.weight_params()
                    + shape.out_channels
                    + hidden * 2 * shape.in_channels
                    + pattern.arity() * hidden
                    + pattern.arity()
            }
            LayerKind::Dense { in_features, out_features } => in_features * out_features + out_features,
            _ => 0,
        })
        .sum()
}

pub(crate) fn static_sigma_count(mask: MaskKind) -> usize {
    match mask {
        MaskKind::Circular => 1,
        MaskKind::Elliptic => 2,
    }
}

/// Multiply-accumulates of one forward pass over a `height x width` input.
/// Static masks are counted as folded; dynamic layers add their sigma module.
pub fn count_macs(spec: &ModelSpec, height: usize, width: usize) -> Result<u64> {
    fn walk(layers: &[Layer], mut cur: FeatureShape) -> Result<(u64, FeatureShape)> {
        let mut total = 0u64;
        for l in layers {
            let next = propagate(l, cur)?;
            total += match (&l.kind, next) {
                (
                    LayerKind::Conv { shape } | LayerKind::StaticGmconv { shape, .. },
                    FeatureShape::Map { height, width, .. },
                ) => (shape.weight_params() * height * width) as u64,
                (
                    LayerKind::DynamicGmconv { shape, pattern, reduction, .. },
                    FeatureShape::Map { height, width, .. },
                ) => {
                    let hidden = reduction.hidden_width(shape.in_channels)?;
                    (shape.weight_params() * height * width + 2 * shape.in_channels * hidden + hidden * pattern.arity())
                        as u64
                }
                (LayerKind::Dense { in_features, out_features }, _) => (in_features * out_features) as u64,
                (LayerKind::Residual { branch, .. }, _) => walk(branch, cur)?.0,
                _ => 0,
            };
            cur = next;
        }
        Ok((total, cur))
    }
    let start = FeatureShape::Map { channels: spec.input_channels, height, width };
    Ok(walk(&spec.layers, start)?.0)
}

/// Floating-point operations, counted as two per multiply-accumulate.
pub fn count_flops(spec: &ModelSpec, height: usize, width: usize) -> Result<u64> {
    Ok(2 * count_macs(spec, height, width)?)
}
