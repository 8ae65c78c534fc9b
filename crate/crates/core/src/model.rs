//! Runtime models: a [`ModelSpec`] plus its parameter tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, DynamicSigmaModule, StaticGmConv};
use crate::mask::{GaussianMask, MaskKind};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;
use crate::zoo::{self, apply_policy, ConvPolicy, Layer, LayerKind, ModelSpec, Shortcut};

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Conv and dense weights; the only group under weight decay.
    Weight,
    Bias,
    /// Static mask sigma.
    Sigma,
    /// Dynamic sigma module weights and bias.
    SigmaModule,
}

impl ParamGroup {
    pub fn decays(self) -> bool {
        self == ParamGroup::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Parameters of one model on a tape.
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Report of the static mask state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GmLayerInfo {
    /// Index in [`ModelSpec::flat_layers`] order.
    pub flat_index: usize,
    pub name: String,
    pub kind: GmLayerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GmLayerKind {
    Static {
        sigma: Vec<f64>,
        mask: GaussianMask,
    },
    /// Mask at the prediction for a zero descriptor (bias-only).
    Dynamic {
        baseline: (f64, f64),
        mask: GaussianMask,
        module_norm: f64,
    },
}

impl Model {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        init_layers(&spec.layers, "", &mut rng, &mut params)?;
        Ok(Self { spec, params })
    }

    /// Rebuild from stored tensors in [`Model::params`] order.
    pub fn from_parts(spec: ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(spec.clone(), 0)?;
        if template.params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model expects {} tensors, got {}",
                template.params.len(),
                tensors.len()
            )));
        }
        let params = template
            .params
            .into_iter()
            .zip(tensors)
            .map(|(p, (name, value))| {
                if p.name != name || p.value.shape() != value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} {:?} does not match expected {} {:?}",
                        value.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                Ok(Param { value, ..p })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same architecture rewritten by `policy`. Parameters with matching name
    /// and shape are carried over; new ones (sigmas, sigma modules) are drawn
    /// from `seed`.
    pub fn convert(&self, policy: &ConvPolicy, seed: u64) -> Result<Model> {
        let mut out = Model::new(apply_policy(&self.spec, policy)?, seed)?;
        for p in &mut out.params {
            if let Some(src) = self.param(&p.name) {
                if src.value.shape() == p.value.shape() && src.group == p.group {
                    p.value = src.value.clone();
                }
            }
        }
        Ok(out)
    }

    /// Put every parameter on the tape, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.variable(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Record the forward pass. With `stop_after = Some(i)` the output of
    /// top-level layer `i` is returned instead of the logits.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var, stop_after: Option<usize>) -> Result<Var> {
        let mut cursor = Cursor { vars: &bound.vars, next: 0 };
        let mut x = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = record_layer(tape, layer, x, &mut cursor)?;
            if stop_after == Some(i) {
                return Ok(x);
            }
        }
        if let Some(i) = stop_after {
            return Err(Error::InvalidArgument(format!(
                "layer index {i} out of range for {} layers",
                self.spec.layers.len()
            )));
        }
        Ok(x)
    }

    /// Logits for a batch, without recording gradients.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &bound, x, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        self.logits(input)?.argmax_rows()
    }

    /// Raw sigma of every static GMConv layer in traversal order.
    pub fn static_sigmas(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .filter(|p| p.group == ParamGroup::Sigma)
            .map(|p| (p.name.clone(), p.value.data()[0]))
            .collect()
    }

    /// Replace every static GMConv layer by a plain convolution whose weight is
    /// the masked kernel. Dynamic layers are left in place.
    pub fn fold(&self) -> Result<Model> {
        let mut spec = self.spec.clone();
        let mut params = Vec::with_capacity(self.params.len());
        let mut src = self.params.iter();
        fold_layers(&mut spec.layers, &mut src, &mut params)?;
        Ok(Model { spec, params })
    }

    /// Mask state of every GMConv layer.
    pub fn gm_layers(&self) -> Result<Vec<GmLayerInfo>> {
        let flat = self.spec.flat_layers();
        let mut out = Vec::new();
        let mut pi = 0;
        for (idx, layer) in flat.iter().enumerate() {
            let prefix = self.params.get(pi).map(|p| p.name.rsplit_once('.').map_or("", |(a, _)| a).to_string());
            match &layer.kind {
                LayerKind::Conv { .. } => pi += 2,
                LayerKind::Dense { .. } => pi += 2,
                LayerKind::StaticGmconv { shape, mask, .. } => {
                    let sigma = self.params[pi + 2].value.data().to_vec();
                    let s2 = *sigma.last().unwrap_or(&sigma[0]);
                    let m = GaussianMask::new(tape::mask_params(*mask, sigma[0], s2, shape.kernel))?;
                    out.push(GmLayerInfo {
                        flat_index: idx,
                        name: prefix.unwrap_or_default(),
                        kind: GmLayerKind::Static { sigma, mask: m },
                    });
                    pi += 3;
                }
                LayerKind::DynamicGmconv { shape, pattern, mask, .. } => {
                    let b1 = &self.params[pi + 4].value;
                    let (s1, s2) = pattern.map(b1.data());
                    let m = GaussianMask::new(tape::mask_params(*mask, s1, s2, shape.kernel))?;
                    let module_norm = self.params[pi + 2..pi + 5]
                        .iter()
                        .flat_map(|p| p.value.data())
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    out.push(GmLayerInfo {
                        flat_index: idx,
                        name: prefix.unwrap_or_default(),
                        kind: GmLayerKind::Dynamic { baseline: (s1, s2), mask: m, module_norm },
                    });
                    pi += 5;
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn push(params: &mut Vec<Param>, prefix: &str, leaf: &str, value: Tensor, group: ParamGroup) {
    params.push(Param { name: format!("{prefix}{leaf}"), value, group });
}

fn init_layers(layers: &[Layer], prefix: &str, rng: &mut ChaCha8Rng, params: &mut Vec<Param>) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        let p = format!("{prefix}{i}.");
        match &layer.kind {
            LayerKind::Conv { shape } => {
                let w = layers::init_conv_weight(shape.in_channels, shape.out_channels, shape.kernel, rng);
                push(params, &p, "weight", w, ParamGroup::Weight);
                push(params, &p, "bias", Tensor::zeros(&[shape.out_channels]), ParamGroup::Bias);
            }
            LayerKind::StaticGmconv { shape, sigma_init, mask } => {
                let mut l = StaticGmConv::new(
                    shape.in_channels,
                    shape.out_channels,
                    shape.kernel,
                    shape.stride,
                    shape.padding,
                    *sigma_init,
                    rng,
                );
                if *mask == MaskKind::Elliptic {
                    l.sigma = Tensor::full(&[zoo::static_sigma_count(*mask)], *sigma_init);
                }
                push(params, &p, "weight", l.weight, ParamGroup::Weight);
                push(params, &p, "bias", l.bias, ParamGroup::Bias);
                push(params, &p, "sigma", l.sigma, ParamGroup::Sigma);
            }
            LayerKind::DynamicGmconv { shape, sigma_init, pattern, reduction, .. } => {
                let w = layers::init_conv_weight(shape.in_channels, shape.out_channels, shape.kernel, rng);
                push(params, &p, "weight", w, ParamGroup::Weight);
                push(params, &p, "bias", Tensor::zeros(&[shape.out_channels]), ParamGroup::Bias);
                let m = DynamicSigmaModule::new(shape.in_channels, *pattern, *reduction, *sigma_init, rng)?;
                push(params, &p, "sigma_module.w0", m.w0, ParamGroup::SigmaModule);
                push(params, &p, "sigma_module.w1", m.w1, ParamGroup::SigmaModule);
                push(params, &p, "sigma_module.b1", m.b1, ParamGroup::SigmaModule);
            }
            LayerKind::Dense { in_features, out_features } => {
                let bound = 1.0 / (*in_features as f64).sqrt();
                push(
                    params,
                    &p,
                    "weight",
                    Tensor::uniform(&[*out_features, *in_features], bound, rng),
                    ParamGroup::Weight,
                );
                push(params, &p, "bias", Tensor::zeros(&[*out_features]), ParamGroup::Bias);
            }
            LayerKind::Residual { branch, .. } => init_layers(branch, &format!("{p}branch."), rng, params)?,
            LayerKind::Relu | LayerKind::Scale { .. } | LayerKind::GlobalPool { .. } => {}
        }
    }
    Ok(())
}

fn record_layer(tape: &mut Tape, layer: &Layer, x: Var, cur: &mut Cursor<'_>) -> Result<Var> {
    match &layer.kind {
        LayerKind::Conv { shape } => {
            let (w, b) = (cur.take(), cur.take());
            tape.conv2d(x, w, Some(b), shape.stride, shape.padding)
        }
        LayerKind::StaticGmconv { shape, mask, .. } => {
            let (w, b, s) = (cur.take(), cur.take(), cur.take());
            layers::record_static(tape, x, w, b, s, *mask, shape.stride, shape.padding)
        }
        LayerKind::DynamicGmconv { shape, pattern, mask, .. } => {
            let (w, b) = (cur.take(), cur.take());
            let (w0, w1, b1) = (cur.take(), cur.take(), cur.take());
            let sigmas = layers::record_sigma_module(tape, x, w0, w1, b1, *pattern)?;
            tape.dynamic_conv(x, w, Some(b), sigmas, *mask, shape.stride, shape.padding)
        }
        LayerKind::Relu => Ok(tape.relu(x)),
        LayerKind::Scale { factor } => Ok(tape.scale(x, *factor)),
        LayerKind::GlobalPool { mode } => tape.global_pool(x, *mode),
        LayerKind::Dense { .. } => {
            let (w, b) = (cur.take(), cur.take());
            tape.dense(x, w, Some(b))
        }
        LayerKind::Residual { branch, shortcut } => {
            let mut y = x;
            for l in branch {
                y = record_layer(tape, l, y, cur)?;
            }
            let s = match *shortcut {
                Shortcut::Identity => x,
                Shortcut::PadChannels { stride, out_channels } => tape.shortcut_pad(x, stride, out_channels)?,
            };
            tape.add(y, s)
        }
    }
}

fn next_param<'a>(src: &mut impl Iterator<Item = &'a Param>) -> Result<Param> {
    src.next().cloned().ok_or_else(|| Error::Checkpoint("parameter list too short".into()))
}

fn fold_layers<'a>(
    layers: &mut [Layer],
    src: &mut impl Iterator<Item = &'a Param>,
    out: &mut Vec<Param>,
) -> Result<()> {
    for layer in layers.iter_mut() {
        match &mut layer.kind {
            LayerKind::StaticGmconv { shape, mask, .. } => {
                let (w, b, s) = (next_param(src)?, next_param(src)?, next_param(src)?);
                let kernel = StaticGmConv {
                    weight: w.value,
                    bias: b.value,
                    sigma: s.value,
                    kind: *mask,
                    stride: shape.stride,
                    padding: shape.padding,
                };
                let folded = kernel.fold()?;
                out.push(Param { value: folded.weight, ..w });
                out.push(Param { value: folded.bias, ..b });
                layer.kind = LayerKind::Conv { shape: *shape };
            }
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                out.push(next_param(src)?);
                out.push(next_param(src)?);
            }
            LayerKind::DynamicGmconv { .. } => {
                for _ in 0..5 {
                    out.push(next_param(src)?);
                }
            }
            LayerKind::Residual { branch, .. } => fold_layers(branch, src, out)?,
            LayerKind::Relu | LayerKind::Scale { .. } | LayerKind::GlobalPool { .. } => {}
        }
    }
    Ok(())
}
