//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use gmconv_core::Tensor;

/// Circular mask by direct evaluation of the normalized 1-D Gaussian of the
/// distance to the kernel center, then division by the grid maximum.
pub fn literal_circular(sigma: f64, k: usize) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let f = |d: f64| (1.0 / ((2.0 * PI).sqrt() * sigma)) * (-(d * d) / (2.0 * sigma * sigma)).exp();
    let raw: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - c, (i % k) as f64 - c);
            f((x * x + y * y).sqrt())
        })
        .collect();
    let max = raw.iter().copied().fold(f64::MIN, f64::max);
    raw.iter().map(|v| v / max).collect()
}

/// Elliptic mask from the full 2-D density; `sigma1` acts on the column
/// offset, `sigma2` on the row offset.
pub fn literal_elliptic(sigma1: f64, sigma2: f64, k: usize) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let f = |x: f64, y: f64| {
        (1.0 / (2.0 * PI * sigma1 * sigma2)) * (-0.5 * (x * x / (sigma1 * sigma1) + y * y / (sigma2 * sigma2))).exp()
    };
    let raw: Vec<f64> = (0..k * k).map(|i| f((i % k) as f64 - c, (i / k) as f64 - c)).collect();
    let max = raw.iter().copied().fold(f64::MIN, f64::max);
    raw.iter().map(|v| v / max).collect()
}

/// Relative error with an absolute floor, so two near-zero derivatives that
/// differ only by finite-difference noise are not reported as mismatches.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to coordinate `i` of `x`.
pub fn central_diff(x: &Tensor, i: usize, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Up to `n` coordinates spread evenly over `len`.
pub fn probe_indices(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|j| j * (len - 1) / (n - 1)).collect()
}

/// 2-D full convolution of two square grids.
pub fn convolve_full(a: &[f64], ka: usize, b: &[f64], kb: usize) -> (Vec<f64>, usize) {
    let k = ka + kb - 1;
    let mut out = vec![0.0; k * k];
    for (i, av) in a.iter().enumerate() {
        for (j, bv) in b.iter().enumerate() {
            let (r, c) = (i / ka + j / kb, i % ka + j % kb);
            out[r * k + c] += av * bv;
        }
    }
    (out, k)
}

/// Standard-normal batch from a fixed seed.
pub fn noise(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    Tensor::randn(shape, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

use gmconv_core::layers::{Reduction, SigmaPattern};
use gmconv_core::mask::MaskKind;
use gmconv_core::model::{Model, ParamGroup};
use gmconv_core::tape::{PoolMode, Tape};
use gmconv_core::zoo::{ConvShape, Layer, LayerKind, ModelSpec, Role};

fn shape(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvShape {
    ConvShape { in_channels, out_channels, kernel, stride, padding }
}

/// Small network holding one layer of every parametrized kind: a dynamic
/// stem, circular and elliptic static layers, a plain conv and a classifier.
pub fn gradient_spec(pattern: SigmaPattern) -> ModelSpec {
    let layers = vec![
        Layer::new(
            Role::Stem,
            LayerKind::DynamicGmconv {
                shape: shape(2, 3, 3, 1, 1),
                sigma_init: 1.2,
                pattern,
                reduction: Reduction::default(),
                mask: MaskKind::Elliptic,
            },
        ),
        Layer::new(Role::Stem, LayerKind::Relu),
        Layer::new(
            Role::Body,
            LayerKind::StaticGmconv { shape: shape(3, 4, 3, 2, 1), sigma_init: 0.9, mask: MaskKind::Circular },
        ),
        Layer::new(
            Role::Body,
            LayerKind::StaticGmconv { shape: shape(4, 4, 5, 1, 2), sigma_init: 1.7, mask: MaskKind::Elliptic },
        ),
        Layer::new(Role::Body, LayerKind::Relu),
        Layer::new(Role::Body, LayerKind::Conv { shape: shape(4, 4, 3, 1, 1) }),
        Layer::new(Role::Head, LayerKind::GlobalPool { mode: PoolMode::Avg }),
        Layer::new(Role::Head, LayerKind::Dense { in_features: 4, out_features: 3 }),
    ];
    ModelSpec { name: format!("gradcheck-{pattern}"), input_channels: 2, num_classes: 3, layers }
}

pub fn loss_of(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &bound, xv, None).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    tape.value(loss).data()[0]
}

/// Worst relative error per parameter tensor between tape gradients and
/// central differences on up to `probes` coordinates of each tensor.
pub fn gradient_errors(model: &Model, x: &Tensor, labels: &[usize], probes: usize) -> Vec<(String, ParamGroup, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &bound, xv, None).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let h = 1e-6;
    model
        .params()
        .iter()
        .zip(&bound.vars)
        .enumerate()
        .map(|(pi, (p, v))| {
            let g = grads.get(*v).expect("every parameter receives a gradient");
            let worst = probe_indices(p.value.numel(), probes)
                .into_iter()
                .map(|i| {
                    let numeric = central_diff(&p.value, i, h, |t| {
                        let mut m = model.clone();
                        m.params_mut()[pi].value = t.clone();
                        loss_of(&m, x, labels)
                    });
                    rel_err(g.data()[i], numeric)
                })
                .fold(0.0, f64::max);
            (p.name.clone(), p.group, worst)
        })
        .collect()
}

/// Push every mask of `model` to the flat upper-clamp limit: static sigmas to
/// a value beyond the clamp, and dynamic modules to a constant huge prediction.
pub fn force_flat(model: &mut Model) {
    for p in model.params_mut() {
        match p.group {
            ParamGroup::Sigma => p.value.data_mut().iter_mut().for_each(|s| *s = 2e6),
            ParamGroup::SigmaModule if p.name.ends_with("b1") => p.value.data_mut().iter_mut().for_each(|s| *s = 2e6),
            ParamGroup::SigmaModule => p.value.data_mut().iter_mut().for_each(|s| *s = 0.0),
            _ => {}
        }
    }
}
