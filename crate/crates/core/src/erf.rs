//! Effective receptive field probing and mask export.
//!
//! The ERF of a layer is estimated by seeding an adjoint of 1 at the spatially
//! central unit of that layer's output (all channels), backpropagating to the
//! input and averaging `|dy/dx|` (summed over input channels) across random
//! inputs. The averaged map is divided by its maximum.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{grid_to_csv, grid_to_pgm};
use crate::model::{GmLayerKind, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::zoo::{Layer, LayerKind, ModelSpec, Shortcut};

/// Samples propagated per tape.
const CHUNK: usize = 16;

/// Probe inputs.
#[derive(Debug, Clone)]
pub enum ErfInput {
    /// Unit-Gaussian noise images of the given spatial size.
    Noise { height: usize, width: usize, seed: u64 },
    /// Explicit `N x C x H x W` images; `num_samples` takes the first ones.
    Images(Tensor),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, max-normalized.
    pub values: Vec<f64>,
    pub model: String,
    pub layer: usize,
    pub samples: usize,
}

impl ErfMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn to_csv(&self) -> String {
        grid_to_csv(&self.values, self.width)
    }

    pub fn to_pgm(&self) -> String {
        grid_to_pgm(&self.values, self.width, self.height)
    }

    /// Write `erf.csv`, `erf.pgm` and `erf.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("erf.csv", self.to_csv())?;
        write("erf.pgm", self.to_pgm())?;
        let meta = serde_json::json!({
            "model": self.model,
            "layer": self.layer,
            "samples": self.samples,
            "height": self.height,
            "width": self.width,
            "radius": erf_radius(self)?,
        });
        write("erf.json", serde_json::to_string_pretty(&meta)?)
    }
}

pub fn estimate_erf(model: &Model, layer: usize, num_samples: usize, source: &ErfInput) -> Result<ErfMap> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("ERF needs at least one sample".into()));
    }
    let c = model.spec().input_channels;
    let (h, w, mut next_batch): (usize, usize, Box<dyn FnMut(usize, usize) -> Result<Tensor>>) = match source {
        ErfInput::Noise { height, width, seed } => {
            let (height, width) = (*height, *width);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (height, width, Box::new(move |_, n| Ok(Tensor::randn(&[n, c, height, width], &mut rng))))
        }
        ErfInput::Images(images) => {
            let (n, ic, height, width) = images.dims4()?;
            if ic != c {
                return Err(Error::Shape(format!("probe images have {ic} channels, model expects {c}")));
            }
            if n < num_samples {
                return Err(Error::InvalidArgument(format!("{num_samples} samples requested, {n} images given")));
            }
            let images = images.clone();
            let per = c * height * width;
            (
                height,
                width,
                Box::new(move |start, n| {
                    Tensor::new(&[n, c, height, width], images.data()[start * per..(start + n) * per].to_vec())
                }),
            )
        }
    };
    let mut acc = vec![0.0; h * w];
    let mut start = 0;
    while start < num_samples {
        let n = CHUNK.min(num_samples - start);
        let batch = next_batch(start, n)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.variable(batch);
        let y = model.forward(&mut tape, &bound, x, Some(layer))?;
        let (yn, yc, yh, yw) = match *tape.value(y).shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::InvalidArgument(format!("layer {layer} output {s:?} has no spatial extent"))),
        };
        let mut seed = Tensor::zeros(&[yn, yc, yh, yw]);
        let (cy, cx) = (yh / 2, yw / 2);
        for b in 0..yn {
            for ch in 0..yc {
                seed.data_mut()[((b * yc + ch) * yh + cy) * yw + cx] = 1.0;
            }
        }
        let grads = tape.backward_from(y, seed)?;
        if let Some(g) = grads.get(x) {
            for sample in g.data().chunks(c * h * w) {
                for plane in sample.chunks(h * w) {
                    acc.iter_mut().zip(plane).for_each(|(a, v)| *a += v.abs());
                }
            }
        }
        start += n;
    }
    let peak = acc.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Data(format!("ERF of layer {layer} is identically zero")));
    }
    Ok(ErfMap {
        height: h,
        width: w,
        // averaging over samples cancels under max normalization
        values: acc.iter().map(|v| v / peak).collect(),
        model: model.spec().name.clone(),
        layer,
        samples: num_samples,
    })
}

/// Square root of the intensity-weighted second moment about the centroid.
pub fn erf_radius(map: &ErfMap) -> Result<f64> {
    let total: f64 = map.values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("ERF radius of an all-zero map".into()));
    }
    let cells = || (0..map.height).flat_map(|r| (0..map.width).map(move |c| (r as f64, c as f64)));
    let (mut cy, mut cx) = (0.0, 0.0);
    for ((r, c), &v) in cells().zip(&map.values) {
        cy += v * r;
        cx += v * c;
    }
    cy /= total;
    cx /= total;
    let m2: f64 = cells().zip(&map.values).map(|((r, c), &v)| v * ((r - cy).powi(2) + (c - cx).powi(2))).sum();
    Ok((m2 / total).sqrt())
}

/// Theoretical receptive field of one output unit of a top-level layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfWindow {
    /// Side length in input pixels.
    pub size: usize,
    /// Input-pixel distance between adjacent output units.
    pub jump: usize,
    /// Input coordinate of the center of output unit 0 (can be negative).
    pub start: f64,
}

impl RfWindow {
    /// Inclusive input-coordinate range covered by output unit `index`.
    pub fn span(&self, index: usize) -> (f64, f64) {
        let center = self.start + (index * self.jump) as f64;
        let half = (self.size as f64 - 1.0) / 2.0;
        (center - half, center + half)
    }
}

pub fn receptive_field(spec: &ModelSpec, layer: usize) -> Result<RfWindow> {
    fn step(l: &Layer, rf: RfWindow) -> RfWindow {
        match &l.kind {
            LayerKind::Conv { shape }
            | LayerKind::StaticGmconv { shape, .. }
            | LayerKind::DynamicGmconv { shape, .. } => RfWindow {
                size: rf.size + (shape.kernel - 1) * rf.jump,
                jump: rf.jump * shape.stride,
                start: rf.start + ((shape.kernel as f64 - 1.0) / 2.0 - shape.padding as f64) * rf.jump as f64,
            },
            LayerKind::Residual { branch, shortcut } => {
                let b = branch.iter().fold(rf, |acc, l| step(l, acc));
                let s = match shortcut {
                    Shortcut::Identity => rf,
                    Shortcut::PadChannels { stride, .. } => RfWindow { jump: rf.jump * stride, ..rf },
                };
                RfWindow { size: b.size.max(s.size), ..b }
            }
            _ => rf,
        }
    }
    if layer >= spec.layers.len() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    Ok(spec.layers[..=layer].iter().fold(RfWindow { size: 1, jump: 1, start: 0.0 }, |acc, l| step(l, acc)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskManifestEntry {
    pub flat_index: usize,
    pub name: String,
    pub kind: &'static str,
    pub kernel: usize,
    /// Raw sigma values (static) or the bias-only prediction (dynamic).
    pub sigma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub module_norm: Option<f64>,
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskManifest {
    pub model: String,
    pub layers: Vec<MaskManifestEntry>,
}

/// Write one CSV and one PGM per GMConv layer plus `manifest.json`.
pub fn dump_layer_masks(model: &Model, dir: &Path) -> Result<MaskManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for info in model.gm_layers()? {
        let (kind, mask, sigma, module_norm) = match &info.kind {
            GmLayerKind::Static { sigma, mask } => ("static", mask, sigma.clone(), None),
            GmLayerKind::Dynamic { baseline, mask, module_norm } => {
                ("dynamic", mask, vec![baseline.0, baseline.1], Some(*module_norm))
            }
        };
        let stem = format!("layer_{:03}", info.flat_index);
        let csv = PathBuf::from(format!("{stem}.csv"));
        let pgm = PathBuf::from(format!("{stem}.pgm"));
        mask.write(&dir.join(&csv))?;
        mask.write(&dir.join(&pgm))?;
        layers.push(MaskManifestEntry {
            flat_index: info.flat_index,
            name: info.name,
            kind,
            kernel: mask.kernel_size(),
            sigma,
            module_norm,
            csv,
            pgm,
        });
    }
    let manifest = MaskManifest { model: model.spec().name.clone(), layers };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
