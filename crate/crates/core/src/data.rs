//! Dataset readers, the synthetic generator and training-time augmentation.
//!
//! Images are stored as `f64` in `C x H x W` order, scaled to `[0, 1]` and
//! then normalized with per-channel `(x - mean) / std`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Cifar10Bin,
    MnistIdx,
    Synthetic,
}

/// Label layout of a CIFAR-style binary record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarLabels {
    /// One label byte, 10 classes.
    #[default]
    Cifar10,
    /// Two label bytes (coarse, fine); the coarse one is used, 20 classes.
    Cifar100Coarse,
    /// Two label bytes; the fine one is used, 100 classes.
    Cifar100Fine,
}

impl CifarLabels {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarLabels::Cifar10 => 1,
            _ => 2,
        }
    }

    /// Offset of the used label byte inside a record.
    pub fn label_offset(self) -> usize {
        match self {
            CifarLabels::Cifar100Fine => 1,
            _ => 0,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarLabels::Cifar10 => 10,
            CifarLabels::Cifar100Coarse => 20,
            CifarLabels::Cifar100Fine => 100,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }
}

/// Per-channel statistics applied after scaling to `[0, 1]`. Empty vectors
/// mean identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        Self::default()
    }

    /// The commonly quoted CIFAR-10 training-set statistics.
    pub fn cifar10() -> Self {
        Self { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.is_empty() && self.std.is_empty() {
            return Ok(());
        }
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization needs {channels} means and stds, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    fn apply(&self, images: &mut [f64], channels: usize, plane: usize) {
        if self.mean.is_empty() {
            return;
        }
        for image in images.chunks_mut(channels * plane) {
            for (c, px) in image.chunks_mut(plane).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                px.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
    }
}

/// Parameters of the seeded synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Seed of the class templates and of the samples.
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { train: 512, test: 256, classes: 10, channels: 3, height: 32, width: 32, noise: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub id: DatasetId,
    /// Directory holding the files; ignored by `synthetic`.
    #[serde(default)]
    pub root: PathBuf,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub cifar_labels: CifarLabels,
    #[serde(default)]
    pub synthetic: SyntheticParams,
}

impl DatasetSource {
    pub fn synthetic(params: SyntheticParams) -> Self {
        Self {
            id: DatasetId::Synthetic,
            root: PathBuf::new(),
            normalization: Normalization::identity(),
            cifar_labels: CifarLabels::default(),
            synthetic: params,
        }
    }

    pub fn cifar10(root: impl Into<PathBuf>) -> Self {
        Self {
            id: DatasetId::Cifar10Bin,
            root: root.into(),
            normalization: Normalization::cifar10(),
            cifar_labels: CifarLabels::Cifar10,
            synthetic: SyntheticParams::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.id {
            DatasetId::Cifar10Bin => self.cifar_labels.num_classes(),
            DatasetId::MnistIdx => 10,
            DatasetId::Synthetic => self.synthetic.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An in-memory labelled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() * channels * height * width {
            return Err(Error::Data(format!(
                "{} pixel values do not form {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { channels, height, width, num_classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.images.chunks(self.image_len()).zip(self.labels.iter().copied())
    }

    /// The first `n` items (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Stack the given items into an `N x C x H x W` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn all(&self) -> Result<(Tensor, Vec<usize>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

pub fn load_dataset(src: &DatasetSource, split: Split) -> Result<Dataset> {
    let mut ds = match src.id {
        DatasetId::Cifar10Bin => load_cifar(&src.root, src.cifar_labels, split)?,
        DatasetId::MnistIdx => load_mnist(&src.root, split)?,
        DatasetId::Synthetic => {
            let p = &src.synthetic;
            // train and test share class templates but not samples
            let (n, stream) = match split {
                Split::Train => (p.train, 0),
                Split::Test => (p.test, 1),
            };
            synthetic_with(p.seed, n, stream, p)?
        }
    };
    src.normalization.validate(ds.channels)?;
    let plane = ds.height * ds.width;
    src.normalization.apply(&mut ds.images, ds.channels, plane);
    Ok(ds)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn cifar_files(root: &Path, labels: CifarLabels, split: Split) -> Vec<PathBuf> {
    // accept both the extracted archive directory and its parent
    let base = ["cifar-10-batches-bin", "cifar-100-binary"]
        .iter()
        .map(|d| root.join(d))
        .find(|d| d.is_dir())
        .unwrap_or_else(|| root.to_path_buf());
    match (labels, split) {
        (CifarLabels::Cifar10, Split::Train) => (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect(),
        (CifarLabels::Cifar10, Split::Test) => vec![base.join("test_batch.bin")],
        (_, Split::Train) => vec![base.join("train.bin")],
        (_, Split::Test) => vec![base.join("test.bin")],
    }
}

fn load_cifar(root: &Path, labels: CifarLabels, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut ys = Vec::new();
    for path in cifar_files(root, labels, split) {
        let bytes = read(&path)?;
        parse_cifar_records(&bytes, labels, &path, &mut images, &mut ys)?;
    }
    Dataset::new(3, 32, 32, labels.num_classes(), images, ys)
}

/// Append every record of one CIFAR binary file.
pub fn parse_cifar_records(
    bytes: &[u8],
    labels: CifarLabels,
    path: &Path,
    images: &mut Vec<f64>,
    ys: &mut Vec<usize>,
) -> Result<()> {
    let rec = labels.record_bytes();
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "truncated record: expected {rec} bytes, found {} (file is {} bytes, not a multiple of {rec})",
                bytes.len() - whole,
                bytes.len()
            ),
        });
    }
    if bytes.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 0, message: "empty file".into() });
    }
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[labels.label_offset()] as usize;
        if label >= labels.num_classes() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (i * rec + labels.label_offset()) as u64,
                message: format!("label {label} outside [0, {})", labels.num_classes()),
            });
        }
        ys.push(label);
        images.extend(record[labels.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = root.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = root.join(format!("{prefix}-labels-idx1-ubyte"));
    let (img_bytes, lbl_bytes) = (read(&img_path)?, read(&lbl_path)?);
    let (dims, pixels) = parse_idx(&img_bytes, IDX_IMAGES_MAGIC, &img_path)?;
    let (ldims, labels) = parse_idx(&lbl_bytes, IDX_LABELS_MAGIC, &lbl_path)?;
    if dims[0] != ldims[0] {
        return Err(Error::Data(format!("{} images but {} labels", dims[0], ldims[0])));
    }
    let images = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(1, dims[1], dims[2], 10, images, labels.iter().map(|&b| b as usize).collect())
}

/// Parse an unsigned-byte IDX file, returning its dimensions and payload.
pub fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let err =
        |offset: usize, message: String| Error::Parse { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.len() < 4 {
        return Err(err(0, format!("expected at least 4 header bytes, found {}", bytes.len())));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(err(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("expected {header} header bytes, found {}", bytes.len())));
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("expected {expected} bytes for dims {dims:?}, found {}", bytes.len()),
        ));
    }
    Ok((dims, &bytes[header..]))
}

/// Seeded oriented-grating images.
///
/// Each class owns an orientation, spatial frequency and channel tint drawn
/// from `seed`; every sample gets a random phase and Gaussian pixel noise.
/// Values are clamped to `[0, 1]`. `seed` overrides `params.seed`.
pub fn synthetic(seed: u64, n: usize, params: &SyntheticParams) -> Result<Dataset> {
    synthetic_with(seed, n, 0, params)
}

fn synthetic_with(seed: u64, n: usize, stream: u64, p: &SyntheticParams) -> Result<Dataset> {
    if p.classes == 0 || p.channels == 0 || p.height == 0 || p.width == 0 {
        return Err(Error::Config(format!("degenerate synthetic dataset {p:?}")));
    }
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<(f64, f64, Vec<f64>)> = (0..p.classes)
        .map(|c| {
            // evenly spread orientations, jittered frequency and tint
            let theta = PI * c as f64 / p.classes as f64 + template_rng.random_range(-0.05..0.05);
            let freq = template_rng.random_range(0.12..0.3);
            let tint = (0..p.channels).map(|_| template_rng.random_range(0.3..1.0)).collect();
            (theta, freq, tint)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);
    let mut images = Vec::with_capacity(n * p.channels * p.height * p.width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % p.classes;
        let (theta, freq, tint) = &templates[label];
        let phase = rng.random_range(0.0..2.0 * PI);
        let (ct, st) = (theta.cos(), theta.sin());
        for tint_c in tint {
            for y in 0..p.height {
                for x in 0..p.width {
                    let g = (2.0 * PI * freq * (x as f64 * ct + y as f64 * st) + phase).sin();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    images.push((0.5 + 0.4 * tint_c * g + p.noise * noise).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(p.channels, p.height, p.width, p.classes, images, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    #[default]
    None,
    /// Zero-pad by 4, random crop back to size, horizontal flip with p = 0.5.
    CifarStandard,
}

pub const CROP_PAD: usize = 4;

/// Augmented copy of one `C x H x W` image.
pub fn augment<R: Rng + ?Sized>(image: &[f64], shape: (usize, usize, usize), mode: Augment, rng: &mut R) -> Vec<f64> {
    match mode {
        Augment::None => image.to_vec(),
        Augment::CifarStandard => {
            let (c, h, w) = shape;
            let dy = rng.random_range(0..=2 * CROP_PAD);
            let dx = rng.random_range(0..=2 * CROP_PAD);
            let flip = rng.random_bool(0.5);
            let mut out = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    // source row in unpadded coordinates
                    let sy = y as isize + dy as isize - CROP_PAD as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as isize + dx as isize - CROP_PAD as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
            out
        }
    }
}
