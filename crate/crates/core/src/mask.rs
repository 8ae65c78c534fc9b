//! Gaussian receptive-field masks.
//!
//! A mask is a `K x K` grid placed over a convolution kernel. Values follow a
//! Gaussian of the offset from the kernel's geometric center and are divided
//! by their maximum over the grid, so the innermost cell(s) hold exactly 1.
//!
//! * circular: `exp(-d^2 / (2 s^2))` with `d` the Euclidean offset length;
//! * elliptic: `exp(-(x^2 / s1^2 + y^2 / s2^2) / 2)` with `x` horizontal and
//!   `y` vertical offsets.
//!
//! The normalizing maximum is folded into the exponent (`d^2 - d_min^2`), which
//! keeps even kernels well defined when every raw value underflows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest magnitude a sigma is evaluated at.
pub const SIGMA_MIN: f64 = 1e-3;
/// Largest magnitude a sigma is evaluated at.
pub const SIGMA_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Circular,
    Elliptic,
}

/// Parameters of one mask. `sigma2` is ignored for circular masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub kind: MaskKind,
    pub sigma1: f64,
    pub sigma2: f64,
    pub kernel_size: usize,
}

impl MaskParams {
    pub fn circular(sigma: f64, kernel_size: usize) -> Self {
        Self { kind: MaskKind::Circular, sigma1: sigma, sigma2: sigma, kernel_size }
    }

    pub fn elliptic(sigma1: f64, sigma2: f64, kernel_size: usize) -> Self {
        Self { kind: MaskKind::Elliptic, sigma1, sigma2, kernel_size }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 {
            return Err(Error::InvalidArgument("mask kernel size must be >= 1".into()));
        }
        let sigmas: &[f64] = match self.kind {
            MaskKind::Circular => &[self.sigma1],
            MaskKind::Elliptic => &[self.sigma1, self.sigma2],
        };
        if let Some(s) = sigmas.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("mask sigma must be finite, got {s}")));
        }
        Ok(())
    }
}

/// A sigma after evaluation clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampedSigma {
    /// Magnitude the mask is evaluated at, in `[SIGMA_MIN, SIGMA_MAX]`.
    pub magnitude: f64,
    /// True when the raw value sat on or beyond a clamp bound. Gradients are
    /// zero in that case.
    pub clamped: bool,
}

pub fn clamp_sigma(sigma: f64) -> ClampedSigma {
    let a = sigma.abs();
    if a <= SIGMA_MIN {
        ClampedSigma { magnitude: SIGMA_MIN, clamped: true }
    } else if a >= SIGMA_MAX {
        ClampedSigma { magnitude: SIGMA_MAX, clamped: true }
    } else {
        ClampedSigma { magnitude: a, clamped: false }
    }
}

/// Offsets of each row/column index from the geometric center `(K-1)/2`.
fn axis_offsets(k: usize) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    (0..k).map(|i| i as f64 - c).collect()
}

/// Squared offset of the innermost cell along one axis: 0 for odd K, 1/4 for even K.
fn min_axis_sq(k: usize) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        0.25
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMask {
    values: Vec<f64>,
    params: MaskParams,
}

impl GaussianMask {
    pub fn new(params: MaskParams) -> Result<Self> {
        params.validate()?;
        let k = params.kernel_size;
        let off = axis_offsets(k);
        let m = min_axis_sq(k);
        let mut values = Vec::with_capacity(k * k);
        match params.kind {
            MaskKind::Circular => {
                let s = clamp_sigma(params.sigma1).magnitude;
                let two_s2 = 2.0 * s * s;
                for &dy in &off {
                    for &dx in &off {
                        let excess = (dy * dy - m) + (dx * dx - m);
                        values.push((-excess / two_s2).exp());
                    }
                }
            }
            MaskKind::Elliptic => {
                let s1 = clamp_sigma(params.sigma1).magnitude;
                let s2 = clamp_sigma(params.sigma2).magnitude;
                for &y in &off {
                    for &x in &off {
                        let q = (x * x - m) / (s1 * s1) + (y * y - m) / (s2 * s2);
                        values.push((-0.5 * q).exp());
                    }
                }
            }
        }
        Ok(Self { values, params })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn params(&self) -> &MaskParams {
        &self.params
    }

    pub fn kernel_size(&self) -> usize {
        self.params.kernel_size
    }

    /// Value at `(row, col)`; rows run vertically.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.params.kernel_size + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `K` lines of `K` comma-separated values with 17 significant digits.
    pub fn to_csv(&self) -> String {
        grid_to_csv(&self.values, self.kernel_size())
    }

    /// Plain (P2) PGM with values scaled to `0..=65535`.
    pub fn to_pgm(&self) -> String {
        grid_to_pgm(&self.values, self.kernel_size(), self.kernel_size())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = match GridFormat::from_path(path)? {
            GridFormat::Csv => self.to_csv(),
            GridFormat::Pgm => self.to_pgm(),
        };
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

pub fn circular_mask(sigma: f64, kernel_size: usize) -> Result<GaussianMask> {
    GaussianMask::new(MaskParams::circular(sigma, kernel_size))
}

pub fn elliptic_mask(sigma1: f64, sigma2: f64, kernel_size: usize) -> Result<GaussianMask> {
    GaussianMask::new(MaskParams::elliptic(sigma1, sigma2, kernel_size))
}

/// Derivatives of every mask cell with respect to the sigma parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrad {
    /// `dM/d sigma` (circular) or `dM/d sigma1` (elliptic).
    pub d_sigma1: Vec<f64>,
    /// `dM/d sigma2`, elliptic only.
    pub d_sigma2: Option<Vec<f64>>,
}

/// Closed-form sigma derivatives of [`GaussianMask::new`], zero where a sigma is clamped.
pub fn mask_grad(params: &MaskParams) -> Result<MaskGrad> {
    let mask = GaussianMask::new(*params)?;
    Ok(mask_grad_with(&mask))
}

pub(crate) fn mask_grad_with(mask: &GaussianMask) -> MaskGrad {
    let params = mask.params;
    let k = params.kernel_size;
    let off = axis_offsets(k);
    let m = min_axis_sq(k);
    let cells = || off.iter().flat_map(|&y| off.iter().map(move |&x| (y, x)));
    let scale = |sigma: f64| {
        let c = clamp_sigma(sigma);
        if c.clamped {
            0.0
        } else {
            1.0 / (sigma * sigma * sigma)
        }
    };
    match params.kind {
        MaskKind::Circular => {
            let s = scale(params.sigma1);
            let d_sigma1 = cells().zip(&mask.values).map(|((y, x), &v)| v * ((y * y - m) + (x * x - m)) * s).collect();
            MaskGrad { d_sigma1, d_sigma2: None }
        }
        MaskKind::Elliptic => {
            let (s1, s2) = (scale(params.sigma1), scale(params.sigma2));
            let d_sigma1 = cells().zip(&mask.values).map(|((_, x), &v)| v * (x * x - m) * s1).collect();
            let d_sigma2 = cells().zip(&mask.values).map(|((y, _), &v)| v * (y * y - m) * s2).collect();
            MaskGrad { d_sigma1, d_sigma2: Some(d_sigma2) }
        }
    }
}

/// File formats for exported grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Csv,
    Pgm,
}

impl GridFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(GridFormat::Csv),
            Some("pgm") => Ok(GridFormat::Pgm),
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer grid format from {}; use .csv or .pgm",
                path.display()
            ))),
        }
    }
}

pub(crate) fn grid_to_csv(values: &[f64], width: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Grid values in `[0, 1]` rendered as a P2 PGM with maxval 65535.
pub(crate) fn grid_to_pgm(values: &[f64], width: usize, height: usize) -> String {
    let mut out = format!("P2\n{width} {height}\n65535\n");
    for row in values.chunks(width) {
        let line: Vec<String> =
            row.iter().map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u32).to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parse a CSV grid written by [`GaussianMask::to_csv`].
pub fn parse_csv_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|cell| cell.trim().parse::<f64>().map_err(|e| Error::Data(format!("bad CSV value {cell:?}: {e}"))))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const E_HALF: f64 = 0.6065306597126334; // exp(-0.5)
    const E_ONE: f64 = 0.36787944117144233; // exp(-1)

    #[test]
    fn circular_sigma1_k3_hand_values() {
        let m = circular_mask(1.0, 3).unwrap();
        let expect = [E_ONE, E_HALF, E_ONE, E_HALF, 1.0, E_HALF, E_ONE, E_HALF, E_ONE];
        for (a, b) in m.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(m.at(1, 1), 1.0);
    }

    #[test]
    fn circular_sigma5_k11_corner() {
        let m = circular_mask(5.0, 11).unwrap();
        assert!((m.at(0, 0) - E_ONE).abs() < 1e-15);
        assert!((m.at(10, 10) - E_ONE).abs() < 1e-15);
        assert_eq!(m.at(5, 5), 1.0);
    }

    #[test]
    fn flat_limit() {
        let m = circular_mask(1e6, 3).unwrap();
        assert!(m.values().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let e = elliptic_mask(1e6, 1e6, 5).unwrap();
        assert!(e.values().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn elliptic_hand_values() {
        let m = elliptic_mask(1.0, 2.0, 3).unwrap();
        // (row, col) = (y + 1, x + 1)
        assert!((m.at(1, 2) - 0.6065307).abs() < 1e-6);
        assert!((m.at(2, 1) - 0.8824969).abs() < 1e-6);
        assert!((m.at(2, 2) - 0.5352614).abs() < 1e-6);
    }

    #[test]
    fn isotropic_elliptic_equals_circular() {
        for k in 1..8 {
            let c = circular_mask(1.7, k).unwrap();
            let e = elliptic_mask(1.7, 1.7, k).unwrap();
            for (a, b) in c.values().iter().zip(e.values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn even_kernel_peaks_at_inner_four() {
        let m = circular_mask(0.8, 4).unwrap();
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(m.at(r, c), 1.0);
        }
        assert!(m.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn clamping() {
        assert!(clamp_sigma(0.0).clamped);
        assert_eq!(clamp_sigma(-2.0), ClampedSigma { magnitude: 2.0, clamped: false });
        assert_eq!(clamp_sigma(1e6).magnitude, 1e6);
        assert!(clamp_sigma(1e6).clamped);
        assert!(clamp_sigma(1e9).clamped);
        let tiny = circular_mask(1e-9, 3).unwrap();
        assert_eq!(tiny.at(1, 1), 1.0);
        assert!(tiny.values().iter().enumerate().all(|(i, &v)| i == 4 || v < 1e-300));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(circular_mask(1.0, 0).is_err());
        assert!(circular_mask(f64::NAN, 3).is_err());
        assert!(elliptic_mask(1.0, f64::INFINITY, 3).is_err());
    }

    #[test]
    fn grad_hand_values() {
        let g = mask_grad(&MaskParams::circular(1.0, 3)).unwrap();
        assert_eq!(g.d_sigma1[4], 0.0);
        assert!((g.d_sigma1[0] - 2.0 * E_ONE).abs() < 1e-15);
        assert!((g.d_sigma1[0] - 0.7357589).abs() < 1e-7);
        let clamped = mask_grad(&MaskParams::circular(1e6, 3)).unwrap();
        assert!(clamped.d_sigma1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let m = elliptic_mask(0.731, 2.9, 5).unwrap();
        let parsed = parse_csv_grid(&m.to_csv()).unwrap();
        let flat: Vec<f64> = parsed.into_iter().flatten().collect();
        assert_eq!(flat.len(), 25);
        for (a, b) in flat.iter().zip(m.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pgm_layout() {
        let pgm = circular_mask(1.0, 3).unwrap().to_pgm();
        let lines: Vec<&str> = pgm.lines().collect();
        assert_eq!(&lines[..3], &["P2", "3 3", "65535"]);
        assert_eq!(lines[4], "39749 65535 39749");
    }
}
