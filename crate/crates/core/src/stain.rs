//! Macenko stain normalization of 8-bit RGB patches.
//!
//! Pixels are mapped to optical density, the two dominant stain directions
//! are found from the angular extremes of the OD cloud in its principal
//! plane, and each pixel's stain concentrations are re-synthesized through a
//! fixed reference basis.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("ppm: {0}")]
    Ppm(String),
    #[error("{retained} pixels above the OD threshold; need at least 2")]
    TooFewTissuePixels { retained: usize },
    #[error("optical density cloud has rank < 2")]
    Degenerate,
    #[error("invalid stain basis: {0}")]
    InvalidBasis(String),
    #[error("stain basis json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StainError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbPatch {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width * height == 0 {
            return Err(StainError::Ppm("patch must have at least one pixel".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(StainError::Ppm(format!(
                "{} bytes for a {width}x{height} RGB patch",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses binary PPM (P6) with maxval 255. Header comments are skipped.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(StainError::Ppm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(StainError::Ppm(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| StainError::Ppm(format!("bad header number {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(StainError::Ppm(format!("maxval {maxval} unsupported")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        Self::new(width, height, raster.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| StainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_ppm(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|source| StainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Hematoxylin and eosin OD directions plus robust concentration scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainBasis {
    pub h: [f64; 3],
    pub e: [f64; 3],
    pub max_c: [f64; 2],
}

impl Default for StainBasis {
    fn default() -> Self {
        Self::reference()
    }
}

impl StainBasis {
    /// The conventional reference basis.
    pub fn reference() -> Self {
        Self {
            h: unit([0.5626, 0.7201, 0.4062]),
            e: unit([0.2159, 0.8012, 0.5581]),
            max_c: [1.9705, 1.0308],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("h", &self.h), ("e", &self.e)] {
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(StainError::InvalidBasis(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
            if (length(v) - 1.0).abs() > 1e-6 {
                return Err(StainError::InvalidBasis(format!("{name} is not unit norm")));
            }
        }
        let cross = Vector3::from(self.h).cross(&Vector3::from(self.e));
        if cross.norm() < 1e-6 {
            return Err(StainError::InvalidBasis("stain vectors are parallel".into()));
        }
        if self.max_c.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(StainError::InvalidBasis(
                "max concentrations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Loads `{h, e, max_c}`; stain vectors are renormalized to unit length.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| StainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut basis: Self = serde_json::from_str(&text)?;
        basis.h = unit(basis.h);
        basis.e = unit(basis.e);
        basis.validate()?;
        Ok(basis)
    }

    /// Per-pixel least-squares concentrations `(c_h, c_e)`.
    fn concentrations(&self, od: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
        let hh = dot3(&self.h, &self.h);
        let ee = dot3(&self.e, &self.e);
        let he = dot3(&self.h, &self.e);
        let det = hh * ee - he * he;
        if det.abs() < 1e-12 {
            return Err(StainError::InvalidBasis("singular stain basis".into()));
        }
        Ok(od
            .iter()
            .map(|p| {
                let bh = dot3(&self.h, p);
                let be = dot3(&self.e, p);
                [(ee * bh - he * be) / det, (hh * be - he * bh) / det]
            })
            .collect())
    }

    fn synthesize(&self, c: [f64; 2]) -> [f64; 3] {
        [
            c[0] * self.h[0] + c[1] * self.e[0],
            c[0] * self.h[1] + c[1] * self.e[1],
            c[0] * self.h[2] + c[1] * self.e[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacenkoParams {
    /// OD threshold; pixels with any channel at or below it are background.
    pub beta: f64,
    /// Percentile for the robust angular extremes.
    pub alpha_pct: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            beta: 0.15,
            alpha_pct: 1.0,
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn length(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = length(&a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Single-channel OD: `max(0, −log10((I + 1) / 255))`.
pub fn intensity_to_od(i: u8) -> f64 {
    (-((i as f64 + 1.0) / 255.0).log10()).max(0.0)
}

/// Inverse of [`intensity_to_od`], rounded and clamped to 8 bits.
pub fn od_to_intensity(od: f64) -> u8 {
    (255.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(patch: &RgbPatch) -> Vec<[f64; 3]> {
    patch
        .pixels
        .chunks_exact(3)
        .map(|px| [intensity_to_od(px[0]), intensity_to_od(px[1]), intensity_to_od(px[2])])
        .collect()
}

pub fn od_to_rgb(od: &[[f64; 3]], width: usize, height: usize) -> Result<RgbPatch> {
    let pixels = od
        .iter()
        .flat_map(|p| [od_to_intensity(p[0]), od_to_intensity(p[1]), od_to_intensity(p[2])])
        .collect();
    RgbPatch::new(width, height, pixels)
}

/// Linear-interpolated percentile of unsorted data, `pct` in `[0, 100]`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, pct)
}

fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let rank = (pct / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn estimate_stain_basis(od: &[[f64; 3]], params: &MacenkoParams) -> Result<StainBasis> {
    let tissue: Vec<[f64; 3]> = od
        .iter()
        .copied()
        .filter(|p| p.iter().all(|&v| v > params.beta))
        .collect();
    if tissue.len() < 2 {
        return Err(StainError::TooFewTissuePixels {
            retained: tissue.len(),
        });
    }

    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for p in &tissue {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in &tissue {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) || eig.eigenvalues[order[1]] <= top * 1e-12 {
        return Err(StainError::Degenerate);
    }
    let mut e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let mut e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    // tissue OD points along +e1
    if e1.sum() < 0.0 {
        e1 = -e1;
    }
    if e2.sum() < 0.0 {
        e2 = -e2;
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|p| {
            let v = Vector3::from(*p);
            v.dot(&e2).atan2(v.dot(&e1))
        })
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&angles, params.alpha_pct);
    let hi = percentile_sorted(&angles, 100.0 - params.alpha_pct);
    let direction = |phi: f64| -> [f64; 3] {
        let v = e1 * phi.cos() + e2 * phi.sin();
        let mut v = [v.x, v.y, v.z];
        if v.iter().sum::<f64>() < 0.0 {
            v = [-v[0], -v[1], -v[2]];
        }
        // tiny negative components are estimation noise
        for x in v.iter_mut() {
            *x = x.max(0.0);
        }
        unit(v)
    };
    let (v_lo, v_hi) = (direction(lo), direction(hi));
    let (h, e) = if v_lo[0] > v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };

    let mut basis = StainBasis {
        h,
        e,
        max_c: [1.0, 1.0],
    };
    if Vector3::from(h).cross(&Vector3::from(e)).norm() < 1e-6 {
        return Err(StainError::Degenerate);
    }
    let conc = basis.concentrations(od)?;
    let ch: Vec<f64> = conc.iter().map(|c| c[0]).collect();
    let ce: Vec<f64> = conc.iter().map(|c| c[1]).collect();
    basis.max_c = [percentile(&ch, 99.0), percentile(&ce, 99.0)];
    if basis.max_c.iter().any(|c| !(*c > 0.0)) {
        return Err(StainError::Degenerate);
    }
    Ok(basis)
}

/// Basis estimated from one patch.
pub fn estimate_patch_basis(patch: &RgbPatch, params: &MacenkoParams) -> Result<StainBasis> {
    estimate_stain_basis(&rgb_to_od(patch), params)
}

/// Basis estimated from the OD samples of several patches pooled together,
/// as for one slide.
pub fn estimate_pooled_basis(patches: &[RgbPatch], params: &MacenkoParams) -> Result<StainBasis> {
    let od: Vec<[f64; 3]> = patches.iter().flat_map(rgb_to_od).collect();
    estimate_stain_basis(&od, params)
}

pub fn normalize_patch(
    patch: &RgbPatch,
    basis: &StainBasis,
    reference: &StainBasis,
) -> Result<RgbPatch> {
    basis.validate()?;
    reference.validate()?;
    let scale = [
        reference.max_c[0] / basis.max_c[0],
        reference.max_c[1] / basis.max_c[1],
    ];
    let od: Vec<[f64; 3]> = basis
        .concentrations(&rgb_to_od(patch))?
        .into_iter()
        .map(|c| reference.synthesize([c[0].max(0.0) * scale[0], c[1].max(0.0) * scale[1]]))
        .collect();
    od_to_rgb(&od, patch.width, patch.height)
}

/// Renders concentrations through `basis` directly.
pub fn synthesize_patch(
    concentrations: &[[f64; 2]],
    basis: &StainBasis,
    width: usize,
    height: usize,
) -> Result<RgbPatch> {
    let od: Vec<[f64; 3]> = concentrations.iter().map(|&c| basis.synthesize(c)).collect();
    od_to_rgb(&od, width, height)
}

/// Angle in degrees between two vectors.
pub fn angle_degrees(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (dot3(a, b) / (length(a) * length(b))).clamp(-1.0, 1.0).acos().to_degrees()
}
