//! Structure-tensor features and their quantization into a per-pixel filter
//! index.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{BladeError, Result};
use crate::grid::{gaussian_convolve, ImageGrid};

/// Smoothed structure tensor `J_rho`, one symmetric 2x2 matrix per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub jxx: ImageGrid,
    pub jxy: ImageGrid,
    pub jyy: ImageGrid,
}

impl TensorField {
    pub fn dims(&self) -> (usize, usize) {
        self.jxx.dims()
    }
}

/// Gradient by central differences in pixel units (replicate boundary), outer
/// product per pixel, each component smoothed with a Gaussian of std `rho`.
pub fn structure_tensor(img: &ImageGrid, rho: f64) -> Result<TensorField> {
    let (w, h) = img.dims();
    let mut jxx = ImageGrid::zeros(w, h);
    let mut jxy = ImageGrid::zeros(w, h);
    let mut jyy = ImageGrid::zeros(w, h);
    for n in 0..h {
        for m in 0..w {
            let (mi, ni) = (m as isize, n as isize);
            let gx = 0.5 * (img.sample_extended(mi + 1, ni) - img.sample_extended(mi - 1, ni));
            let gy = 0.5 * (img.sample_extended(mi, ni + 1) - img.sample_extended(mi, ni - 1));
            jxx.set(m, n, gx * gx);
            jxy.set(m, n, gx * gy);
            jyy.set(m, n, gy * gy);
        }
    }
    Ok(TensorField {
        jxx: gaussian_convolve(&jxx, rho)?,
        jxy: gaussian_convolve(&jxy, rho)?,
        jyy: gaussian_convolve(&jyy, rho)?,
    })
}

/// Closed-form eigen-decomposition of `[[a, b], [b, c]]`.
///
/// Returns `(lambda1, lambda2, theta)` with `lambda1 >= lambda2 >= 0` (roundoff
/// negatives clamped) and `theta` the angle of the dominant eigenvector folded
/// into `[0, pi)`. The zero matrix gets `theta = 0`.
#[inline]
pub fn eigen_sym2(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let half_trace = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l1 = (half_trace + disc).max(0.0);
    let l2 = (half_trace - disc).max(0.0);
    let mut theta = 0.5 * (2.0 * b).atan2(a - c);
    if theta < 0.0 {
        theta += PI;
    }
    if theta >= PI {
        theta -= PI;
    }
    (l1, l2, theta)
}

/// Per-pixel orientation / strength / coherence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    width: usize,
    height: usize,
    pub orientation: Vec<f64>,
    pub strength: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl FeatureField {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

pub fn eigen_features(t: &TensorField) -> FeatureField {
    let (w, h) = t.dims();
    let len = w * h;
    let mut orientation = Vec::with_capacity(len);
    let mut strength = Vec::with_capacity(len);
    let mut coherence = Vec::with_capacity(len);
    for i in 0..len {
        let (l1, l2, theta) = eigen_sym2(t.jxx.data()[i], t.jxy.data()[i], t.jyy.data()[i]);
        let (s1, s2) = (l1.sqrt(), l2.sqrt());
        orientation.push(theta);
        strength.push(s1);
        coherence.push(if s1 + s2 > 0.0 { (s1 - s2) / (s1 + s2) } else { 0.0 });
    }
    FeatureField {
        width: w,
        height: h,
        orientation,
        strength,
        coherence,
    }
}

/// How the structure-tensor features are quantized and flattened into a
/// filter index. Orientation varies fastest, then strength, then coherence,
/// then (when present) intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub orientation_bins: usize,
    pub strength_thresholds: Vec<f64>,
    pub coherence_thresholds: Vec<f64>,
    pub intensity_thresholds: Option<Vec<f64>>,
    pub rho: f64,
}

/// Default tensor smoothing.
pub const DEFAULT_RHO: f64 = 1.0;

impl SelectionConfig {
    /// 24 orientations x 3 strengths x 3 coherences. Thresholds are
    /// placeholders until [`calibrate_thresholds`] is run.
    pub fn structure_tensor_default() -> Self {
        SelectionConfig {
            orientation_bins: 24,
            strength_thresholds: vec![1.0, 4.0],
            coherence_thresholds: vec![0.25, 0.5],
            intensity_thresholds: None,
            rho: DEFAULT_RHO,
        }
    }

    /// 8 orientations x 5 strengths x 6 intensities, no coherence feature.
    pub fn with_intensity_default() -> Self {
        SelectionConfig {
            orientation_bins: 8,
            strength_thresholds: vec![0.01, 0.02, 0.05, 0.1],
            coherence_thresholds: vec![],
            intensity_thresholds: Some(vec![1.0 / 6.0, 2.0 / 6.0, 0.5, 4.0 / 6.0, 5.0 / 6.0]),
            rho: DEFAULT_RHO,
        }
    }

    /// A configuration with a single bin: every pixel selects filter 0.
    pub fn single() -> Self {
        SelectionConfig {
            orientation_bins: 1,
            strength_thresholds: vec![],
            coherence_thresholds: vec![],
            intensity_thresholds: None,
            rho: DEFAULT_RHO,
        }
    }

    pub fn strength_bins(&self) -> usize {
        self.strength_thresholds.len() + 1
    }

    pub fn coherence_bins(&self) -> usize {
        self.coherence_thresholds.len() + 1
    }

    pub fn intensity_bins(&self) -> usize {
        self.intensity_thresholds.as_ref().map_or(1, |t| t.len() + 1)
    }

    pub fn num_filters(&self) -> usize {
        self.orientation_bins * self.strength_bins() * self.coherence_bins() * self.intensity_bins()
    }

    pub fn uses_intensity(&self) -> bool {
        self.intensity_thresholds.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientation_bins == 0 {
            return Err(BladeError::invalid("orientation_bins must be >= 1"));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(BladeError::invalid("rho must be a finite value >= 0"));
        }
        let lists = [
            ("strength", Some(&self.strength_thresholds)),
            ("coherence", Some(&self.coherence_thresholds)),
            ("intensity", self.intensity_thresholds.as_ref()),
        ];
        for (name, t) in lists {
            if let Some(t) = t {
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(BladeError::invalid(format!("{name} thresholds must be finite")));
                }
                if t.windows(2).any(|p| p[1] < p[0]) {
                    return Err(BladeError::invalid(format!(
                        "{name} thresholds must be ascending: {t:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattened filter index from per-feature bins.
    #[inline]
    pub fn flatten(&self, ori: usize, str_bin: usize, coh: usize, int_bin: usize) -> usize {
        ori + self.orientation_bins * (str_bin + self.strength_bins() * (coh + self.coherence_bins() * int_bin))
    }
}

/// Nearest bin center `k * pi / bins` with wraparound; exact ties go to the
/// lower bin.
#[inline]
pub fn orientation_bin(theta: f64, bins: usize) -> usize {
    if bins <= 1 {
        return 0;
    }
    let t = theta * bins as f64 / PI;
    let lower = t.floor();
    let frac = t - lower;
    let k = if frac > 0.5 + 1e-9 {
        lower as i64 + 1
    } else {
        lower as i64
    };
    k.rem_euclid(bins as i64) as usize
}

/// Number of thresholds strictly below `value`.
#[inline]
pub fn threshold_bin(value: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().take_while(|&&t| t < value).count()
}

/// Per-pixel filter index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMap {
    width: usize,
    height: usize,
    indices: Vec<u32>,
}

impl SelectionMap {
    pub fn new(width: usize, height: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != width * height {
            return Err(BladeError::invalid("selection map size does not match its dimensions"));
        }
        Ok(SelectionMap { width, height, indices })
    }

    pub fn constant(width: usize, height: usize, index: u32) -> Self {
        SelectionMap {
            width,
            height,
            indices: vec![index; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> usize {
        self.indices[n * self.width + m] as usize
    }

    pub fn max_index(&self) -> usize {
        self.indices.iter().copied().max().unwrap_or(0) as usize
    }
}

pub fn quantize(features: &FeatureField, cfg: &SelectionConfig, intensity: Option<&ImageGrid>) -> Result<SelectionMap> {
    cfg.validate()?;
    let (w, h) = features.dims();
    let intensity = match (&cfg.intensity_thresholds, intensity) {
        (Some(_), Some(img)) => {
            if img.dims() != (w, h) {
                return Err(BladeError::DimensionMismatch {
                    expected: (w, h),
                    found: img.dims(),
                });
            }
            Some(img)
        }
        (Some(_), None) => {
            return Err(BladeError::invalid(
                "selection uses an intensity feature but no intensity image was given",
            ))
        }
        (None, _) => None,
    };
    let indices = (0..w * h)
        .map(|i| {
            let ori = orientation_bin(features.orientation[i], cfg.orientation_bins);
            let s = threshold_bin(features.strength[i], &cfg.strength_thresholds);
            let c = threshold_bin(features.coherence[i], &cfg.coherence_thresholds);
            let it = match (intensity, &cfg.intensity_thresholds) {
                (Some(img), Some(t)) => threshold_bin(img.data()[i], t),
                _ => 0,
            };
            cfg.flatten(ori, s, c, it) as u32
        })
        .collect();
    SelectionMap::new(w, h, indices)
}

/// Structure tensor, eigen features and quantization in one go. When the
/// configuration has an intensity feature it is read from `intensity`, or
/// from `img` itself when `intensity` is `None`.
pub fn compute_selection(
    img: &ImageGrid,
    cfg: &SelectionConfig,
    intensity: Option<&ImageGrid>,
) -> Result<SelectionMap> {
    if cfg.num_filters() == 1 {
        return Ok(SelectionMap::constant(img.width(), img.height(), 0));
    }
    let features = eigen_features(&structure_tensor(img, cfg.rho)?);
    let intensity = if cfg.uses_intensity() {
        Some(intensity.unwrap_or(img))
    } else {
        None
    };
    quantize(&features, cfg, intensity)
}

/// Quantile with linear interpolation between order statistics of `sorted`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn equal_population_thresholds(mut pool: Vec<f64>, bins: usize) -> Vec<f64> {
    pool.sort_by(f64::total_cmp);
    (1..bins)
        .map(|i| quantile_sorted(&pool, i as f64 / bins as f64))
        .collect()
}

/// Sets strength, coherence and (if configured) intensity thresholds to
/// equal-population quantiles of the features pooled over `images`, keeping
/// the bin counts of `cfg`.
pub fn calibrate_thresholds(images: &[ImageGrid], cfg: &SelectionConfig) -> Result<SelectionConfig> {
    if images.is_empty() {
        return Err(BladeError::invalid("threshold calibration needs at least one image"));
    }
    let mut strengths = Vec::new();
    let mut coherences = Vec::new();
    let mut intensities = Vec::new();
    for img in images {
        let f = eigen_features(&structure_tensor(img, cfg.rho)?);
        strengths.extend_from_slice(&f.strength);
        coherences.extend_from_slice(&f.coherence);
        if cfg.uses_intensity() {
            intensities.extend_from_slice(img.data());
        }
    }
    let mut out = cfg.clone();
    out.strength_thresholds = equal_population_thresholds(strengths, cfg.strength_bins());
    out.coherence_thresholds = equal_population_thresholds(coherences, cfg.coherence_bins());
    if cfg.uses_intensity() {
        out.intensity_thresholds = Some(equal_population_thresholds(intensities, cfg.intensity_bins()));
    }
    Ok(out)
}
