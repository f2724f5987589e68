//! Resampling at displaced positions: a learned first-order correction after
//! an integer gather, a Catmull–Rom baseline, and least-squares training of
//! the two derivative banks.

use rayon::prelude::*;

use crate::error::{BladeError, Result};
use crate::features::{calibrate_thresholds, compute_selection, SelectionConfig};
use crate::grid::{gaussian_convolve, ImageGrid};
use crate::net::{select_and_apply, FilterBank, Footprint};
use crate::train::BucketNormalEquations;

/// Per-pixel displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vx: ImageGrid,
    pub vy: ImageGrid,
}

impl FlowField {
    pub fn new(vx: ImageGrid, vy: ImageGrid) -> Result<Self> {
        vx.ensure_same_dims(&vy)?;
        Ok(FlowField { vx, vy })
    }

    pub fn uniform(width: usize, height: usize, vx: f64, vy: f64) -> Result<Self> {
        if !vx.is_finite() || !vy.is_finite() {
            return Err(BladeError::invalid("flow must be finite"));
        }
        Ok(FlowField {
            vx: ImageGrid::filled(width, height, vx),
            vy: ImageGrid::filled(width, height, vy),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vx.dims()
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            vx: self.vx.scaled(-1.0),
            vy: self.vy.scaled(-1.0),
        }
    }
}

/// Splits `v` into the nearest integer (ties toward +infinity) and the
/// remainder in `[-1/2, 1/2)`.
#[inline]
pub fn split_displacement(v: f64) -> (isize, f64) {
    let r = (v + 0.5).floor();
    (r as isize, v - r)
}

/// `u~ = u + dx BLADE^x(u) + dy BLADE^y(u)` with the fractional part
/// `(dx, dy)` of the flow, evaluated at the integer-shifted position.
pub fn resample(bank_x: &FilterBank, bank_y: &FilterBank, u: &ImageGrid, flow: &FlowField) -> Result<ImageGrid> {
    u.ensure_same_dims(&flow.vx)?;
    let ex = select_and_apply(bank_x, u, None)?;
    let ey = select_and_apply(bank_y, u, None)?;
    let (w, h) = u.dims();
    let mut out = u.zeros_like();
    for n in 0..h {
        for m in 0..w {
            let (ix, fx) = split_displacement(flow.vx.get(m, n));
            let (iy, fy) = split_displacement(flow.vy.get(m, n));
            let (mm, nn) = u.clamp_index(m as isize + ix, n as isize + iy);
            out.set(m, n, u.get(mm, nn) + fx * ex.get(mm, nn) + fy * ey.get(mm, nn));
        }
    }
    Ok(out)
}

/// Catmull–Rom weights for taps at offsets -1, 0, 1, 2 and fraction `t`.
#[inline]
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Catmull–Rom bicubic sample at `(x, y)` with replicate boundary.
pub fn bicubic_sample(u: &ImageGrid, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let wx = catmull_rom_weights(x - x0);
    let wy = catmull_rom_weights(y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (j, cy) in wy.iter().enumerate() {
        let mut row = 0.0;
        for (i, cx) in wx.iter().enumerate() {
            row += cx * u.sample_extended(x0 + i as isize - 1, y0 + j as isize - 1);
        }
        acc += cy * row;
    }
    acc
}

pub fn bicubic_resample(u: &ImageGrid, flow: &FlowField) -> Result<ImageGrid> {
    u.ensure_same_dims(&flow.vx)?;
    let (w, h) = u.dims();
    Ok(ImageGrid::from_fn(w, h, |m, n| {
        bicubic_sample(u, m as f64 + flow.vx.get(m, n), n as f64 + flow.vy.get(m, n))
    })
    .with_dx(u.dx()))
}

/// An observed image and the same scene sampled `delta` pixels away.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerSample {
    pub observed: ImageGrid,
    pub target: ImageGrid,
    pub delta: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerConfig {
    /// Downsampling factor from the high-resolution corpus image.
    pub factor: usize,
    /// Gaussian psf width in observed pixels.
    pub psf_sigma: f64,
    pub footprint: Footprint,
    pub selection: SelectionConfig,
    /// Tikhonov damping relative to the mean normal-matrix diagonal.
    pub ridge: f64,
    /// Observed-image border excluded from the fit.
    pub margin: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig {
            factor: 4,
            psf_sigma: 0.5,
            footprint: Footprint::square5(),
            selection: SelectionConfig::structure_tensor_default(),
            ridge: 1e-6,
            margin: 3,
        }
    }
}

impl ResamplerConfig {
    /// Displacements used for training: every multiple of `1/factor` in
    /// `[-1/2, 1/2]` on each axis, so the high-resolution shift is exact.
    pub fn deltas(&self) -> Vec<(f64, f64)> {
        let f = self.factor as isize;
        let half = f / 2;
        let mut out = Vec::new();
        for j in -half..=half {
            for i in -half..=half {
                out.push((i as f64 / f as f64, j as f64 / f as f64));
            }
        }
        out
    }
}

/// Blurs the high-resolution image with the psf and samples it on the
/// observed grid offset by `delta` observed pixels (a multiple of
/// `1/factor`). Returns the observed (unshifted) image and the target.
pub fn make_resampler_samples(hr: &ImageGrid, cfg: &ResamplerConfig) -> Result<Vec<ResamplerSample>> {
    let f = cfg.factor;
    if f == 0 || !hr.width().is_multiple_of(f) || !hr.height().is_multiple_of(f) {
        return Err(BladeError::NotDivisible {
            width: hr.width(),
            height: hr.height(),
            factor: f,
        });
    }
    let blurred = gaussian_convolve(hr, cfg.psf_sigma * f as f64)?;
    let (w, h) = (hr.width() / f, hr.height() / f);
    let sample = |sx: isize, sy: isize| {
        ImageGrid::from_fn(w, h, |m, n| {
            blurred.sample_extended((m * f) as isize + sx, (n * f) as isize + sy)
        })
    };
    let observed = sample(0, 0);
    Ok(cfg
        .deltas()
        .into_iter()
        .map(|delta| {
            let sx = (delta.0 * f as f64).round() as isize;
            let sy = (delta.1 * f as f64).round() as isize;
            ResamplerSample {
                observed: observed.clone(),
                target: sample(sx, sy),
                delta,
            }
        })
        .collect())
}

/// Fits both banks jointly by per-bucket least squares on
/// `target - observed = dx BLADE^x(observed) + dy BLADE^y(observed)`.
/// The selection thresholds are calibrated on the observed images first.
pub fn fit_resampler(samples: &[ResamplerSample], cfg: &ResamplerConfig) -> Result<(FilterBank, FilterBank)> {
    if samples.is_empty() {
        return Err(BladeError::invalid("resampler training needs at least one sample"));
    }
    let observed: Vec<ImageGrid> = samples.iter().map(|s| s.observed.clone()).collect();
    let selection = if cfg.selection.num_filters() > 1 {
        calibrate_thresholds(&observed, &cfg.selection)?
    } else {
        cfg.selection.clone()
    };
    let fp = cfg.footprint;
    let area = fp.area();
    let buckets = selection.num_filters();
    let offsets: Vec<(isize, isize)> = fp.offsets().collect();
    const CHUNK: usize = 8;
    let partials: Vec<Result<BucketNormalEquations>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ne = BucketNormalEquations::new(buckets, 2 * area);
            let mut row = vec![0.0; 2 * area];
            for s in chunk {
                s.observed.ensure_same_dims(&s.target)?;
                let u = &s.observed;
                let sel = compute_selection(u, &selection, None)?;
                let (w, h) = u.dims();
                for n in cfg.margin..h.saturating_sub(cfg.margin) {
                    for m in cfg.margin..w.saturating_sub(cfg.margin) {
                        for (t, &(ox, oy)) in offsets.iter().enumerate() {
                            let z = u.sample_extended(m as isize + ox, n as isize + oy);
                            row[t] = s.delta.0 * z;
                            row[area + t] = s.delta.1 * z;
                        }
                        ne.add_row(sel.get(m, n), &row, s.target.get(m, n) - u.get(m, n));
                    }
                }
            }
            Ok(ne)
        })
        .collect();
    let mut total = BucketNormalEquations::new(buckets, 2 * area);
    for p in partials {
        total.merge(&p?);
    }
    let solution = total.solve(cfg.ridge);
    let mut tx = Vec::with_capacity(buckets * area);
    let mut ty = Vec::with_capacity(buckets * area);
    for k in 0..buckets {
        let s = &solution[k * 2 * area..(k + 1) * 2 * area];
        tx.extend_from_slice(&s[..area]);
        ty.extend_from_slice(&s[area..]);
    }
    Ok((
        FilterBank::new(fp, selection.clone(), tx)?,
        FilterBank::new(fp, selection, ty)?,
    ))
}

/// Builds training samples from every corpus image and fits both banks.
pub fn train_resampler(corpus: &[ImageGrid], cfg: &ResamplerConfig) -> Result<(FilterBank, FilterBank)> {
    if corpus.is_empty() {
        return Err(BladeError::invalid("resampler corpus is empty"));
    }
    let mut samples = Vec::new();
    for img in corpus {
        samples.extend(make_resampler_samples(img, cfg)?);
    }
    fit_resampler(&samples, cfg)
}
