//! Classical reference schemes: explicit TV flow, Perona–Malik, coherence
//! enhancing diffusion with rotation-optimized derivative filters, and a
//! semi-implicit spectral Cahn–Hilliard solver.
//!
//! Every scheme except Cahn–Hilliard uses replicate extension of `u`, which
//! makes the fluxes through the image border vanish; Cahn–Hilliard is solved
//! with periodic boundaries.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{BladeError, Result};
use crate::features::eigen_sym2;
use crate::grid::{gaussian_convolve, FrameSequence, ImageGrid};
use crate::integrate::TimeDerivative;
use crate::spectral::Fft2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pde {
    TvFlow,
    PeronaMalik,
    Ced,
    CahnHilliard,
}

impl Pde {
    pub const ALL: [Pde; 4] = [Pde::TvFlow, Pde::PeronaMalik, Pde::Ced, Pde::CahnHilliard];

    pub fn name(self) -> &'static str {
        match self {
            Pde::TvFlow => "tv_flow",
            Pde::PeronaMalik => "perona_malik",
            Pde::Ced => "ced",
            Pde::CahnHilliard => "cahn_hilliard",
        }
    }

    /// Time at which the default evolution has a moderate effect.
    pub fn default_stop_time(self) -> f64 {
        match self {
            Pde::TvFlow => 20.0,
            Pde::PeronaMalik => 20.0,
            Pde::Ced => 40.0,
            Pde::CahnHilliard => 20.0,
        }
    }

    /// Intensity range the scheme's parameters are tuned for.
    pub fn intensity_range(self) -> (f64, f64) {
        match self {
            Pde::CahnHilliard => (0.0, 1.0),
            _ => (0.0, 255.0),
        }
    }
}

impl fmt::Display for Pde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pde {
    type Err = BladeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tv" | "tv_flow" => Ok(Pde::TvFlow),
            "pm" | "perona_malik" => Ok(Pde::PeronaMalik),
            "ced" => Ok(Pde::Ced),
            "ch" | "cahn_hilliard" => Ok(Pde::CahnHilliard),
            other => Err(BladeError::invalid(format!("unknown pde '{other}'"))),
        }
    }
}

/// Parameters of a reference scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub pde: Pde,
    pub dt: f64,
    pub dx: f64,
    /// Perona–Malik contrast `c` in `g(s) = 1 / (1 + s / c^2)`.
    pub contrast: f64,
    /// CED minimum diffusivity.
    pub alpha: f64,
    /// CED coherence threshold `C`.
    pub ced_c: f64,
    /// CED structure-tensor smoothing.
    pub rho: f64,
    /// Cahn–Hilliard interface parameter.
    pub gamma: f64,
    /// Regularizer inside the TV-flow square roots.
    pub epsilon_reg: f64,
}

impl SchemeConfig {
    pub fn default_for(pde: Pde) -> Self {
        SchemeConfig {
            pde,
            dt: 0.1,
            dx: 1.0,
            contrast: 10.0,
            alpha: 0.05,
            ced_c: 1.0,
            rho: 2.0,
            gamma: 1.0,
            epsilon_reg: 1e-4,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("dt", self.dt), ("dx", self.dx), ("epsilon_reg", self.epsilon_reg)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(BladeError::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        match self.pde {
            Pde::PeronaMalik if !(self.contrast > 0.0) => Err(BladeError::invalid("Perona–Malik contrast must be > 0")),
            Pde::Ced if !(self.alpha > 0.0 && self.alpha <= 1.0) => {
                Err(BladeError::invalid("CED alpha must lie in (0, 1]"))
            }
            Pde::Ced if !(self.ced_c > 0.0 && self.rho >= 0.0) => {
                Err(BladeError::invalid("CED needs C > 0 and rho >= 0"))
            }
            Pde::CahnHilliard if !(self.gamma > 0.0) => Err(BladeError::invalid("Cahn–Hilliard gamma must be > 0")),
            _ => Ok(()),
        }
    }
}

#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b > 0.0 {
        a.signum() * a.abs().min(b.abs())
    } else {
        0.0
    }
}

/// Right-hand side of the explicit TV-flow scheme, `div(grad u / |grad u|)`
/// with minmod-limited transverse differences and a regularized denominator.
pub fn tv_flow_rhs(u: &ImageGrid, eps: f64) -> ImageGrid {
    let dx = u.dx();
    let inv = 1.0 / dx;
    let eps2 = eps * eps;
    let flux_x = |m: isize, n: isize| {
        let c = u.sample_extended(m, n);
        let dxp = (u.sample_extended(m + 1, n) - c) * inv;
        if dxp == 0.0 {
            return 0.0;
        }
        let dyp = (u.sample_extended(m, n + 1) - c) * inv;
        let dym = (c - u.sample_extended(m, n - 1)) * inv;
        let t = minmod(dyp, dym);
        dxp / (dxp * dxp + t * t + eps2).sqrt()
    };
    let flux_y = |m: isize, n: isize| {
        let c = u.sample_extended(m, n);
        let dyp = (u.sample_extended(m, n + 1) - c) * inv;
        if dyp == 0.0 {
            return 0.0;
        }
        let dxp = (u.sample_extended(m + 1, n) - c) * inv;
        let dxm = (c - u.sample_extended(m - 1, n)) * inv;
        let t = minmod(dxp, dxm);
        dyp / (dyp * dyp + t * t + eps2).sqrt()
    };
    let (w, h) = u.dims();
    // fluxes through the right edge of each pixel and the bottom edge
    let fx: Vec<f64> = (0..w * h).map(|i| flux_x((i % w) as isize, (i / w) as isize)).collect();
    let fy: Vec<f64> = (0..w * h).map(|i| flux_y((i % w) as isize, (i / w) as isize)).collect();
    ImageGrid::from_fn(w, h, |m, n| {
        let i = n * w + m;
        let left = if m > 0 { fx[i - 1] } else { 0.0 };
        let up = if n > 0 { fy[i - w] } else { 0.0 };
        (fx[i] - left + fy[i] - up) * inv
    })
    .with_dx(dx)
}

pub fn tv_flow_step(u: &ImageGrid, cfg: &SchemeConfig) -> ImageGrid {
    let mut out = u.clone();
    out.add_scaled(cfg.dt, &tv_flow_rhs(u, cfg.epsilon_reg))
        .expect("same dimensions");
    out
}

/// The TV-flow right-hand side as a time-derivative estimator (the curvature
/// term of reference Chan–Vese).
#[derive(Debug, Clone, Copy)]
pub struct TvFlowDerivative {
    pub epsilon_reg: f64,
}

impl TimeDerivative for TvFlowDerivative {
    fn time_derivative(&self, u: &ImageGrid) -> Result<ImageGrid> {
        Ok(tv_flow_rhs(u, self.epsilon_reg))
    }
}

pub fn perona_malik_rhs(u: &ImageGrid, contrast: f64) -> ImageGrid {
    let inv = 1.0 / u.dx();
    let c2 = contrast * contrast;
    let (w, h) = u.dims();
    let flux = |d: f64| d / (1.0 + d * d / c2);
    let fx: Vec<f64> = (0..w * h)
        .map(|i| {
            let (m, n) = ((i % w) as isize, (i / w) as isize);
            flux((u.sample_extended(m + 1, n) - u.sample_extended(m, n)) * inv)
        })
        .collect();
    let fy: Vec<f64> = (0..w * h)
        .map(|i| {
            let (m, n) = ((i % w) as isize, (i / w) as isize);
            flux((u.sample_extended(m, n + 1) - u.sample_extended(m, n)) * inv)
        })
        .collect();
    ImageGrid::from_fn(w, h, |m, n| {
        let i = n * w + m;
        let left = if m > 0 { fx[i - 1] } else { 0.0 };
        let up = if n > 0 { fy[i - w] } else { 0.0 };
        (fx[i] - left + fy[i] - up) * inv
    })
    .with_dx(u.dx())
}

pub fn perona_malik_step(u: &ImageGrid, cfg: &SchemeConfig) -> ImageGrid {
    let mut out = u.clone();
    out.add_scaled(cfg.dt, &perona_malik_rhs(u, cfg.contrast))
        .expect("same dimensions");
    out
}

/// Rotation-optimized derivative weights: `[3, 10, 3] / 32` across the
/// derivative direction, central difference along it.
const SCHARR_SMOOTH: [f64; 3] = [3.0 / 32.0, 10.0 / 32.0, 3.0 / 32.0];

/// Extension used when reading outside the grid.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Ext {
    Replicate,
    /// Odd reflection about the half-pixel border along the derivative axis,
    /// replicate across it: the flux vanishes on the border.
    OddAlong,
}

fn scharr_derivative(v: &ImageGrid, x_axis: bool, ext: Ext) -> ImageGrid {
    let (w, h) = v.dims();
    let inv = 1.0 / v.dx();
    // one-pixel padded copy carrying the boundary extension
    let pw = w + 2;
    let mut pad = vec![0.0; pw * (h + 2)];
    for pn in 0..h + 2 {
        for pm in 0..pw {
            let (m, n) = (pm as isize - 1, pn as isize - 1);
            let mut val = v.sample_extended(m, n);
            if ext == Ext::OddAlong {
                let (along, len) = if x_axis { (m, w as isize) } else { (n, h as isize) };
                if along < 0 || along >= len {
                    val = -val;
                }
            }
            pad[pn * pw + pm] = val;
        }
    }
    let (step_along, step_across) = if x_axis { (1, pw) } else { (pw, 1) };
    let [s0, s1, s2] = SCHARR_SMOOTH;
    let mut out = vec![0.0; w * h];
    for n in 0..h {
        for m in 0..w {
            let c = (n + 1) * pw + m + 1;
            let diff = |i: usize| pad[i + step_along] - pad[i - step_along];
            out[n * w + m] = (s0 * diff(c - step_across) + s1 * diff(c) + s2 * diff(c + step_across)) * inv;
        }
    }
    ImageGrid::new(w, h, out).expect("dims unchanged").with_dx(v.dx())
}

/// Gradient with the rotation-optimized filters (replicate boundary).
pub fn scharr_gradient(u: &ImageGrid) -> (ImageGrid, ImageGrid) {
    (
        scharr_derivative(u, true, Ext::Replicate),
        scharr_derivative(u, false, Ext::Replicate),
    )
}

/// Divergence of a flux field with the rotation-optimized filters and zero
/// normal flux on the border, so that the result sums to zero.
pub fn scharr_divergence(fx: &ImageGrid, fy: &ImageGrid) -> ImageGrid {
    let mut d = scharr_derivative(fx, true, Ext::OddAlong);
    d.add_scaled(1.0, &scharr_derivative(fy, false, Ext::OddAlong))
        .expect("flux components share dimensions");
    d
}

/// CED diffusion tensor entries `(a, b, c)` of `[[a, b], [b, c]]` from the
/// structure-tensor eigen-structure.
#[inline]
pub fn ced_diffusion_tensor(jxx: f64, jxy: f64, jyy: f64, alpha: f64, ced_c: f64) -> (f64, f64, f64) {
    let (l1, l2, _) = eigen_sym2(jxx, jxy, jyy);
    let gap = l1 - l2;
    if !(gap > 0.0) {
        return (alpha, 0.0, alpha);
    }
    let mu1 = alpha;
    let mu2 = alpha + (1.0 - alpha) * (-ced_c / (gap * gap)).exp();
    // mu2 I + (mu1 - mu2) e1 e1^T, with e1 e1^T = (J - l2 I) / gap
    let k = (mu1 - mu2) / gap;
    (mu2 + k * (jxx - l2), k * jxy, mu2 + k * (jyy - l2))
}

pub fn ced_rhs(u: &ImageGrid, cfg: &SchemeConfig) -> Result<ImageGrid> {
    let (gx, gy) = scharr_gradient(u);
    let jxx = gaussian_convolve(&gx.zip_map(&gx, |a, b| a * b)?, cfg.rho)?;
    let jxy = gaussian_convolve(&gx.zip_map(&gy, |a, b| a * b)?, cfg.rho)?;
    let jyy = gaussian_convolve(&gy.zip_map(&gy, |a, b| a * b)?, cfg.rho)?;
    let mut fx = u.zeros_like();
    let mut fy = u.zeros_like();
    for i in 0..u.len() {
        let (a, b, c) = ced_diffusion_tensor(jxx.data()[i], jxy.data()[i], jyy.data()[i], cfg.alpha, cfg.ced_c);
        let (ux, uy) = (gx.data()[i], gy.data()[i]);
        fx.data_mut()[i] = a * ux + b * uy;
        fy.data_mut()[i] = b * ux + c * uy;
    }
    Ok(scharr_divergence(&fx, &fy))
}

pub fn ced_step(u: &ImageGrid, cfg: &SchemeConfig) -> Result<ImageGrid> {
    let mut out = u.clone();
    out.add_scaled(cfg.dt, &ced_rhs(u, cfg)?)?;
    Ok(out)
}

/// `W'(u)` for the double well `W(u) = u^2 (u - 1)^2`.
#[inline]
pub fn double_well_derivative(u: f64) -> f64 {
    2.0 * u * (u - 1.0) * (2.0 * u - 1.0)
}

/// 5-point Laplacian with periodic wraparound.
pub fn periodic_laplacian(u: &ImageGrid) -> ImageGrid {
    let (w, h) = u.dims();
    let inv2 = 1.0 / (u.dx() * u.dx());
    ImageGrid::from_fn(w, h, |m, n| {
        let c = u.get(m, n);
        let l = u.get((m + w - 1) % w, n);
        let r = u.get((m + 1) % w, n);
        let t = u.get(m, (n + h - 1) % h);
        let b = u.get(m, (n + 1) % h);
        (l + r + t + b - 4.0 * c) * inv2
    })
    .with_dx(u.dx())
}

/// Semi-implicit Cahn–Hilliard stepper; caches FFT plans and the per-mode
/// denominators for one grid size.
pub struct CahnHilliardSolver {
    fft: Fft2,
    denom: Vec<f64>,
    dt: f64,
}

impl CahnHilliardSolver {
    pub fn new(width: usize, height: usize, cfg: &SchemeConfig) -> Self {
        let fft = Fft2::new(width, height);
        let inv2 = 1.0 / (cfg.dx * cfg.dx);
        let denom = (0..width * height)
            .map(|i| {
                let (p, q) = (i % width, i / width);
                let sym = laplacian_symbol(p, width, q, height) * inv2;
                1.0 + cfg.dt * cfg.gamma * sym * sym
            })
            .collect();
        CahnHilliardSolver { fft, denom, dt: cfg.dt }
    }

    pub fn step(&self, u: &ImageGrid) -> Result<ImageGrid> {
        if u.dims() != self.fft.dims() {
            return Err(BladeError::DimensionMismatch {
                expected: self.fft.dims(),
                found: u.dims(),
            });
        }
        let mut rhs = u.clone();
        rhs.add_scaled(self.dt, &periodic_laplacian(&u.map(double_well_derivative)))?;
        let mut spec = self.fft.forward_real(rhs.data());
        for (c, d) in spec.iter_mut().zip(&self.denom) {
            *c /= Complex64::new(*d, 0.0);
        }
        let data = self.fft.inverse_real(spec);
        Ok(ImageGrid::new(u.width(), u.height(), data)?.with_dx(u.dx()))
    }
}

/// Eigenvalue of the periodic 5-point Laplacian (unit spacing) for DFT mode
/// `(p, q)`.
pub fn laplacian_symbol(p: usize, width: usize, q: usize, height: usize) -> f64 {
    let tp = 2.0 * std::f64::consts::PI * p as f64 / width as f64;
    let tq = 2.0 * std::f64::consts::PI * q as f64 / height as f64;
    2.0 * tp.cos() - 2.0 + 2.0 * tq.cos() - 2.0
}

pub fn cahn_hilliard_step(u: &ImageGrid, cfg: &SchemeConfig) -> Result<ImageGrid> {
    CahnHilliardSolver::new(u.width(), u.height(), cfg).step(u)
}

/// Isotropic discrete total variation with forward differences.
pub fn total_variation(u: &ImageGrid) -> f64 {
    let (w, h) = u.dims();
    let mut acc = 0.0;
    for n in 0..h {
        for m in 0..w {
            let c = u.get(m, n);
            let dx = if m + 1 < w { u.get(m + 1, n) - c } else { 0.0 };
            let dy = if n + 1 < h { u.get(m, n + 1) - c } else { 0.0 };
            acc += (dx * dx + dy * dy).sqrt();
        }
    }
    acc
}

/// Blow-up detection for time stepping. Non-finite samples always trip it;
/// for dissipative flows a single step that raises the total variation by
/// more than `max_tv_gain` times the initial total variation does as well.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityGuard {
    pub max_tv_gain: Option<f64>,
}

impl StabilityGuard {
    pub const FINITE_ONLY: StabilityGuard = StabilityGuard { max_tv_gain: None };

    pub fn for_pde(pde: Pde) -> Self {
        match pde {
            Pde::CahnHilliard => Self::FINITE_ONLY,
            _ => StabilityGuard {
                max_tv_gain: Some(0.01),
            },
        }
    }
}

pub(crate) struct GuardState {
    guard: StabilityGuard,
    tv0: f64,
    tv_prev: f64,
}

impl GuardState {
    pub(crate) fn new(guard: StabilityGuard, u0: &ImageGrid) -> Self {
        let tv0 = if guard.max_tv_gain.is_some() {
            total_variation(u0)
        } else {
            0.0
        };
        GuardState {
            guard,
            tv0,
            tv_prev: tv0,
        }
    }

    pub(crate) fn check(&mut self, step: usize, u: &ImageGrid) -> Result<()> {
        if let Some(i) = u.first_non_finite() {
            return Err(BladeError::Instability {
                step,
                reason: format!("non-finite sample at pixel ({}, {})", i % u.width(), i / u.width()),
            });
        }
        if let Some(gain) = self.guard.max_tv_gain {
            let tv = total_variation(u);
            if self.tv0 > 0.0 && tv - self.tv_prev > gain * self.tv0 {
                return Err(BladeError::Instability {
                    step,
                    reason: format!(
                        "total variation rose from {:.6e} to {:.6e} in one step (limit {:.3}% of initial {:.6e})",
                        self.tv_prev,
                        tv,
                        100.0 * gain,
                        self.tv0
                    ),
                });
            }
            self.tv_prev = tv;
        }
        Ok(())
    }
}

/// One step of the configured scheme.
pub fn scheme_step(u: &ImageGrid, cfg: &SchemeConfig) -> Result<ImageGrid> {
    match cfg.pde {
        Pde::TvFlow => Ok(tv_flow_step(u, cfg)),
        Pde::PeronaMalik => Ok(perona_malik_step(u, cfg)),
        Pde::Ced => ced_step(u, cfg),
        Pde::CahnHilliard => cahn_hilliard_step(u, cfg),
    }
}

/// Runs `steps` steps recording every frame, with the default guard of the
/// configured PDE.
pub fn run_reference(u0: &ImageGrid, cfg: &SchemeConfig, steps: usize) -> Result<FrameSequence> {
    run_reference_guarded(u0, cfg, steps, StabilityGuard::for_pde(cfg.pde))
}

pub fn run_reference_guarded(
    u0: &ImageGrid,
    cfg: &SchemeConfig,
    steps: usize,
    guard: StabilityGuard,
) -> Result<FrameSequence> {
    run_reference_sampled(u0, cfg, steps, 1, guard)
}

/// Like [`run_reference_guarded`] but keeps only every `every`th frame
/// (including the first), so the result has spacing `every * dt`.
pub fn run_reference_sampled(
    u0: &ImageGrid,
    cfg: &SchemeConfig,
    steps: usize,
    every: usize,
    guard: StabilityGuard,
) -> Result<FrameSequence> {
    cfg.validate()?;
    if every == 0 {
        return Err(BladeError::invalid("frame sampling interval must be >= 1"));
    }
    let u0 = u0.clone().with_dx(cfg.dx);
    let mut state = GuardState::new(guard, &u0);
    let ch = (cfg.pde == Pde::CahnHilliard).then(|| CahnHilliardSolver::new(u0.width(), u0.height(), cfg));
    let mut frames = Vec::with_capacity(steps / every + 1);
    let mut u = u0.clone();
    frames.push(u0);
    for k in 1..=steps {
        u = match &ch {
            Some(solver) => solver.step(&u)?,
            None => scheme_step(&u, cfg)?,
        };
        state.check(k, &u)?;
        if k % every == 0 {
            frames.push(u.clone());
        }
    }
    FrameSequence::new(frames, cfg.dt * every as f64)
}
