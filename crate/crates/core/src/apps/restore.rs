//! Fidelity-regularized restoration: deconvolution and upscaling with a
//! trained estimator as the regularizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;

use crate::error::{BladeError, Result};
use crate::grid::{convolve, convolve_adjoint, subsample, zero_upsample, ImageGrid, Kernel};
use crate::integrate::TimeDerivative;
use crate::net::{FilterBank, Footprint};
use crate::spectral::Fft2;

/// `f = subsample(psf * u) + noise` with fidelity weight `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationModel {
    psf: Kernel,
    factor: usize,
    lambda: f64,
}

impl DegradationModel {
    pub fn new(psf: Kernel, factor: usize, lambda: f64) -> Result<Self> {
        if (psf.sum() - 1.0).abs() > 1e-10 {
            return Err(BladeError::invalid(format!("psf must sum to 1, sums to {}", psf.sum())));
        }
        if factor == 0 {
            return Err(BladeError::invalid("subsample factor must be >= 1"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(BladeError::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(DegradationModel { psf, factor, lambda })
    }

    pub fn gaussian(sigma: f64, factor: usize, lambda: f64) -> Result<Self> {
        Self::new(Kernel::gaussian(sigma)?, factor, lambda)
    }

    pub fn psf(&self) -> &Kernel {
        &self.psf
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// `A u` with replicate boundary.
    pub fn forward(&self, u: &ImageGrid) -> Result<ImageGrid> {
        subsample(&convolve(u, &self.psf), self.factor)
    }

    /// Exact adjoint of [`DegradationModel::forward`].
    pub fn adjoint(&self, v: &ImageGrid) -> ImageGrid {
        convolve_adjoint(&zero_upsample(v, self.factor), &self.psf)
    }

    /// `lambda A^T (f - A u)`.
    pub fn fidelity_force(&self, u: &ImageGrid, f: &ImageGrid) -> Result<ImageGrid> {
        let au = self.forward(u)?;
        f.ensure_same_dims(&au)?;
        let resid = f.zip_map(&au, |a, b| a - b)?;
        Ok(self.adjoint(&resid).scaled(self.lambda))
    }
}

/// `A u` plus white Gaussian noise drawn from a ChaCha8 stream seeded by
/// `seed`, in row-major order.
pub fn degrade(dm: &DegradationModel, u: &ImageGrid, noise_sigma: f64, seed: u64) -> Result<ImageGrid> {
    let mut f = dm.forward(u)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| BladeError::invalid(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in f.data_mut() {
            *v += normal.sample(&mut rng);
        }
    } else if noise_sigma < 0.0 {
        return Err(BladeError::invalid("noise sigma must be >= 0"));
    }
    Ok(f)
}

/// `u + dt (E(u) + lambda A^T (f - A u))`. With `lambda = 0` this is
/// exactly one explicit Euler step of the estimator.
pub fn restore_step<E: TimeDerivative + ?Sized>(
    est: &E,
    u: &ImageGrid,
    f: &ImageGrid,
    dm: &DegradationModel,
    dt: f64,
) -> Result<ImageGrid> {
    let mut du = est.time_derivative(u)?;
    if dm.lambda != 0.0 {
        du.add_scaled(1.0, &dm.fidelity_force(u, f)?)?;
    }
    let mut out = u.clone();
    out.add_scaled(dt, &du)?;
    Ok(out)
}

/// Restoration started from `init`.
pub fn restore<E: TimeDerivative + ?Sized>(
    est: &E,
    init: &ImageGrid,
    f: &ImageGrid,
    dm: &DegradationModel,
    dt: f64,
    steps: usize,
) -> Result<ImageGrid> {
    let mut u = init.clone();
    for _ in 0..steps {
        u = restore_step(est, &u, f, dm, dt)?;
    }
    Ok(u)
}

/// Folds `-lambda psf~ * psf` into every filter of the bank. Together with
/// the constant [`deconv_constant`] the absorbed bank reproduces
/// [`restore_step`] for a pure blur (away from the border).
pub fn absorb_deconv(bank: &FilterBank, dm: &DegradationModel) -> Result<FilterBank> {
    if dm.factor != 1 {
        return Err(BladeError::invalid(
            "only a pure blur (factor 1) can be absorbed into the filters",
        ));
    }
    let corr = dm.psf.autocorrelation();
    let fp = bank.footprint();
    // drop the all-zero rim of the correction so a delta psf fits anywhere
    let (mut rx, mut ry) = corr.radius();
    while rx > 0 && (-ry..=ry).all(|dy| corr.at(rx, dy) == 0.0 && corr.at(-rx, dy) == 0.0) {
        rx -= 1;
    }
    while ry > 0 && (-rx..=rx).all(|dx| corr.at(dx, ry) == 0.0 && corr.at(dx, -ry) == 0.0) {
        ry -= 1;
    }
    let (bx, by) = fp.radius();
    if rx > bx || ry > by {
        return Err(BladeError::FootprintOverflow {
            needed: (2 * rx as usize + 1, 2 * ry as usize + 1),
            available: (fp.width(), fp.height()),
        });
    }
    let mut out = bank.clone();
    if dm.lambda == 0.0 {
        return Ok(out);
    }
    let offsets: Vec<(isize, isize)> = fp.offsets().collect();
    for k in 0..out.num_filters() {
        let filt = out.filter_mut(k);
        for (t, &(dx, dy)) in offsets.iter().enumerate() {
            filt[t] -= dm.lambda * corr.at(dx, dy);
        }
    }
    Ok(out)
}

/// Footprint large enough to absorb the deconvolution correction of `dm`
/// into a bank with footprint `fp`.
pub fn deconv_footprint(fp: Footprint, dm: &DegradationModel) -> Result<Footprint> {
    let (rx, ry) = dm.psf.autocorrelation().radius();
    let (bx, by) = fp.radius();
    Footprint::new(2 * rx.max(bx) as usize + 1, 2 * ry.max(by) as usize + 1)
}

/// `lambda psf~ * f`, the constant force of the absorbed deconvolution.
pub fn deconv_constant(f: &ImageGrid, dm: &DegradationModel) -> ImageGrid {
    convolve_adjoint(f, &dm.psf).scaled(dm.lambda)
}

/// One step with absorbed filters: `u + dt (E(u) + c)`.
pub fn absorbed_step<E: TimeDerivative + ?Sized>(
    est: &E,
    u: &ImageGrid,
    constant: &ImageGrid,
    dt: f64,
) -> Result<ImageGrid> {
    let mut du = est.time_derivative(u)?;
    du.add_scaled(1.0, constant)?;
    let mut out = u.clone();
    out.add_scaled(dt, &du)?;
    Ok(out)
}

/// Lanczos kernel with `a` lobes.
pub fn lanczos(x: f64, a: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x.abs() >= a || x.fract() == 0.0 {
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        a * px.sin() * (px / a).sin() / (px * px)
    }
}

fn lanczos_weights_1d(len_out: usize, len_in: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    (0..len_out)
        .map(|i| {
            // output sample i sits at input coordinate i / factor, matching
            // the subsampling phase of the degradation model
            let x = i as f64 / factor as f64;
            let base = x.floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(6);
            let mut sum = 0.0;
            for j in base - 2..=base + 3 {
                let wgt = lanczos(x - j as f64, 3.0);
                if wgt == 0.0 {
                    continue;
                }
                let jc = j.clamp(0, len_in as isize - 1) as usize;
                taps.push((jc, wgt));
                sum += wgt;
            }
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

/// Separable Lanczos-3 interpolation by an integer factor, replicate boundary.
pub fn lanczos_upscale(f: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 {
        return Err(BladeError::invalid("upscale factor must be >= 1"));
    }
    let (w, h) = f.dims();
    let (ow, oh) = (w * factor, h * factor);
    let wx = lanczos_weights_1d(ow, w, factor);
    let wy = lanczos_weights_1d(oh, h, factor);
    let mut rows = ImageGrid::zeros(ow, h);
    for n in 0..h {
        for (m, taps) in wx.iter().enumerate() {
            rows.set(m, n, taps.iter().map(|&(j, c)| c * f.get(j, n)).sum());
        }
    }
    let mut out = ImageGrid::zeros(ow, oh);
    for (n, taps) in wy.iter().enumerate() {
        for m in 0..ow {
            out.set(m, n, taps.iter().map(|&(j, c)| c * rows.get(m, j)).sum());
        }
    }
    Ok(out.with_dx(f.dx() / factor as f64))
}

/// Lanczos-3 initialization followed by `steps` fidelity-regularized steps.
pub fn upscale<E: TimeDerivative + ?Sized>(
    est: &E,
    f: &ImageGrid,
    dm: &DegradationModel,
    dt: f64,
    steps: usize,
) -> Result<ImageGrid> {
    let init = lanczos_upscale(f, dm.factor)?;
    restore(est, &init, f, dm, dt, steps)
}

/// Periodic degradation model in the Fourier domain: projection onto the
/// null space of `A`, and data-consistent initialization.
pub struct SpectralProjector {
    fft: Fft2,
    factor: usize,
    coarse: (usize, usize),
    /// DFT of the periodized psf on the fine grid.
    psf_hat: Vec<Complex64>,
    /// Per coarse frequency, `sum_q |psf_hat(k_q)|^2` over its aliases.
    energy: Vec<f64>,
    epsilon: f64,
}

impl SpectralProjector {
    /// Relative threshold below which an alias block counts as singular.
    pub const EPSILON: f64 = 1e-12;

    pub fn new(fine_width: usize, fine_height: usize, dm: &DegradationModel) -> Result<Self> {
        let s = dm.factor;
        if !fine_width.is_multiple_of(s) || !fine_height.is_multiple_of(s) {
            return Err(BladeError::NotDivisible {
                width: fine_width,
                height: fine_height,
                factor: s,
            });
        }
        let (w, h) = (fine_width, fine_height);
        let mut kern = vec![0.0; w * h];
        let (rx, ry) = dm.psf.radius();
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let m = dx.rem_euclid(w as isize) as usize;
                let n = dy.rem_euclid(h as isize) as usize;
                kern[n * w + m] += dm.psf.at(dx, dy);
            }
        }
        let fft = Fft2::new(w, h);
        let psf_hat = fft.forward_real(&kern);
        let coarse = (w / s, h / s);
        let mut energy = vec![0.0; coarse.0 * coarse.1];
        for (i, c) in psf_hat.iter().enumerate() {
            let (m, n) = (i % w, i / w);
            energy[(n % coarse.1) * coarse.0 + m % coarse.0] += c.norm_sqr();
        }
        let max = energy.iter().cloned().fold(0.0, f64::max);
        Ok(SpectralProjector {
            fft,
            factor: s,
            coarse,
            psf_hat,
            energy,
            epsilon: Self::EPSILON * max,
        })
    }

    fn coarse_index(&self, i: usize) -> usize {
        let w = self.fft.dims().0;
        let (m, n) = (i % w, i / w);
        (n % self.coarse.1) * self.coarse.0 + m % self.coarse.0
    }

    /// Per coarse frequency, `sum_q psf_hat(k_q) v_hat(k_q)`.
    fn alias_sums(&self, v_hat: &[Complex64]) -> Vec<Complex64> {
        let mut sums = vec![Complex64::new(0.0, 0.0); self.energy.len()];
        for (i, (p, v)) in self.psf_hat.iter().zip(v_hat).enumerate() {
            sums[self.coarse_index(i)] += p * v;
        }
        sums
    }

    /// Periodic `A u = subsample(psf * u)`, evaluated spectrally.
    pub fn forward(&self, u: &ImageGrid) -> Result<ImageGrid> {
        self.check(u)?;
        let u_hat = self.fft.forward_real(u.data());
        let sums = self.alias_sums(&u_hat);
        let s2 = (self.factor * self.factor) as f64;
        let coarse_fft = Fft2::new(self.coarse.0, self.coarse.1);
        let data = coarse_fft.inverse_real(sums.into_iter().map(|c| c / s2).collect());
        ImageGrid::new(self.coarse.0, self.coarse.1, data)
    }

    fn check(&self, u: &ImageGrid) -> Result<()> {
        if u.dims() != self.fft.dims() {
            return Err(BladeError::DimensionMismatch {
                expected: self.fft.dims(),
                found: u.dims(),
            });
        }
        Ok(())
    }

    /// Orthogonal projection onto `{v : A v = 0}`.
    pub fn project(&self, v: &ImageGrid) -> Result<ImageGrid> {
        self.check(v)?;
        let mut v_hat = self.fft.forward_real(v.data());
        let sums = self.alias_sums(&v_hat);
        for (i, vh) in v_hat.iter_mut().enumerate() {
            let c = self.coarse_index(i);
            if self.energy[c] > self.epsilon {
                *vh -= self.psf_hat[i].conj() * sums[c] / self.energy[c];
            }
        }
        let data = self.fft.inverse_real(v_hat);
        Ok(ImageGrid::new(v.width(), v.height(), data)?.with_dx(v.dx()))
    }

    /// `init` plus the minimum-norm correction making `A u = f`. Blocks whose
    /// psf energy is below the singular threshold use a regularized inverse.
    pub fn make_consistent(&self, init: &ImageGrid, f: &ImageGrid) -> Result<ImageGrid> {
        self.check(init)?;
        if f.dims() != self.coarse {
            return Err(BladeError::DimensionMismatch {
                expected: self.coarse,
                found: f.dims(),
            });
        }
        let coarse_fft = Fft2::new(self.coarse.0, self.coarse.1);
        let au = self.forward(init)?;
        let resid = f.zip_map(&au, |a, b| a - b)?;
        let r_hat = coarse_fft.forward_real(resid.data());
        let mut u_hat = self.fft.forward_real(init.data());
        let s2 = (self.factor * self.factor) as f64;
        for (i, uh) in u_hat.iter_mut().enumerate() {
            let c = self.coarse_index(i);
            let scale = s2
                / (self.energy[c]
                    + if self.energy[c] > self.epsilon {
                        0.0
                    } else {
                        self.epsilon
                    });
            *uh += self.psf_hat[i].conj() * r_hat[c] * scale;
        }
        let data = self.fft.inverse_real(u_hat);
        Ok(ImageGrid::new(init.width(), init.height(), data)?.with_dx(init.dx()))
    }
}

/// `u + dt P0(E(u))`.
pub fn project_upscale_step<E: TimeDerivative + ?Sized>(
    est: &E,
    u: &ImageGrid,
    proj: &SpectralProjector,
    dt: f64,
) -> Result<ImageGrid> {
    let du = proj.project(&est.time_derivative(u)?)?;
    let mut out = u.clone();
    out.add_scaled(dt, &du)?;
    Ok(out)
}

/// Noise-free upscaling: Lanczos interpolation made exactly consistent with
/// the data, then evolved inside the consistent set.
pub fn project_upscale<E: TimeDerivative + ?Sized>(
    est: &E,
    f: &ImageGrid,
    dm: &DegradationModel,
    dt: f64,
    steps: usize,
) -> Result<ImageGrid> {
    let (w, h) = (f.width() * dm.factor, f.height() * dm.factor);
    let proj = SpectralProjector::new(w, h, dm)?;
    let mut u = proj.make_consistent(&lanczos_upscale(f, dm.factor)?, f)?;
    for _ in 0..steps {
        u = project_upscale_step(est, &u, &proj, dt)?;
    }
    Ok(u)
}
