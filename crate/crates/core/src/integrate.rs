//! Sequence models: an estimator of the time derivative wrapped in an
//! explicit Euler or midpoint integrator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BladeError, Result};
use crate::features::{compute_selection, SelectionMap};
use crate::grid::{FrameSequence, ImageGrid};
use crate::net::{accumulate_backward, blade_apply, FilterBank};
use crate::refsolve::{GuardState, StabilityGuard};

/// Anything that maps a state `u` to an estimate of `du/dt`.
pub trait TimeDerivative {
    fn time_derivative(&self, u: &ImageGrid) -> Result<ImageGrid>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Midpoint,
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integrator::Euler => "euler",
            Integrator::Midpoint => "midpoint",
        })
    }
}

impl FromStr for Integrator {
    type Err = BladeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "midpoint" => Ok(Integrator::Midpoint),
            other => Err(BladeError::invalid(format!("unknown integrator '{other}'"))),
        }
    }
}

/// Learned derivative estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// `du/dt = BLADE(u)`.
    Blade(FilterBank),
    /// `du/dt` as the difference of learned edge fluxes.
    Flux { x: FilterBank, y: FilterBank },
}

/// Selection maps recorded for one estimator evaluation.
#[derive(Debug, Clone)]
pub struct Selections(Vec<SelectionMap>);

impl Selections {
    pub fn maps(&self) -> &[SelectionMap] {
        &self.0
    }
}

impl Estimator {
    pub fn banks(&self) -> Vec<&FilterBank> {
        match self {
            Estimator::Blade(b) => vec![b],
            Estimator::Flux { x, y } => vec![x, y],
        }
    }

    fn banks_mut(&mut self) -> Vec<&mut FilterBank> {
        match self {
            Estimator::Blade(b) => vec![b],
            Estimator::Flux { x, y } => vec![x, y],
        }
    }

    pub fn is_flux(&self) -> bool {
        matches!(self, Estimator::Flux { .. })
    }

    /// Total number of taps over all banks.
    pub fn num_params(&self) -> usize {
        self.banks().iter().map(|b| b.taps().len()).sum()
    }

    /// All taps concatenated bank by bank.
    pub fn params(&self) -> Vec<f64> {
        self.banks().iter().flat_map(|b| b.taps().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(BladeError::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for bank in self.banks_mut() {
            let n = bank.taps().len();
            bank.taps_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Selection maps computed from `u`; flux banks with identical selection
    /// configurations share one computation.
    pub fn select(&self, u: &ImageGrid) -> Result<Selections> {
        Ok(Selections(match self {
            Estimator::Blade(b) => vec![compute_selection(u, b.selection(), None)?],
            Estimator::Flux { x, y } => {
                let sx = compute_selection(u, x.selection(), None)?;
                let sy = if x.selection() == y.selection() {
                    sx.clone()
                } else {
                    compute_selection(u, y.selection(), None)?
                };
                vec![sx, sy]
            }
        }))
    }

    /// Evaluates the estimator with frozen selections.
    pub fn apply_selected(&self, sels: &Selections, u: &ImageGrid) -> Result<ImageGrid> {
        match self {
            Estimator::Blade(b) => blade_apply(b, &sels.0[0], u),
            Estimator::Flux { x, y } => {
                let gx = blade_apply(x, &sels.0[0], u)?;
                let gy = blade_apply(y, &sels.0[1], u)?;
                Ok(flux_divergence(gx, gy))
            }
        }
    }

    /// Adds `scale` times the adjoint of [`Estimator::apply_selected`] applied
    /// to `g` into `dparams` (same layout as [`Estimator::params`]) and `dz`.
    pub(crate) fn accumulate_adjoint(
        &self,
        sels: &Selections,
        u: &ImageGrid,
        g: &ImageGrid,
        scale: f64,
        dparams: Option<&mut [f64]>,
        dz: Option<&mut ImageGrid>,
    ) {
        match self {
            Estimator::Blade(b) => accumulate_backward(b, &sels.0[0], u, g, scale, dparams, dz),
            Estimator::Flux { x, y } => {
                let (gx, gy) = flux_divergence_adjoint(g);
                let nx = x.taps().len();
                let (px, py) = match dparams {
                    Some(p) => {
                        let (a, b) = p.split_at_mut(nx);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                match dz {
                    Some(dz) => {
                        accumulate_backward(x, &sels.0[0], u, &gx, scale, px, Some(&mut *dz));
                        accumulate_backward(y, &sels.0[1], u, &gy, scale, py, Some(dz));
                    }
                    None => {
                        accumulate_backward(x, &sels.0[0], u, &gx, scale, px, None);
                        accumulate_backward(y, &sels.0[1], u, &gy, scale, py, None);
                    }
                }
            }
        }
    }
}

impl TimeDerivative for Estimator {
    fn time_derivative(&self, u: &ImageGrid) -> Result<ImageGrid> {
        self.apply_selected(&self.select(u)?, u)
    }
}

impl TimeDerivative for FilterBank {
    fn time_derivative(&self, u: &ImageGrid) -> Result<ImageGrid> {
        crate::net::select_and_apply(self, u, None)
    }
}

/// Flux sum from edge fluxes: `gx(m, n)` crosses the edge between `(m, n)`
/// and `(m+1, n)`, `gy(m, n)` the edge between `(m, n)` and `(m, n+1)`.
/// Fluxes through the outer border are zeroed, so the result sums to zero.
pub fn flux_divergence(mut gx: ImageGrid, mut gy: ImageGrid) -> ImageGrid {
    let (w, h) = gx.dims();
    for n in 0..h {
        gx.set(w - 1, n, 0.0);
    }
    for m in 0..w {
        gy.set(m, h - 1, 0.0);
    }
    ImageGrid::from_fn(w, h, |m, n| {
        let left = if m > 0 { gx.get(m - 1, n) } else { 0.0 };
        let up = if n > 0 { gy.get(m, n - 1) } else { 0.0 };
        gx.get(m, n) - left + gy.get(m, n) - up
    })
    .with_dx(gx.dx())
}

/// Adjoint of [`flux_divergence`].
pub fn flux_divergence_adjoint(g: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let (w, h) = g.dims();
    let gx = ImageGrid::from_fn(w, h, |m, n| if m + 1 < w { g.get(m, n) - g.get(m + 1, n) } else { 0.0 });
    let gy = ImageGrid::from_fn(w, h, |m, n| if n + 1 < h { g.get(m, n) - g.get(m, n + 1) } else { 0.0 });
    (gx, gy)
}

/// Conservative estimator: learned fluxes differenced across cell edges.
pub fn flux_time_derivative(bank_x: &FilterBank, bank_y: &FilterBank, u: &ImageGrid) -> Result<ImageGrid> {
    let gx = crate::net::select_and_apply(bank_x, u, None)?;
    let gy = crate::net::select_and_apply(bank_y, u, None)?;
    Ok(flux_divergence(gx, gy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub estimator: Estimator,
    pub integrator: Integrator,
    pub dt: f64,
}

impl SequenceModel {
    pub fn new(estimator: Estimator, integrator: Integrator, dt: f64) -> Result<Self> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(BladeError::invalid(format!("dt must be finite and >= 0, got {dt}")));
        }
        Ok(SequenceModel {
            estimator,
            integrator,
            dt,
        })
    }

    pub fn step(&self, u: &ImageGrid) -> Result<ImageGrid> {
        step_with(&self.estimator, self.integrator, self.dt, u)
    }
}

pub fn euler_step(model: &SequenceModel, u: &ImageGrid) -> Result<ImageGrid> {
    step_with(&model.estimator, Integrator::Euler, model.dt, u)
}

pub fn midpoint_step(model: &SequenceModel, u: &ImageGrid) -> Result<ImageGrid> {
    step_with(&model.estimator, Integrator::Midpoint, model.dt, u)
}

/// One step of `integrator` for an arbitrary estimator.
pub fn step_with<E: TimeDerivative + ?Sized>(
    est: &E,
    integrator: Integrator,
    dt: f64,
    u: &ImageGrid,
) -> Result<ImageGrid> {
    let mut out = u.clone();
    match integrator {
        Integrator::Euler => out.add_scaled(dt, &est.time_derivative(u)?)?,
        Integrator::Midpoint => {
            let mut half = u.clone();
            half.add_scaled(0.5 * dt, &est.time_derivative(u)?)?;
            out.add_scaled(dt, &est.time_derivative(&half)?)?;
        }
    }
    Ok(out)
}

/// Repeated stepping with frame recording; non-finite samples abort with
/// the offending step index.
pub fn evolve(model: &SequenceModel, u0: &ImageGrid, steps: usize) -> Result<FrameSequence> {
    evolve_with(&model.estimator, model.integrator, model.dt, u0, steps)
}

pub fn evolve_with<E: TimeDerivative + ?Sized>(
    est: &E,
    integrator: Integrator,
    dt: f64,
    u0: &ImageGrid,
    steps: usize,
) -> Result<FrameSequence> {
    let mut guard = GuardState::new(StabilityGuard::FINITE_ONLY, u0);
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(u0.clone());
    for k in 1..=steps {
        let next = step_with(est, integrator, dt, frames.last().expect("non-empty"))?;
        guard.check(k, &next)?;
        frames.push(next);
    }
    // dt = 0 is a legal model but not a legal sequence spacing
    FrameSequence::new(frames, if dt > 0.0 { dt } else { f64::MIN_POSITIVE })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SelectionConfig;
    use crate::net::Footprint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    fn single(scale: f64) -> FilterBank {
        FilterBank::delta(Footprint::square5(), SelectionConfig::single(), scale)
    }

    struct Linear(f64);

    impl TimeDerivative for Linear {
        fn time_derivative(&self, u: &ImageGrid) -> Result<ImageGrid> {
            Ok(u.scaled(self.0))
        }
    }

    #[test]
    fn zero_bank_and_zero_dt_are_identity() {
        let u = noise(9, 8, 1);
        let zero = FilterBank::zeros(Footprint::square5(), SelectionConfig::structure_tensor_default());
        for integrator in [Integrator::Euler, Integrator::Midpoint] {
            let m = SequenceModel::new(Estimator::Blade(zero.clone()), integrator, 1.0).unwrap();
            assert_eq!(m.step(&u).unwrap(), u);
            let m = SequenceModel::new(Estimator::Blade(single(3.0)), integrator, 0.0).unwrap();
            assert_eq!(m.step(&u).unwrap(), u);
        }
        let m = SequenceModel::new(Estimator::Blade(zero), Integrator::Euler, 1.0).unwrap();
        let seq = evolve(&m, &u, 7).unwrap();
        assert!(seq.frames().iter().all(|f| f == &u));
    }

    #[test]
    fn delta_bank_scales() {
        let u = noise(6, 6, 2);
        let m = SequenceModel::new(Estimator::Blade(single(0.25)), Integrator::Euler, 1.0).unwrap();
        let out = euler_step(&m, &u).unwrap();
        for (a, b) in out.data().iter().zip(u.data()) {
            assert!((a - 1.25 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn midpoint_is_second_order_taylor() {
        let u = noise(5, 4, 3);
        let (a, dt) = (-0.7, 0.3);
        let out = step_with(&Linear(a), Integrator::Midpoint, dt, &u).unwrap();
        let f = 1.0 + a * dt + (a * dt) * (a * dt) / 2.0;
        for (o, x) in out.data().iter().zip(u.data()) {
            assert!((o - f * x).abs() < 1e-14);
        }
    }

    #[test]
    fn midpoint_matches_euler_for_constant_slope() {
        // a constant input gives a constant estimate: state-independent slope
        let u = ImageGrid::filled(8, 8, 4.0);
        let bank = single(0.5);
        let e = SequenceModel::new(Estimator::Blade(bank.clone()), Integrator::Euler, 0.2).unwrap();
        let mid = SequenceModel::new(Estimator::Blade(bank), Integrator::Midpoint, 0.2).unwrap();
        let one = euler_step(&e, &u).unwrap();
        assert!(one.data().iter().all(|&v| (v - 4.4).abs() < 1e-14));
        // the midpoint stage sees 4.2, not 4.0: both differ only by that stage
        let two = midpoint_step(&mid, &u).unwrap();
        assert!(two.data().iter().all(|&v| (v - (4.0 + 0.2 * 0.5 * 4.2)).abs() < 1e-14));
    }

    #[test]
    fn euler_midpoint_gap_is_second_order() {
        let u = noise(4, 4, 4);
        let gap = |dt: f64| {
            let e = step_with(&Linear(0.8), Integrator::Euler, dt, &u).unwrap();
            let m = step_with(&Linear(0.8), Integrator::Midpoint, dt, &u).unwrap();
            e.sq_dist(&m).unwrap().sqrt()
        };
        let ratio = gap(0.1) / gap(0.05);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn flux_hand_telescoping() {
        // row of five pixels with unit interior flux to the right
        let gx = ImageGrid::filled(5, 1, 1.0);
        let gy = ImageGrid::zeros(5, 1);
        let d = flux_divergence(gx, gy);
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn flux_adjoint_dot_test() {
        let gx = noise(7, 5, 5);
        let gy = noise(7, 5, 6);
        let v = noise(7, 5, 7);
        let lhs = flux_divergence(gx.clone(), gy.clone()).dot(&v).unwrap();
        let (ax, ay) = flux_divergence_adjoint(&v);
        let rhs = gx.dot(&ax).unwrap() + gy.dot(&ay).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn flux_model_conserves_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SelectionConfig::structure_tensor_default();
        let mk = |rng: &mut ChaCha8Rng| {
            let n = cfg.num_filters() * 25;
            FilterBank::new(
                Footprint::square5(),
                cfg.clone(),
                (0..n).map(|_| rng.random_range(-0.02..0.02)).collect(),
            )
            .unwrap()
        };
        let est = Estimator::Flux {
            x: mk(&mut rng),
            y: mk(&mut rng),
        };
        let u0 = noise(12, 10, 9);
        let m = SequenceModel::new(est, Integrator::Euler, 0.5).unwrap();
        let seq = evolve(&m, &u0, 50).unwrap();
        for f in seq.frames() {
            assert!((f.sum() - u0.sum()).abs() <= 1e-12 * u0.sum());
        }
    }

    #[test]
    fn evolve_reports_non_finite_step() {
        let u0 = noise(6, 6, 10);
        let m = SequenceModel::new(Estimator::Blade(single(1e200)), Integrator::Euler, 1e200).unwrap();
        match evolve(&m, &u0, 10) {
            Err(BladeError::Instability { step, .. }) => assert!(step >= 1),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn params_round_trip() {
        let cfg = SelectionConfig::single();
        let mut est = Estimator::Flux {
            x: FilterBank::zeros(Footprint::new(3, 3).unwrap(), cfg.clone()),
            y: FilterBank::zeros(Footprint::new(3, 3).unwrap(), cfg),
        };
        let p: Vec<f64> = (0..18).map(|i| i as f64).collect();
        est.set_params(&p).unwrap();
        assert_eq!(est.params(), p);
        assert!(est.set_params(&p[..3]).is_err());
    }
}
