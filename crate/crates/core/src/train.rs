//! Target-sequence preparation and unrolled training of sequence models.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BladeError, Result};
use crate::features::compute_selection;
use crate::grid::{downscale_area, FrameSequence, ImageGrid};
use crate::integrate::{Estimator, Integrator, Selections, SequenceModel};
use crate::net::FilterBank;
use crate::refsolve::{run_reference_sampled, SchemeConfig, StabilityGuard};

/// One input frame followed by the frames the model should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub input: ImageGrid,
    pub targets: Vec<ImageGrid>,
    pub dt: f64,
}

impl TrainingWindow {
    pub fn new(input: ImageGrid, targets: Vec<ImageGrid>, dt: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(BladeError::invalid("a training window needs at least one target"));
        }
        for t in &targets {
            input.ensure_same_dims(t)?;
        }
        if !(dt > 0.0) {
            return Err(BladeError::invalid(format!("window dt must be > 0, got {dt}")));
        }
        Ok(TrainingWindow { input, targets, dt })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Input followed by all targets.
    pub fn frames(&self) -> impl Iterator<Item = &ImageGrid> {
        std::iter::once(&self.input).chain(self.targets.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub unroll_steps: usize,
    /// Adam step size at the first iteration.
    pub learning_rate: f64,
    /// Step size at the last iteration; interpolated geometrically.
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub spatial_factor: usize,
    pub temporal_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            unroll_steps: 10,
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            iterations: 10_000,
            batch_size: 8,
            seed: 0,
            spatial_factor: 4,
            temporal_factor: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll_steps == 0 || self.spatial_factor == 0 || self.temporal_factor == 0 {
            return Err(BladeError::invalid(
                "unroll_steps, spatial_factor and temporal_factor must be >= 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(BladeError::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(BladeError::invalid("learning rates must be > 0"));
        }
        Ok(())
    }

    fn learning_rate_at(&self, it: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let t = it as f64 / (self.iterations - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(t)
    }
}

/// Reference run at high resolution, every `M`th frame kept and
/// area-downscaled by the spatial factor.
pub fn make_target_sequence(
    u0_hr: &ImageGrid,
    cfg: &SchemeConfig,
    train_cfg: &TrainConfig,
    steps_hr: usize,
) -> Result<FrameSequence> {
    let factor = train_cfg.spatial_factor;
    let every = train_cfg.temporal_factor;
    if factor == 0 || every == 0 {
        return Err(BladeError::invalid("factors must be >= 1"));
    }
    if !u0_hr.width().is_multiple_of(factor) || !u0_hr.height().is_multiple_of(factor) {
        return Err(BladeError::NotDivisible {
            width: u0_hr.width(),
            height: u0_hr.height(),
            factor,
        });
    }
    if !steps_hr.is_multiple_of(every) {
        return Err(BladeError::invalid(format!(
            "steps_hr = {steps_hr} is not divisible by the temporal factor {every}"
        )));
    }
    let hr = run_reference_sampled(u0_hr, cfg, steps_hr, every, StabilityGuard::for_pde(cfg.pde))?;
    let frames = hr
        .frames()
        .iter()
        .map(|f| downscale_area(f, factor))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, hr.dt())
}

/// Windows of `unroll + 1` consecutive frames starting every `stride` frames.
pub fn windows_from_sequence(seq: &FrameSequence, unroll: usize, stride: usize) -> Result<Vec<TrainingWindow>> {
    if unroll == 0 || stride == 0 {
        return Err(BladeError::invalid("unroll and stride must be >= 1"));
    }
    let frames = seq.frames();
    let mut out = Vec::new();
    let mut start = 0;
    while start + unroll < frames.len() {
        out.push(TrainingWindow::new(
            frames[start].clone(),
            frames[start + 1..=start + unroll].to_vec(),
            seq.dt(),
        )?);
        start += stride;
    }
    Ok(out)
}

struct StepTape {
    u: ImageGrid,
    sels: Selections,
    /// Midpoint stage and its selections.
    mid: Option<(ImageGrid, Selections)>,
}

fn check_window(model: &SequenceModel, w: &TrainingWindow) -> Result<()> {
    if (model.dt - w.dt).abs() > 1e-12 * w.dt.max(1.0) {
        return Err(BladeError::invalid(format!(
            "model dt {} differs from window dt {}",
            model.dt, w.dt
        )));
    }
    Ok(())
}

fn non_finite(step: usize, u: &ImageGrid) -> Result<()> {
    match u.first_non_finite() {
        Some(i) => Err(BladeError::Instability {
            step,
            reason: format!(
                "non-finite intermediate at pixel ({}, {})",
                i % u.width(),
                i / u.width()
            ),
        }),
        None => Ok(()),
    }
}

/// Forward unroll recording the selections and states needed by the
/// reverse pass. Returns the tape and the predictions `u^(1..=K)`.
fn forward_tape(model: &SequenceModel, w: &TrainingWindow) -> Result<(Vec<StepTape>, Vec<ImageGrid>)> {
    check_window(model, w)?;
    let est = &model.estimator;
    let dt = model.dt;
    let mut tape = Vec::with_capacity(w.len());
    let mut preds = Vec::with_capacity(w.len());
    let mut u = w.input.clone();
    for k in 1..=w.len() {
        let sels = est.select(&u)?;
        let du = est.apply_selected(&sels, &u)?;
        let (next, mid) = match model.integrator {
            Integrator::Euler => {
                let mut next = u.clone();
                next.add_scaled(dt, &du)?;
                (next, None)
            }
            Integrator::Midpoint => {
                let mut v = u.clone();
                v.add_scaled(0.5 * dt, &du)?;
                non_finite(k, &v)?;
                let vsels = est.select(&v)?;
                let dv = est.apply_selected(&vsels, &v)?;
                let mut next = u.clone();
                next.add_scaled(dt, &dv)?;
                (next, Some((v, vsels)))
            }
        };
        non_finite(k, &next)?;
        tape.push(StepTape { u, sels, mid });
        preds.push(next.clone());
        u = next;
    }
    Ok((tape, preds))
}

/// Summed squared error of the unrolled predictions against the targets.
pub fn unrolled_loss(model: &SequenceModel, w: &TrainingWindow) -> Result<f64> {
    let (_, preds) = forward_tape(model, w)?;
    let mut loss = 0.0;
    for (p, t) in preds.iter().zip(&w.targets) {
        loss += p.sq_dist(t)?;
    }
    Ok(loss)
}

/// Selection indices used at each evaluation of the estimator during the
/// unroll, in evaluation order. Useful to detect whether a perturbation
/// crossed a quantization boundary.
pub fn unrolled_selections(model: &SequenceModel, w: &TrainingWindow) -> Result<Vec<Vec<u32>>> {
    let (tape, _) = forward_tape(model, w)?;
    let mut out = Vec::new();
    for step in &tape {
        out.extend(step.sels.maps().iter().map(|s| s.indices().to_vec()));
        if let Some((_, vs)) = &step.mid {
            out.extend(vs.maps().iter().map(|s| s.indices().to_vec()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowGradient {
    pub loss: f64,
    /// Same layout as [`Estimator::params`].
    pub params: Vec<f64>,
}

/// Reverse-mode gradient of [`unrolled_loss`] with respect to all taps, the
/// selections held at the values recorded during the forward pass.
pub fn unrolled_gradient(model: &SequenceModel, w: &TrainingWindow) -> Result<WindowGradient> {
    let (tape, preds) = forward_tape(model, w)?;
    let est = &model.estimator;
    let dt = model.dt;
    let mut dp = vec![0.0; est.num_params()];
    let mut loss = 0.0;
    let mut g = w.input.zeros_like();
    for k in (0..tape.len()).rev() {
        let resid = preds[k].zip_map(&w.targets[k], |a, b| a - b)?;
        loss += resid.dot(&resid)?;
        g.add_scaled(2.0, &resid)?;
        let step = &tape[k];
        match &step.mid {
            None => {
                let mut gz = g.zeros_like();
                est.accumulate_adjoint(&step.sels, &step.u, &g, dt, Some(&mut dp), Some(&mut gz));
                g.add_scaled(1.0, &gz)?;
            }
            Some((v, vsels)) => {
                let mut gv = g.zeros_like();
                est.accumulate_adjoint(vsels, v, &g, dt, Some(&mut dp), Some(&mut gv));
                let mut gu = g.zeros_like();
                est.accumulate_adjoint(&step.sels, &step.u, &gv, 0.5 * dt, Some(&mut dp), Some(&mut gu));
                g.add_scaled(1.0, &gv)?;
                g.add_scaled(1.0, &gu)?;
            }
        }
    }
    Ok(WindowGradient { loss, params: dp })
}

/// Per-bucket normal equations `A^T A x = A^T b` for independent linear
/// least-squares problems of equal dimension.
#[derive(Debug, Clone)]
pub(crate) struct BucketNormalEquations {
    dim: usize,
    ata: Vec<f64>,
    atb: Vec<f64>,
    counts: Vec<usize>,
}

impl BucketNormalEquations {
    pub(crate) fn new(buckets: usize, dim: usize) -> Self {
        BucketNormalEquations {
            dim,
            ata: vec![0.0; buckets * dim * dim],
            atb: vec![0.0; buckets * dim],
            counts: vec![0; buckets],
        }
    }

    pub(crate) fn add_row(&mut self, bucket: usize, row: &[f64], target: f64) {
        let d = self.dim;
        let a = &mut self.ata[bucket * d * d..(bucket + 1) * d * d];
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let line = &mut a[i * d..(i + 1) * d];
            for j in 0..d {
                line[j] += ri * row[j];
            }
        }
        let b = &mut self.atb[bucket * d..(bucket + 1) * d];
        for i in 0..d {
            b[i] += row[i] * target;
        }
        self.counts[bucket] += 1;
    }

    pub(crate) fn merge(&mut self, other: &BucketNormalEquations) {
        self.ata.iter_mut().zip(&other.ata).for_each(|(a, b)| *a += b);
        self.atb.iter_mut().zip(&other.atb).for_each(|(a, b)| *a += b);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Solves every bucket with Tikhonov damping `ridge * mean(diag)`;
    /// buckets without rows get zero solutions.
    pub(crate) fn solve(&self, ridge: f64) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.counts.len() * d];
        for (k, &count) in self.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let mut a = DMatrix::from_row_slice(d, d, &self.ata[k * d * d..(k + 1) * d * d]);
            let mean_diag = a.diagonal().mean();
            let damp = ridge * mean_diag + 1e-300;
            for i in 0..d {
                a[(i, i)] += damp;
            }
            let b = DVector::from_column_slice(&self.atb[k * d..(k + 1) * d]);
            let x = match a.clone().cholesky() {
                Some(ch) => ch.solve(&b),
                None => match a.svd(true, true).solve(&b, 1e-12) {
                    Ok(x) => x,
                    Err(_) => continue,
                },
            };
            if x.iter().all(|v| v.is_finite()) {
                out[k * d..(k + 1) * d].copy_from_slice(x.as_slice());
            }
        }
        out
    }
}

/// Teacher-forced single-step fit: for every window and step, regresses
/// `(u^(k+1) - u^(k)) / dt` on the footprint patches of `u^(k)`, separately
/// for each selection bucket. A cheap warm start for unrolled training.
pub fn least_squares_fit(template: &FilterBank, windows: &[TrainingWindow], ridge: f64) -> Result<FilterBank> {
    if windows.is_empty() {
        return Err(BladeError::invalid("least-squares fit needs at least one window"));
    }
    let fp = template.footprint();
    let buckets = template.num_filters();
    let offsets: Vec<(isize, isize)> = fp.offsets().collect();
    const CHUNK: usize = 4;
    let partials: Vec<Result<BucketNormalEquations>> = windows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ne = BucketNormalEquations::new(buckets, fp.area());
            let mut row = vec![0.0; fp.area()];
            for w in chunk {
                let frames: Vec<&ImageGrid> = w.frames().collect();
                for pair in frames.windows(2) {
                    let (u, next) = (pair[0], pair[1]);
                    let sel = compute_selection(u, template.selection(), None)?;
                    for n in 0..u.height() {
                        for m in 0..u.width() {
                            for (t, &(ox, oy)) in offsets.iter().enumerate() {
                                row[t] = u.sample_extended(m as isize + ox, n as isize + oy);
                            }
                            let target = (next.get(m, n) - u.get(m, n)) / w.dt;
                            ne.add_row(sel.get(m, n), &row, target);
                        }
                    }
                }
            }
            Ok(ne)
        })
        .collect();
    let mut total = BucketNormalEquations::new(buckets, fp.area());
    for p in partials {
        total.merge(&p?);
    }
    FilterBank::new(fp, template.selection().clone(), total.solve(ridge))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: SequenceModel,
    /// Mean window loss of each iteration's batch, before its update.
    pub loss_curve: Vec<f64>,
}

/// Adam on the mean unrolled window loss over seeded random mini-batches.
/// Window gradients are evaluated in parallel and summed in batch order, so
/// results do not depend on the number of worker threads.
pub fn train(dataset: &[TrainingWindow], cfg: &TrainConfig, init: SequenceModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(BladeError::invalid("training dataset is empty"));
    }
    for w in dataset {
        if w.len() != cfg.unroll_steps {
            return Err(BladeError::invalid(format!(
                "window has {} targets but unroll_steps = {}",
                w.len(),
                cfg.unroll_steps
            )));
        }
    }
    let mut model = init;
    let mut params = model.estimator.params();
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(dataset.len());
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = sample(&mut rng, dataset.len(), batch).into_vec();
        let grads: Vec<Result<WindowGradient>> = idx
            .par_iter()
            .map(|&i| unrolled_gradient(&model, &dataset[i]))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for g in grads {
            let g = g?;
            loss += g.loss;
            grad.iter_mut().zip(&g.params).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(BladeError::Divergence { iteration: it, loss });
        }
        curve.push(loss);
        let lr = cfg.learning_rate_at(it);
        let t = (it + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for j in 0..params.len() {
            let gj = grad[j] * inv;
            m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * gj;
            m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * gj * gj;
            params[j] -= lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + cfg.adam_epsilon);
        }
        model.estimator.set_params(&params)?;
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

/// Convenience: a zero-initialized plain BLADE Euler model.
pub fn zero_model(template: &FilterBank, dt: f64) -> Result<SequenceModel> {
    let zero = FilterBank::zeros(template.footprint(), template.selection().clone());
    SequenceModel::new(Estimator::Blade(zero), Integrator::Euler, dt)
}
