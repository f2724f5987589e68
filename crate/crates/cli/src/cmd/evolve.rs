use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use blade_core::apps::color_apply;
use blade_core::integrate::evolve;
use blade_core::io::{self, SequenceMeta};
use blade_core::{ColorImage, Estimator, ImageGrid, Integrator, SequenceModel};
use serde::Serialize;
use serde_json::json;

use crate::common::{load_estimator, load_scaled, save_scaled, DepthArg, IntegratorArg};
use crate::manifest::{manifest_path_for, RunManifest};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub steps: usize,
    /// Time step; the frame spacing the bank was trained on is the natural choice.
    #[arg(long)]
    pub dt: f64,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Final image.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every frame as a sequence directory.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    /// Evolve RGB channels with filters selected on the luma.
    #[arg(long)]
    pub color: bool,
    /// Intensity mapped to white.
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
    #[arg(long, value_enum, default_value_t = DepthArg::Eight)]
    pub depth: DepthArg,
}

fn color_step(bank: &blade_core::FilterBank, integ: Integrator, dt: f64, u: &ColorImage) -> Result<ColorImage> {
    let axpy = |a: &ColorImage, s: f64, b: &ColorImage| -> Result<ColorImage> {
        let [br, bg, bb] = b.channels();
        let mut out = a.clone();
        out.r.add_scaled(s, br)?;
        out.g.add_scaled(s, bg)?;
        out.b.add_scaled(s, bb)?;
        Ok(out)
    };
    let k1 = color_apply(bank, u)?;
    Ok(match integ {
        Integrator::Euler => axpy(u, dt, &k1)?,
        Integrator::Midpoint => {
            let mid = axpy(u, 0.5 * dt, &k1)?;
            axpy(u, dt, &color_apply(bank, &mid)?)?
        }
    })
}

pub fn run(a: Args) -> Result<()> {
    let (est, integ) = load_estimator(&a.bank, a.integrator)?;
    let mut man = RunManifest::new("evolve", &a)?;
    man.input(&a.bank)?;
    man.input(&a.input)?;

    if a.color {
        let Estimator::Blade(bank) = &est else {
            bail!("--color needs a single-bank model");
        };
        let img = io::load_color(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
        let s = a.peak / 255.0;
        let mut u = img.try_map_channels(|c| Ok(c.scaled(s)))?;
        for k in 1..=a.steps {
            u = color_step(bank, integ, a.dt, &u)?;
            if let Some(i) = u.channels().iter().find_map(|c| c.first_non_finite()) {
                return Err(blade_core::BladeError::Instability {
                    step: k,
                    reason: format!("non-finite sample at index {i}"),
                }
                .into());
            }
        }
        let out = u.try_map_channels(|c| Ok(c.scaled(1.0 / s)))?;
        io::save_color(&a.out, &out, (0.0, 255.0), a.depth.into())?;
        man.output(&a.out)?;
        man.write(&manifest_path_for(&a.out))?;
        return Ok(());
    }

    let u0 = load_scaled(&a.input, a.peak)?;
    let model = SequenceModel::new(est, integ, a.dt)?;
    let seq = evolve(&model, &u0, a.steps)?;
    let drift = mean_drift(&u0, seq.frames());
    save_scaled(&a.out, seq.last(), a.peak, a.depth)?;
    man.output(&a.out)?;
    if let Some(dir) = &a.frames_dir {
        let meta = SequenceMeta {
            pde: "blade".into(),
            dt: a.dt,
            dx: u0.dx(),
            step_count: a.steps,
            frames: 0,
            width: 0,
            height: 0,
            value_min: 0.0,
            value_max: 0.0,
            parameters: json!({ "bank": a.bank.display().to_string(), "integrator": a.integrator }),
        };
        let meta = io::write_sequence(dir, &seq, meta)?;
        for k in 0..meta.frames {
            man.output(&io::frame_path(dir, k))?;
        }
    }
    man.metric("mean_drift", drift)?;
    man.metric("final_mean", seq.last().mean())?;
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}

/// Largest relative change of the image mean over the run.
pub fn mean_drift(u0: &ImageGrid, frames: &[ImageGrid]) -> f64 {
    let m0 = u0.mean();
    let scale = m0.abs().max(f64::MIN_POSITIVE);
    frames.iter().map(|f| (f.mean() - m0).abs() / scale).fold(0.0, f64::max)
}
