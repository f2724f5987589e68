use std::path::PathBuf;

use anyhow::{bail, Result};
use blade_core::io::{self, SequenceMeta};
use blade_core::refsolve::{run_reference_sampled, total_variation, StabilityGuard};
use blade_core::Pde;
use serde::Serialize;
use serde_json::json;

use crate::common::{load_scaled, save_scaled, DepthArg, PdeArg, SchemeArgs};
use crate::manifest::{manifest_path_for, RunManifest};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long, value_enum)]
    pub pde: PdeArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Only check for non-finite values, not for growing total variation.
    #[arg(long)]
    pub finite_only: bool,
    /// Intensity mapped to white; defaults to 255, or 1 for Cahn-Hilliard.
    #[arg(long)]
    pub peak: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every `every`-th frame as a sequence directory.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long, value_enum, default_value_t = DepthArg::Eight)]
    pub depth: DepthArg,
}

pub fn run(a: Args) -> Result<()> {
    let pde: Pde = a.pde.into();
    let cfg = a.scheme.config(pde, a.dt)?;
    let peak = a.peak.unwrap_or(pde.intensity_range().1);
    let guard = if a.finite_only {
        StabilityGuard::FINITE_ONLY
    } else {
        StabilityGuard::for_pde(pde)
    };
    let u0 = load_scaled(&a.input, peak)?;
    let every = if a.frames_dir.is_some() {
        a.every
    } else {
        a.steps.max(1)
    };
    if every == 0 || !a.steps.is_multiple_of(every) {
        bail!("--steps {} is not a multiple of --every {}", a.steps, every);
    }
    let seq = run_reference_sampled(&u0, &cfg, a.steps, every, guard)?;
    let mut man = RunManifest::new("solve", json!({ "args": &a, "scheme": cfg, "peak": peak }))?;
    man.input(&a.input)?;
    save_scaled(&a.out, seq.last(), peak, a.depth)?;
    man.output(&a.out)?;
    if let Some(dir) = &a.frames_dir {
        let meta = SequenceMeta {
            pde: pde.name().to_string(),
            dt: seq.dt(),
            dx: cfg.dx,
            step_count: a.steps,
            frames: 0,
            width: 0,
            height: 0,
            value_min: 0.0,
            value_max: 0.0,
            parameters: json!({ "scheme": cfg, "every": every, "peak": peak }),
        };
        let meta = io::write_sequence(dir, &seq, meta)?;
        for k in 0..meta.frames {
            man.output(&io::frame_path(dir, k))?;
        }
    }
    man.metric("initial_mean", u0.mean())?;
    man.metric("final_mean", seq.last().mean())?;
    man.metric("final_total_variation", total_variation(seq.last()))?;
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}
