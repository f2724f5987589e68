use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use blade_core::grid::{mean_ssim, psnr};
use blade_core::integrate::evolve;
use blade_core::io;
use blade_core::{FrameSequence, Pde, SequenceModel};
use serde::Serialize;

use crate::common::{load_estimator, load_scaled, IntegratorArg};
use crate::manifest::{manifest_path_for, RunManifest};

/// Reported PSNR of identical frames.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub reference_seq: PathBuf,
    /// Sequence directory to compare.
    #[arg(long, conflicts_with = "bank")]
    pub test_seq: Option<PathBuf>,
    /// Evolve this bank from the reference's first frame instead.
    #[arg(long, required_unless_present = "test_seq")]
    pub bank: Option<PathBuf>,
    /// Starting image for --bank; defaults to the reference's first frame.
    #[arg(long, requires = "bank")]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Time step for --bank; defaults to the reference frame spacing.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
    pub metrics: Vec<Metric>,
    /// Intensity range for the metrics; defaults to the PDE's.
    #[arg(long)]
    pub peak: Option<f64>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum Metric {
    Psnr,
    Ssim,
}

pub fn run(a: Args) -> Result<()> {
    let (reference, meta) =
        io::read_sequence(&a.reference_seq).with_context(|| format!("reading {}", a.reference_seq.display()))?;
    let peak = a
        .peak
        .unwrap_or_else(|| meta.pde.parse::<Pde>().map(|p| p.intensity_range().1).unwrap_or(255.0));
    let mut man = RunManifest::new("eval", &a)?;
    man.input(&a.reference_seq.join(io::SEQUENCE_META))?;

    let test: FrameSequence = if let Some(dir) = &a.test_seq {
        man.input(&dir.join(io::SEQUENCE_META))?;
        io::read_sequence(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .0
    } else {
        let bank = a.bank.as_ref().expect("clap enforces --bank or --test-seq");
        man.input(bank)?;
        let (est, integ) = load_estimator(bank, a.integrator)?;
        let u0 = match &a.input {
            Some(p) => {
                man.input(p)?;
                load_scaled(p, peak)?
            }
            None => reference.first().clone(),
        };
        let model = SequenceModel::new(est, integ, a.dt.unwrap_or(reference.dt()))?;
        evolve(&model, &u0, reference.len() - 1)?
    };
    if test.len() != reference.len() {
        bail!(
            "frame counts differ: reference {} vs test {}",
            reference.len(),
            test.len()
        );
    }

    let mut header = vec!["frame".to_string()];
    header.extend(a.metrics.iter().map(|m| format!("{m:?}").to_lowercase()));
    let mut csv = header.join(",") + "\n";
    let mut sums = vec![0.0; a.metrics.len()];
    for (k, (r, t)) in reference.frames().iter().zip(test.frames()).enumerate() {
        let mut row = vec![k.to_string()];
        for (j, m) in a.metrics.iter().enumerate() {
            let v = match m {
                Metric::Psnr => psnr(t, r, peak)?.min(PSNR_CAP),
                Metric::Ssim => mean_ssim(t, r, peak)?,
            };
            sums[j] += v;
            row.push(format!("{v:.6}"));
        }
        csv.push_str(&(row.join(",") + "\n"));
    }
    match &a.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
            man.output(p)?;
            for (m, s) in a.metrics.iter().zip(&sums) {
                man.metric(&format!("mean_{m:?}").to_lowercase(), s / reference.len() as f64)?;
            }
            man.write(&manifest_path_for(p))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}
