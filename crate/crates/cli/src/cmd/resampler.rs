use std::path::PathBuf;

use anyhow::{bail, Result};
use blade_core::apps::{train_resampler, FlowField, ResamplerConfig};
use blade_core::features::calibrate_thresholds;
use blade_core::grid::{convolve, subsample, Kernel};
use blade_core::io;
use blade_core::{Footprint, ImageGrid};
use rayon::prelude::*;
use serde::Serialize;

use crate::cmd::train::SelectionArg;
use crate::common::{list_images, load_scaled};
use crate::manifest::{manifest_path_for, RunManifest};

#[derive(Debug, clap::Args, Serialize)]
pub struct TrainArgs {
    /// High-resolution training images.
    #[arg(long)]
    pub input_dir: PathBuf,
    /// Output file holding the x and y banks.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    /// Psf width in observed pixels.
    #[arg(long, default_value_t = 0.5)]
    pub psf_sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub footprint: usize,
    #[arg(long, value_enum, default_value_t = SelectionArg::Structure)]
    pub selection: SelectionArg,
    #[arg(long, default_value_t = 1e-6)]
    pub ridge: f64,
    /// Observed-image border left out of the fit.
    #[arg(long, default_value_t = 3)]
    pub margin: usize,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let paths = list_images(&a.input_dir)?;
    let corpus: Vec<ImageGrid> = paths.iter().map(|p| load_scaled(p, 255.0)).collect::<Result<_>>()?;
    let mut cfg = ResamplerConfig {
        factor: a.factor,
        psf_sigma: a.psf_sigma,
        footprint: Footprint::new(a.footprint, a.footprint)?,
        selection: a.selection.config(),
        ridge: a.ridge,
        margin: a.margin,
    };
    // thresholds from the observed images the banks will be applied to
    let psf = Kernel::gaussian(a.psf_sigma * a.factor as f64)?;
    let observed: Vec<ImageGrid> = corpus
        .par_iter()
        .map(|u| subsample(&convolve(u, &psf), a.factor))
        .collect::<blade_core::Result<_>>()?;
    cfg.selection = calibrate_thresholds(&observed, &cfg.selection)?;
    let (bx, by) = train_resampler(&corpus, &cfg)?;
    io::save_banks(&a.out, &[&bx, &by])?;
    let mut man = RunManifest::new("train-resampler", &a)?;
    for p in &paths {
        man.input(p)?;
    }
    man.output(&a.out)?;
    man.metric("deltas", cfg.deltas().len())?;
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}

#[derive(Debug, clap::Args, Serialize)]
pub struct FlowArgs {
    /// Take width and height from this image.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    pub like: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Horizontal displacement in pixels.
    #[arg(long, allow_negative_numbers = true)]
    pub vx: f64,
    /// Vertical displacement in pixels.
    #[arg(long, allow_negative_numbers = true)]
    pub vy: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn make_flow(a: FlowArgs) -> Result<()> {
    let (w, h) = match (&a.like, a.width, a.height) {
        (Some(p), _, _) => io::load_gray(p)?.dims(),
        (None, Some(w), Some(h)) => (w, h),
        _ => bail!("give --like IMAGE or both --width and --height"),
    };
    let flow = FlowField::uniform(w, h, a.vx, a.vy)?;
    io::save_flow(&a.out, &flow)?;
    Ok(())
}
