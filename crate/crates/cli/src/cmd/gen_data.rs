use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use blade_core::io::{self, SequenceMeta};
use blade_core::train::{make_target_sequence, TrainConfig};
use blade_core::Pde;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::common::{list_images, load_scaled, PdeArg, SchemeArgs};
use crate::manifest::{manifest_path_for, DatasetManifest, RunManifest, DATASET_FILE};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long, value_enum)]
    pub pde: PdeArg,
    /// Directory of high-resolution grayscale images.
    #[arg(long)]
    pub input_dir: PathBuf,
    /// Spatial downscaling factor.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Reference time step at high resolution.
    #[arg(long, default_value_t = 0.1)]
    pub dt_hr: f64,
    /// Reference steps at high resolution.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Keep every M-th reference frame.
    #[arg(long, default_value_t = 10)]
    pub subsample_m: usize,
    /// Intensity mapped to white; defaults to 255, or 1 for Cahn-Hilliard.
    #[arg(long)]
    pub peak: Option<f64>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let pde: Pde = a.pde.into();
    let scheme = a.scheme.config(pde, a.dt_hr)?;
    let peak = a.peak.unwrap_or(pde.intensity_range().1);
    let tc = TrainConfig {
        spatial_factor: a.scale,
        temporal_factor: a.subsample_m,
        ..TrainConfig::default()
    };
    let inputs = list_images(&a.input_dir)?;
    if a.scale == 0 || a.subsample_m == 0 {
        bail!("--scale and --subsample-m must be >= 1");
    }
    if !a.steps.is_multiple_of(a.subsample_m) {
        bail!(
            "--steps {} is not divisible by --subsample-m {}",
            a.steps,
            a.subsample_m
        );
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let names: Vec<String> = inputs
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let mut seen = names.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != names.len() {
        bail!("input file stems in {} are not unique", a.input_dir.display());
    }

    inputs
        .par_iter()
        .zip(&names)
        .map(|(path, name)| -> Result<()> {
            let u0 = load_scaled(path, peak)?;
            let seq = make_target_sequence(&u0, &scheme, &tc, a.steps)
                .with_context(|| format!("reference run on {}", path.display()))?;
            let meta = SequenceMeta {
                pde: pde.name().to_string(),
                dt: seq.dt(),
                dx: scheme.dx * a.scale as f64,
                step_count: a.steps,
                frames: 0,
                width: 0,
                height: 0,
                value_min: 0.0,
                value_max: 0.0,
                parameters: json!({
                    "source": path.file_name().map(|s| s.to_string_lossy().into_owned()),
                    "scheme": scheme,
                    "scale": a.scale,
                    "subsample_m": a.subsample_m,
                    "peak": peak,
                }),
            };
            io::write_sequence(a.out.join(name), &seq, meta)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;

    let ds = DatasetManifest {
        pde: pde.name().to_string(),
        sequences: names.clone(),
    };
    let ds_path = a.out.join(DATASET_FILE);
    fs::write(&ds_path, serde_json::to_string_pretty(&ds)? + "\n")?;

    let mut man = RunManifest::new("gen-data", json!({ "args": &a, "scheme": scheme, "peak": peak }))?;
    for p in &inputs {
        man.input(p)?;
    }
    man.output(&ds_path)?;
    for name in &names {
        let dir = a.out.join(name);
        let meta = io::read_sequence_meta(&dir)?;
        for k in 0..meta.frames {
            man.output(&io::frame_path(&dir, k))?;
        }
        man.output(&dir.join(io::SEQUENCE_META))?;
    }
    man.metric("sequences", names.len())?;
    man.write(&manifest_path_for(&a.out))?;
    eprintln!("wrote {} sequences to {}", names.len(), a.out.display());
    Ok(())
}
