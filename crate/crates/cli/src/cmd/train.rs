use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use blade_core::features::calibrate_thresholds;
use blade_core::io;
use blade_core::train::{least_squares_fit, train, windows_from_sequence, TrainConfig, TrainingWindow};
use blade_core::{Estimator, FilterBank, Footprint, FrameSequence, Integrator, Pde, SelectionConfig, SequenceModel};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;

use crate::common::{IntegratorArg, PdeArg};
use crate::manifest::{manifest_path_for, DatasetManifest, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SelectionArg {
    /// Orientation, strength and coherence (24/3/3).
    Structure,
    /// Orientation, strength and intensity (8/5/6).
    Intensity,
    /// One filter for every pixel.
    Single,
}

impl SelectionArg {
    pub fn config(self) -> SelectionConfig {
        match self {
            SelectionArg::Structure => SelectionConfig::structure_tensor_default(),
            SelectionArg::Intensity => SelectionConfig::with_intensity_default(),
            SelectionArg::Single => SelectionConfig::single(),
        }
    }
}

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    /// Dataset directory (or its dataset.json) written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Expected PDE; checked against the dataset when given.
    #[arg(long, value_enum)]
    pub pde: Option<PdeArg>,
    #[arg(long, default_value_t = 10)]
    pub unroll: usize,
    /// Output bank file (BLADEFB1). A flux model stores the x and y banks.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adam iterations after the least-squares warm start.
    #[arg(long, default_value_t = 0)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Square footprint width.
    #[arg(long, default_value_t = 5)]
    pub footprint: usize,
    #[arg(long, value_enum, default_value_t = SelectionArg::Structure)]
    pub selection: SelectionArg,
    /// Ridge of the least-squares warm start.
    #[arg(long, default_value_t = 1e-6)]
    pub ridge: f64,
    /// Dihedral copies of each sequence (1 to 8).
    #[arg(long, default_value_t = 8)]
    pub augment: usize,
    /// Frames between consecutive training windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Start Adam from zero filters instead of the least-squares fit.
    #[arg(long)]
    pub no_warm_start: bool,
}

pub fn run(a: Args) -> Result<()> {
    if !(1..=8).contains(&a.augment) {
        bail!("--augment must be between 1 and 8");
    }
    let (ds, dirs) = DatasetManifest::load(&a.data)?;
    let pde: Pde = ds.pde.parse().with_context(|| format!("dataset pde '{}'", ds.pde))?;
    if let Some(p) = a.pde {
        if Pde::from(p) != pde {
            bail!("dataset holds {} sequences, not {}", pde.name(), Pde::from(p).name());
        }
    }
    if dirs.is_empty() {
        bail!("dataset lists no sequences");
    }
    let seqs: Vec<FrameSequence> = dirs
        .iter()
        .map(|d| {
            io::read_sequence(d)
                .map(|s| s.0)
                .with_context(|| format!("reading {}", d.display()))
        })
        .collect::<Result<_>>()?;
    let dt = seqs[0].dt();
    if seqs.iter().any(|s| (s.dt() - dt).abs() > 1e-12 * dt.abs()) {
        bail!("sequences disagree on the frame spacing");
    }

    let mut windows: Vec<TrainingWindow> = Vec::new();
    for s in &seqs {
        for k in 0..a.augment {
            let frames = s.frames().iter().map(|f| f.dihedral(k)).collect();
            windows.extend(windows_from_sequence(
                &FrameSequence::new(frames, s.dt())?,
                a.unroll,
                a.stride,
            )?);
        }
    }
    if windows.is_empty() {
        bail!("sequences are too short for --unroll {}", a.unroll);
    }

    let calib: Vec<_> = seqs.iter().flat_map(|s| s.frames().iter().cloned()).collect();
    let selection = calibrate_thresholds(&calib, &a.selection.config())?;
    let fp = Footprint::new(a.footprint, a.footprint)?;
    let template = FilterBank::zeros(fp, selection);

    let init = match a.integrator {
        IntegratorArg::Flux => {
            let est = Estimator::Flux {
                x: template.clone(),
                y: template.clone(),
            };
            SequenceModel::new(est, Integrator::Euler, dt)?
        }
        i => {
            let bank = if a.no_warm_start {
                template.clone()
            } else {
                least_squares_fit(&template, &windows, a.ridge)?
            };
            let integ = if i == IntegratorArg::Midpoint {
                Integrator::Midpoint
            } else {
                Integrator::Euler
            };
            SequenceModel::new(Estimator::Blade(bank), integ, dt)?
        }
    };

    let cfg = TrainConfig {
        unroll_steps: a.unroll,
        learning_rate: a.lr,
        final_learning_rate: a.final_lr,
        iterations: a.iters,
        batch_size: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (model, curve) = if a.iters > 0 {
        let out = train(&windows, &cfg, init)?;
        (out.model, out.loss_curve)
    } else {
        (init, Vec::new())
    };

    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    io::save_banks(&a.out, &model.estimator.banks())?;
    let stem = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let loss_path = a.out.with_file_name(format!("{stem}.loss.csv"));
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.17e}\n"));
    }
    fs::File::create(&loss_path)
        .and_then(|mut f| f.write_all(csv.as_bytes()))
        .with_context(|| format!("writing {}", loss_path.display()))?;

    let mut man = RunManifest::new(
        "train",
        json!({ "args": &a, "pde": pde.name(), "model_dt": dt, "train_config": cfg }),
    )?;
    man.seed = Some(a.seed);
    for d in &dirs {
        man.input(&d.join(io::SEQUENCE_META))?;
    }
    man.output(&a.out)?;
    man.output(&loss_path)?;
    man.metric("windows", windows.len())?;
    man.metric("num_filters", template.num_filters())?;
    if let Some(l) = curve.last() {
        man.metric("final_loss", l)?;
    }
    man.write(&manifest_path_for(&a.out))?;
    eprintln!(
        "trained {} on {} windows (dt {dt}); wrote {}",
        pde.name(),
        windows.len(),
        a.out.display()
    );
    Ok(())
}
