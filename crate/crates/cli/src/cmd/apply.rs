use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blade_core::apps::restore::{
    absorb_deconv, absorbed_step, deconv_constant, deconv_footprint, degrade, lanczos_upscale, project_upscale,
    restore, upscale,
};
use blade_core::apps::segment::{
    chan_vese_channels, chan_vese_energy, chan_vese_reference, checkerboard, ChanVeseParams, LevelSet, RegionMeans,
};
use blade_core::apps::{bicubic_resample, resample, DegradationModel};
use blade_core::grid::{downscale_area, mean_ssim, psnr};
use blade_core::io::{self, BitDepth};
use blade_core::{Estimator, ImageGrid};
use clap::Subcommand;
use serde::Serialize;

use crate::common::{load_estimator, load_scaled, save_scaled, DepthArg, IntegratorArg};
use crate::manifest::{manifest_path_for, RunManifest};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deblurring with the bank as regularizer.
    Deconv(DeconvArgs),
    /// Integer-factor upscaling with the bank as regularizer.
    Upscale(UpscaleArgs),
    /// Two-phase Chan-Vese segmentation.
    Segment(SegmentArgs),
    /// Warp an image along a flow field.
    Resample(ResampleArgs),
}

pub fn run(c: Command) -> Result<()> {
    match c {
        Command::Deconv(a) => deconv(a),
        Command::Upscale(a) => upscale_cmd(a),
        Command::Segment(a) => segment(a),
        Command::Resample(a) => resample_cmd(a),
    }
}

fn add_quality(
    man: &mut RunManifest,
    prefix: &str,
    img: &ImageGrid,
    clean: &ImageGrid,
    peak: f64,
) -> Result<(f64, f64)> {
    let p = psnr(img, clean, peak)?;
    let s = mean_ssim(img, clean, peak)?;
    man.metric(&format!("{prefix}_psnr"), p)?;
    man.metric(&format!("{prefix}_ssim"), s)?;
    Ok((p, s))
}

fn load_input(path: &Path, peak: f64, downscale: usize) -> Result<ImageGrid> {
    let img = load_scaled(path, peak)?;
    Ok(if downscale > 1 {
        downscale_area(&img, downscale)?
    } else {
        img
    })
}

#[derive(Debug, clap::Args, Serialize)]
pub struct DeconvArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Observed image, or the clean image with --degrade.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    /// Blur and add noise to the input first, then report quality against it.
    #[arg(long)]
    pub degrade: bool,
    #[arg(long, default_value_t = 5.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Area-downscale the input by this factor before anything else.
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
    /// Fold the fidelity term into widened filters.
    #[arg(long)]
    pub absorbed: bool,
    /// Where to write the degraded image (with --degrade).
    #[arg(long)]
    pub degraded_out: Option<PathBuf>,
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
    #[arg(long, value_enum, default_value_t = DepthArg::Eight)]
    pub depth: DepthArg,
}

fn deconv(a: DeconvArgs) -> Result<()> {
    let (est, _) = load_estimator(&a.bank, a.integrator)?;
    let dm = DegradationModel::gaussian(a.blur_sigma, 1, a.lambda)?;
    let mut man = RunManifest::new("apply deconv", &a)?;
    man.seed = a.degrade.then_some(a.seed);
    man.input(&a.bank)?;
    man.input(&a.input)?;
    let input = load_input(&a.input, a.peak, a.downscale)?;
    let f = if a.degrade {
        degrade(&dm, &input, a.noise_sigma, a.seed)?
    } else {
        input.clone()
    };

    let out = if a.absorbed {
        let Estimator::Blade(bank) = &est else {
            bail!("--absorbed needs a single-bank model");
        };
        let wide = absorb_deconv(&bank.widened(deconv_footprint(bank.footprint(), &dm)?)?, &dm)?;
        let c = deconv_constant(&f, &dm);
        let mut u = f.clone();
        for _ in 0..a.steps {
            u = absorbed_step(&wide, &u, &c, a.dt)?;
        }
        u
    } else {
        restore(&est, &f, &f, &dm, a.dt, a.steps)?
    };
    if let Some(i) = out.first_non_finite() {
        return Err(blade_core::BladeError::Instability {
            step: a.steps,
            reason: format!("non-finite result at index {i}"),
        }
        .into());
    }
    save_scaled(&a.out, &out, a.peak, a.depth)?;
    man.output(&a.out)?;
    if a.degrade {
        if let Some(p) = &a.degraded_out {
            save_scaled(p, &f, a.peak, a.depth)?;
            man.output(p)?;
        }
        let (p0, s0) = add_quality(&mut man, "degraded", &f, &input, a.peak)?;
        let (p1, s1) = add_quality(&mut man, "restored", &out, &input, a.peak)?;
        eprintln!("PSNR {p0:.2} -> {p1:.2} dB, SSIM {s0:.4} -> {s1:.4}");
    }
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}

#[derive(Debug, clap::Args, Serialize)]
pub struct UpscaleArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Low-resolution image, or the high-resolution one with --degrade.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    /// Psf width in high-resolution pixels.
    #[arg(long, default_value_t = 0.4)]
    pub psf_sigma: f64,
    #[arg(long, default_value_t = 0.35)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    /// Keep the iterate exactly consistent with the data (periodic model).
    #[arg(long)]
    pub projected: bool,
    /// Apply the degradation model to the input first and report quality.
    #[arg(long)]
    pub degrade: bool,
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
    #[arg(long, value_enum, default_value_t = DepthArg::Eight)]
    pub depth: DepthArg,
}

fn upscale_cmd(a: UpscaleArgs) -> Result<()> {
    let (est, _) = load_estimator(&a.bank, a.integrator)?;
    let dm = DegradationModel::gaussian(a.psf_sigma, a.factor, a.lambda)?;
    let mut man = RunManifest::new("apply upscale", &a)?;
    man.input(&a.bank)?;
    man.input(&a.input)?;
    let input = load_scaled(&a.input, a.peak)?;
    let f = if a.degrade { dm.forward(&input)? } else { input.clone() };
    let out = if a.projected {
        project_upscale(&est, &f, &dm, a.dt, a.steps)?
    } else {
        upscale(&est, &f, &dm, a.dt, a.steps)?
    };
    save_scaled(&a.out, &out, a.peak, a.depth)?;
    man.output(&a.out)?;
    if a.degrade {
        let base = lanczos_upscale(&f, a.factor)?;
        let (p0, s0) = add_quality(&mut man, "lanczos", &base, &input, a.peak)?;
        let (p1, s1) = add_quality(&mut man, "upscaled", &out, &input, a.peak)?;
        eprintln!("Lanczos {p0:.2} dB / {s0:.4}, upscaled {p1:.2} dB / {s1:.4}");
    }
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}

#[derive(Debug, clap::Args, Serialize)]
pub struct SegmentArgs {
    /// Curvature bank; without one the semi-implicit reference scheme runs.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Mask output: white where phi > 0.
    #[arg(long)]
    pub out: PathBuf,
    /// Curvature weight; 0.04 with a bank, 0.2 without.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Heaviside width.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Segment the RGB vector instead of the gray value.
    #[arg(long)]
    pub color: bool,
    /// Region values as Heaviside-weighted means instead of plain means.
    #[arg(long)]
    pub smoothed_means: bool,
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
}

fn segment(a: SegmentArgs) -> Result<()> {
    let mut man = RunManifest::new("apply segment", &a)?;
    man.input(&a.input)?;
    let curvature = match &a.bank {
        Some(p) => {
            man.input(p)?;
            Some(load_estimator(p, IntegratorArg::Euler)?.0)
        }
        None => None,
    };
    let base = if a.bank.is_some() {
        ChanVeseParams::learned()
    } else {
        ChanVeseParams::reference()
    };
    let params = ChanVeseParams {
        mu: a.mu.unwrap_or(base.mu),
        nu: a.nu,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        dt: a.dt,
        epsilon: a.epsilon,
        means: if a.smoothed_means {
            RegionMeans::Smoothed
        } else {
            RegionMeans::Sharp
        },
    };
    let s = a.peak / 255.0;
    let channels: Vec<ImageGrid> = if a.color {
        let c = io::load_color(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
        c.channels().iter().map(|ch| ch.scaled(s)).collect()
    } else {
        vec![load_scaled(&a.input, a.peak)?]
    };
    let (w, h) = channels[0].dims();
    let refs: Vec<&ImageGrid> = channels.iter().collect();
    let ls = LevelSet::new(checkerboard(w, h), params.clone())?;
    let out = match &curvature {
        Some(est) => chan_vese_channels(est, &refs, ls, a.steps)?,
        None => chan_vese_reference(&refs, ls, a.steps)?,
    };
    let mask = ImageGrid::new(
        w,
        h,
        out.inside().iter().map(|&b| if b { 255.0 } else { 0.0 }).collect(),
    )?;
    io::save_gray(&a.out, &mask, (0.0, 255.0), BitDepth::Eight)?;
    man.output(&a.out)?;
    man.metric("mu", params.mu)?;
    man.metric("c1", &out.c1)?;
    man.metric("c2", &out.c2)?;
    man.metric("energy", chan_vese_energy(&out, &refs))?;
    man.metric(
        "inside_fraction",
        out.inside().iter().filter(|&&b| b).count() as f64 / (w * h) as f64,
    )?;
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}

#[derive(Debug, clap::Args, Serialize)]
pub struct ResampleArgs {
    /// x and y derivative banks from train-resampler.
    #[arg(long, required_unless_present = "bicubic")]
    pub banks: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// BLFLOW01 flow field.
    #[arg(long)]
    pub flow: PathBuf,
    /// Catmull-Rom bicubic interpolation instead of the banks.
    #[arg(long)]
    pub bicubic: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DepthArg::Eight)]
    pub depth: DepthArg,
}

fn resample_cmd(a: ResampleArgs) -> Result<()> {
    let mut man = RunManifest::new("apply resample", &a)?;
    man.input(&a.input)?;
    man.input(&a.flow)?;
    let u = load_scaled(&a.input, 255.0)?;
    let flow = io::load_flow(&a.flow).with_context(|| format!("loading {}", a.flow.display()))?;
    let out = match (&a.banks, a.bicubic) {
        (_, true) => bicubic_resample(&u, &flow)?,
        (Some(p), false) => {
            man.input(p)?;
            let banks = io::load_banks(p).with_context(|| format!("loading {}", p.display()))?;
            let [bx, by] = banks.as_slice() else {
                bail!("{}: expected 2 banks (x, y), found {}", p.display(), banks.len());
            };
            resample(bx, by, &u, &flow)?
        }
        (None, false) => unreachable!("clap requires --banks without --bicubic"),
    };
    save_scaled(&a.out, &out, 255.0, a.depth)?;
    man.output(&a.out)?;
    man.write(&manifest_path_for(&a.out))?;
    Ok(())
}
