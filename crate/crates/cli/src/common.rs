//! Argument groups and helpers shared by several commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blade_core::io::{self, BitDepth};
use blade_core::{Estimator, ImageGrid, Integrator, Pde, SchemeConfig};
use clap::{Args, ValueEnum};
use serde::Serialize;

/// Sorted PNG/PGM/PPM files of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("input directory {} does not exist", dir.display());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "pgm" | "ppm")
            )
        })
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("no .png/.pgm/.ppm images in {}", dir.display());
    }
    Ok(out)
}

/// Loads a grayscale image and maps 0..255 onto `0..peak`.
pub fn load_scaled(path: &Path, peak: f64) -> Result<ImageGrid> {
    let img = io::load_gray(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(if peak == 255.0 { img } else { img.scaled(peak / 255.0) })
}

pub fn save_scaled(path: &Path, img: &ImageGrid, peak: f64, depth: DepthArg) -> Result<()> {
    io::save_gray(path, img, (0.0, peak), depth.into()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DepthArg {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<DepthArg> for BitDepth {
    fn from(d: DepthArg) -> Self {
        match d {
            DepthArg::Eight => BitDepth::Eight,
            DepthArg::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum PdeArg {
    Tv,
    Pm,
    Ced,
    Ch,
}

impl From<PdeArg> for Pde {
    fn from(p: PdeArg) -> Self {
        match p {
            PdeArg::Tv => Pde::TvFlow,
            PdeArg::Pm => Pde::PeronaMalik,
            PdeArg::Ced => Pde::Ced,
            PdeArg::Ch => Pde::CahnHilliard,
        }
    }
}

/// Overrides of the reference-scheme parameters; unset flags keep the
/// per-PDE defaults.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct SchemeArgs {
    /// Grid spacing.
    #[arg(long)]
    pub dx: Option<f64>,
    /// Perona-Malik contrast c.
    #[arg(long)]
    pub contrast: Option<f64>,
    /// CED minimal diffusivity alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// CED coherence constant C.
    #[arg(long)]
    pub ced_c: Option<f64>,
    /// CED structure-tensor smoothing rho.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Cahn-Hilliard interface parameter gamma.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Regularization inside the TV-flow square roots.
    #[arg(long)]
    pub epsilon_reg: Option<f64>,
}

impl SchemeArgs {
    pub fn config(&self, pde: Pde, dt: f64) -> Result<SchemeConfig> {
        let mut c = SchemeConfig::default_for(pde).with_dt(dt);
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.dx, self.dx);
        set(&mut c.contrast, self.contrast);
        set(&mut c.alpha, self.alpha);
        set(&mut c.ced_c, self.ced_c);
        set(&mut c.rho, self.rho);
        set(&mut c.gamma, self.gamma);
        set(&mut c.epsilon_reg, self.epsilon_reg);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum IntegratorArg {
    Euler,
    Midpoint,
    /// Conservative flux model (x and y banks), Euler steps.
    Flux,
}

/// Builds the estimator for `integrator` from the banks stored in `path`.
pub fn load_estimator(path: &Path, integrator: IntegratorArg) -> Result<(Estimator, Integrator)> {
    let mut banks = io::load_banks(path).with_context(|| format!("loading {}", path.display()))?;
    match (integrator, banks.len()) {
        (IntegratorArg::Flux, 2) => {
            let y = banks.pop().expect("two banks");
            let x = banks.pop().expect("two banks");
            Ok((Estimator::Flux { x, y }, Integrator::Euler))
        }
        (IntegratorArg::Flux, n) => bail!("{}: a flux model needs 2 banks, found {n}", path.display()),
        (i, 1) => {
            let integ = if i == IntegratorArg::Midpoint {
                Integrator::Midpoint
            } else {
                Integrator::Euler
            };
            Ok((Estimator::Blade(banks.pop().expect("one bank")), integ))
        }
        (_, n) => bail!(
            "{}: holds {n} banks; use --integrator flux for a flux model",
            path.display()
        ),
    }
}
