//! Applications that reuse trained banks without retraining.

pub mod resample;
pub mod restore;
pub mod segment;

use crate::error::Result;
use crate::features::compute_selection;
use crate::grid::{luma, ColorImage};
use crate::net::{blade_apply, FilterBank};

pub use resample::{bicubic_resample, resample, train_resampler, FlowField, ResamplerConfig};
pub use restore::{absorb_deconv, degrade, project_upscale_step, restore_step, upscale, DegradationModel};
pub use segment::{chan_vese_color, chan_vese_evolve, chan_vese_reference, ChanVeseParams, LevelSet, RegionMeans};

/// Selection from the luma channel, filtering on each channel with it.
pub fn color_apply(bank: &FilterBank, c: &ColorImage) -> Result<ColorImage> {
    let y = luma(c);
    let sel = compute_selection(&y, bank.selection(), Some(&y))?;
    c.try_map_channels(|ch| blade_apply(bank, &sel, ch))
}
