//! The shallow adaptive-filter network: a bank of small linear filters and a
//! per-pixel selection deciding which one is applied.
//!
//! `out_i = sum_{j in F} h^{s(i)}_j z_{i+j}`, with `z` extended by replicating
//! its border pixels. Only the selected filter is evaluated at each pixel, so
//! inference cost does not depend on the number of filters.

use crate::error::{BladeError, Result};
use crate::features::{compute_selection, SelectionConfig, SelectionMap};
use crate::grid::{ImageGrid, Kernel};

/// Odd-sized rectangular filter support centered on the output pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    width: usize,
    height: usize,
}

impl Footprint {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width.is_multiple_of(2) || height.is_multiple_of(2) {
            return Err(BladeError::invalid(format!(
                "footprint dimensions must be odd, got {width}x{height}"
            )));
        }
        Ok(Footprint { width, height })
    }

    pub const fn square5() -> Self {
        Footprint { width: 5, height: 5 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn radius(&self) -> (isize, isize) {
        ((self.width / 2) as isize, (self.height / 2) as isize)
    }

    /// Offsets `(dx, dy)` in tap order (row-major).
    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let (rx, ry) = self.radius();
        (-ry..=ry).flat_map(move |dy| (-rx..=rx).map(move |dx| (dx, dy)))
    }
}

impl Default for Footprint {
    fn default() -> Self {
        Footprint::square5()
    }
}

/// Filters `h^0, h^1, ...` stored contiguously, each row-major over the
/// footprint, together with the selection rule that indexes them.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    footprint: Footprint,
    taps: Vec<f64>,
    selection: SelectionConfig,
}

impl FilterBank {
    pub fn new(footprint: Footprint, selection: SelectionConfig, taps: Vec<f64>) -> Result<Self> {
        selection.validate()?;
        let expect = selection.num_filters() * footprint.area();
        if taps.len() != expect {
            return Err(BladeError::invalid(format!(
                "bank needs {expect} taps ({} filters of {} taps), got {}",
                selection.num_filters(),
                footprint.area(),
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(BladeError::invalid("filter taps must be finite"));
        }
        Ok(FilterBank {
            footprint,
            taps,
            selection,
        })
    }

    /// All-zero taps: as a time-derivative estimator this is the identity
    /// evolution.
    pub fn zeros(footprint: Footprint, selection: SelectionConfig) -> Self {
        let n = selection.num_filters() * footprint.area();
        FilterBank {
            footprint,
            taps: vec![0.0; n],
            selection,
        }
    }

    /// Every filter equal to `scale` times a centered delta.
    pub fn delta(footprint: Footprint, selection: SelectionConfig, scale: f64) -> Self {
        let mut bank = FilterBank::zeros(footprint, selection);
        let center = bank.footprint.area() / 2;
        for k in 0..bank.num_filters() {
            bank.filter_mut(k)[center] = scale;
        }
        bank
    }

    pub fn footprint(&self) -> Footprint {
        self.footprint
    }

    pub fn selection(&self) -> &SelectionConfig {
        &self.selection
    }

    pub fn num_filters(&self) -> usize {
        self.selection.num_filters()
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let a = self.footprint.area();
        &self.taps[k * a..(k + 1) * a]
    }

    pub fn filter_mut(&mut self, k: usize) -> &mut [f64] {
        let a = self.footprint.area();
        &mut self.taps[k * a..(k + 1) * a]
    }

    pub fn with_selection(mut self, selection: SelectionConfig) -> Result<Self> {
        if selection.num_filters() != self.num_filters() {
            return Err(BladeError::invalid("new selection changes the filter count"));
        }
        selection.validate()?;
        self.selection = selection;
        Ok(self)
    }

    /// Same filters on a larger footprint, zero-padded around the original
    /// taps. The network output is unchanged.
    pub fn widened(&self, footprint: Footprint) -> Result<FilterBank> {
        let (rx, ry) = self.footprint.radius();
        let (nrx, nry) = footprint.radius();
        if nrx < rx || nry < ry {
            return Err(BladeError::invalid("widened footprint must contain the current one"));
        }
        let mut out = FilterBank::zeros(footprint, self.selection.clone());
        for k in 0..self.num_filters() {
            let src = self.filter(k);
            let dst = out.filter_mut(k);
            for (t, (dx, dy)) in self.footprint.offsets().enumerate() {
                let idx = ((dy + nry) as usize) * footprint.width + (dx + nrx) as usize;
                dst[idx] = src[t];
            }
        }
        Ok(out)
    }

    /// Filter `k` as a standalone correlation kernel.
    pub fn kernel(&self, k: usize) -> Kernel {
        Kernel::new(self.footprint.width, self.footprint.height, self.filter(k).to_vec())
            .expect("footprint dimensions are odd")
    }

    fn check_selection(&self, sel: &SelectionMap, z: &ImageGrid) -> Result<()> {
        if sel.dims() != z.dims() {
            return Err(BladeError::DimensionMismatch {
                expected: z.dims(),
                found: sel.dims(),
            });
        }
        let max = sel.max_index();
        if max >= self.num_filters() {
            return Err(BladeError::IndexOutOfRange {
                index: max,
                num_filters: self.num_filters(),
            });
        }
        Ok(())
    }
}

/// Spatially varying filtering with a fixed selection map.
pub fn blade_apply(bank: &FilterBank, sel: &SelectionMap, z: &ImageGrid) -> Result<ImageGrid> {
    bank.check_selection(sel, z)?;
    let (w, h) = z.dims();
    let fp = bank.footprint;
    let (rx, ry) = fp.radius();
    let mut out = z.zeros_like();
    let interior =
        |m: usize, n: usize| m as isize >= rx && n as isize >= ry && m + (rx as usize) < w && n + (ry as usize) < h;
    let data = z.data();
    for n in 0..h {
        for m in 0..w {
            let filt = bank.filter(sel.get(m, n));
            let mut acc = 0.0;
            if interior(m, n) {
                let mut t = 0;
                for dy in -ry..=ry {
                    let row = ((n as isize + dy) as usize) * w;
                    for dx in -rx..=rx {
                        acc += filt[t] * data[row + (m as isize + dx) as usize];
                        t += 1;
                    }
                }
            } else {
                for (t, (dx, dy)) in fp.offsets().enumerate() {
                    acc += filt[t] * z.sample_extended(m as isize + dx, n as isize + dy);
                }
            }
            out.data_mut()[n * w + m] = acc;
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`blade_apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct BladeGradients {
    /// Same layout as [`FilterBank::taps`].
    pub taps: Vec<f64>,
    pub input: ImageGrid,
}

/// Adjoint of [`blade_apply`] with the selection held fixed.
///
/// `dtaps[k][j] = sum_{i: s(i)=k} z_{i+j} g_i` and
/// `dz_i = sum_j h^{s(i-j)}_j g_{i-j}`; contributions through the replicated
/// border are accumulated into the clamped border pixels.
pub fn blade_backward(
    bank: &FilterBank,
    sel: &SelectionMap,
    z: &ImageGrid,
    grad_out: &ImageGrid,
) -> Result<BladeGradients> {
    bank.check_selection(sel, z)?;
    z.ensure_same_dims(grad_out)?;
    let mut taps = vec![0.0; bank.taps.len()];
    let mut input = z.zeros_like();
    accumulate_backward(bank, sel, z, grad_out, 1.0, Some(&mut taps), Some(&mut input));
    Ok(BladeGradients { taps, input })
}

/// Accumulating form of [`blade_backward`]: adds `scale` times the tap
/// and/or input gradients into the given buffers. Inputs are assumed checked.
pub(crate) fn accumulate_backward(
    bank: &FilterBank,
    sel: &SelectionMap,
    z: &ImageGrid,
    grad_out: &ImageGrid,
    scale: f64,
    mut dtaps: Option<&mut [f64]>,
    mut dz: Option<&mut ImageGrid>,
) {
    let (w, h) = z.dims();
    let fp = bank.footprint;
    let area = fp.area();
    let (rx, ry) = fp.radius();
    let zd = z.data();
    for n in 0..h {
        for m in 0..w {
            let g = scale * grad_out.get(m, n);
            if g == 0.0 {
                continue;
            }
            let k = sel.get(m, n);
            let filt = bank.filter(k);
            let mut t = 0;
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    let (mc, nc) = z.clamp_index(m as isize + dx, n as isize + dy);
                    let idx = nc * w + mc;
                    if let Some(dt) = dtaps.as_deref_mut() {
                        dt[k * area + t] += zd[idx] * g;
                    }
                    if let Some(dzi) = dz.as_deref_mut() {
                        dzi.data_mut()[idx] += filt[t] * g;
                    }
                    t += 1;
                }
            }
        }
    }
}

/// Computes the selection from `z` with the bank's configuration, then
/// applies the bank. The intensity feature, when configured, is read from
/// `aux_intensity` or else from `z`.
pub fn select_and_apply(bank: &FilterBank, z: &ImageGrid, aux_intensity: Option<&ImageGrid>) -> Result<ImageGrid> {
    let sel = compute_selection(z, &bank.selection, aux_intensity)?;
    blade_apply(bank, &sel, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::correlate;

    fn two_filter_config() -> SelectionConfig {
        SelectionConfig {
            orientation_bins: 2,
            strength_thresholds: vec![],
            coherence_thresholds: vec![],
            intensity_thresholds: None,
            rho: 1.0,
        }
    }

    #[test]
    fn delta_bank_is_identity() {
        let bank = FilterBank::delta(Footprint::square5(), SelectionConfig::single(), 1.0);
        let z = ImageGrid::from_fn(7, 6, |m, n| (m * m) as f64 - n as f64);
        let sel = SelectionMap::constant(7, 6, 0);
        assert_eq!(blade_apply(&bank, &sel, &z).unwrap(), z);
    }

    #[test]
    fn constant_selection_is_cross_correlation() {
        let cfg = two_filter_config();
        let taps: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect();
        let bank = FilterBank::new(Footprint::square5(), cfg, taps).unwrap();
        let z = ImageGrid::from_fn(9, 8, |m, n| ((m * 5 + n * 3) % 7) as f64);
        let sel = SelectionMap::constant(9, 8, 1);
        let got = blade_apply(&bank, &sel, &z).unwrap();
        let expect = correlate(&z, &bank.kernel(1));
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkerboard_dispatch() {
        let cfg = two_filter_config();
        let mut bank = FilterBank::zeros(Footprint::square5(), cfg);
        bank.filter_mut(0)[12] = 1.0;
        bank.filter_mut(1)[12] = -1.0;
        let z = ImageGrid::from_fn(3, 3, |m, n| (1 + m + 3 * n) as f64);
        let sel = SelectionMap::new(3, 3, (0..9).map(|i| ((i % 3 + i / 3) % 2) as u32).collect()).unwrap();
        let out = blade_apply(&bank, &sel, &z).unwrap();
        for n in 0..3 {
            for m in 0..3 {
                let sign = if (m + n) % 2 == 0 { 1.0 } else { -1.0 };
                assert_eq!(out.get(m, n), sign * z.get(m, n));
            }
        }
    }

    #[test]
    fn out_of_range_selection_is_rejected() {
        let bank = FilterBank::zeros(Footprint::square5(), two_filter_config());
        let z = ImageGrid::zeros(4, 4);
        let sel = SelectionMap::constant(4, 4, 2);
        assert!(matches!(
            blade_apply(&bank, &sel, &z),
            Err(BladeError::IndexOutOfRange {
                index: 2,
                num_filters: 2
            })
        ));
        let sel = SelectionMap::constant(3, 4, 0);
        assert!(blade_apply(&bank, &sel, &z).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let bank = FilterBank::delta(Footprint::square5(), two_filter_config(), 0.7);
        let z = ImageGrid::from_fn(6, 6, |m, n| (m + n) as f64);
        let sel = SelectionMap::constant(6, 6, 1);
        let g = blade_backward(&bank, &sel, &z, &ImageGrid::zeros(6, 6)).unwrap();
        assert!(g.taps.iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_adjoint_passes_gradient_through() {
        let bank = FilterBank::delta(Footprint::square5(), SelectionConfig::single(), 1.0);
        let z = ImageGrid::from_fn(8, 8, |m, n| (m * n) as f64);
        let g = ImageGrid::from_fn(8, 8, |m, n| (m as f64 - 3.0) * (n as f64 + 1.0));
        let sel = SelectionMap::constant(8, 8, 0);
        let back = blade_backward(&bank, &sel, &z, &g).unwrap();
        assert_eq!(back.input, g);
    }

    #[test]
    fn widened_bank_gives_same_output() {
        let cfg = two_filter_config();
        let taps: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let bank = FilterBank::new(Footprint::square5(), cfg, taps).unwrap();
        let wide = bank.widened(Footprint::new(9, 7).unwrap()).unwrap();
        let z = ImageGrid::from_fn(10, 9, |m, n| ((m * 3 + n * 5) % 13) as f64);
        let sel = SelectionMap::new(10, 9, (0..90).map(|i| (i % 2) as u32).collect()).unwrap();
        let a = blade_apply(&bank, &sel, &z).unwrap();
        let b = blade_apply(&wide, &sel, &z).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(bank.widened(Footprint::new(3, 3).unwrap()).is_err());
    }

    #[test]
    fn constant_image_selects_lowest_strength() {
        let cfg = SelectionConfig::structure_tensor_default();
        let mut bank = FilterBank::zeros(Footprint::square5(), cfg);
        for k in 0..bank.num_filters() {
            bank.filter_mut(k).iter_mut().for_each(|t| *t = 0.01 * (k + 1) as f64);
        }
        let z = ImageGrid::filled(9, 9, 2.0);
        let out = select_and_apply(&bank, &z, None).unwrap();
        let expect = 2.0 * bank.filter(0).iter().sum::<f64>();
        assert!(out.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }
}
