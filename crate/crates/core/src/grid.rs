//! Image containers and the low-level numerics shared by every other module:
//! replicate-border sampling, finite differences, separable and 2-D
//! correlation, area downscaling and quality metrics.
//!
//! Pixel `(m, n)` is column `m`, row `n`; samples are stored row-major.

use crate::error::{BladeError, Result};

/// A 2-D real-valued scalar field `u_{m,n}` with grid spacing `dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    dx: f64,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(BladeError::invalid("image dimensions must be at least 1x1"));
        }
        if data.len() != width * height {
            return Err(BladeError::invalid(format!(
                "expected {} samples for a {width}x{height} image, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(BladeError::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(ImageGrid {
            width,
            height,
            dx: 1.0,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be at least 1x1");
        ImageGrid {
            width,
            height,
            dx: 1.0,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be at least 1x1");
        let mut data = Vec::with_capacity(width * height);
        for n in 0..height {
            for m in 0..width {
                data.push(f(m, n));
            }
        }
        ImageGrid {
            width,
            height,
            dx: 1.0,
            data,
        }
    }

    pub fn with_dx(mut self, dx: f64) -> Self {
        assert!(dx > 0.0, "grid spacing must be positive");
        self.dx = dx;
        self
    }

    /// A zero image with the same shape and spacing.
    pub fn zeros_like(&self) -> Self {
        ImageGrid {
            width: self.width,
            height: self.height,
            dx: self.dx,
            data: vec![0.0; self.data.len()],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.dx
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.data[n * self.width + m]
    }

    #[inline]
    pub fn set(&mut self, m: usize, n: usize, value: f64) {
        self.data[n * self.width + m] = value;
    }

    /// Sample with replicate extension: out-of-range coordinates are clamped
    /// onto the nearest border pixel.
    #[inline]
    pub fn sample_extended(&self, m: isize, n: isize) -> f64 {
        let (mc, nc) = self.clamp_index(m, n);
        self.data[nc * self.width + mc]
    }

    #[inline]
    pub fn clamp_index(&self, m: isize, n: isize) -> (usize, usize) {
        (
            m.clamp(0, self.width as isize - 1) as usize,
            n.clamp(0, self.height as isize - 1) as usize,
        )
    }

    pub fn ensure_same_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(BladeError::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the first NaN or infinite sample, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            dx: self.dx,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        self.ensure_same_dims(other)?;
        Ok(ImageGrid {
            width: self.width,
            height: self.height,
            dx: self.dx,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scaled(&self, s: f64) -> ImageGrid {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &ImageGrid) -> Result<()> {
        self.ensure_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Sum of squared differences.
    pub fn sq_dist(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn crop(&self, m0: usize, n0: usize, width: usize, height: usize) -> Result<ImageGrid> {
        if m0 + width > self.width || n0 + height > self.height || width == 0 || height == 0 {
            return Err(BladeError::invalid(format!(
                "crop {width}x{height}+{m0}+{n0} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(ImageGrid::from_fn(width, height, |m, n| self.get(m0 + m, n0 + n)).with_dx(self.dx))
    }

    /// Swap the roles of rows and columns.
    pub fn transposed(&self) -> ImageGrid {
        ImageGrid::from_fn(self.height, self.width, |m, n| self.get(n, m)).with_dx(self.dx)
    }

    pub fn flipped_horizontal(&self) -> ImageGrid {
        let w = self.width;
        ImageGrid::from_fn(w, self.height, |m, n| self.get(w - 1 - m, n)).with_dx(self.dx)
    }

    pub fn flipped_vertical(&self) -> ImageGrid {
        let h = self.height;
        ImageGrid::from_fn(self.width, h, |m, n| self.get(m, h - 1 - n)).with_dx(self.dx)
    }

    /// The eight symmetries of the square grid, indexed 0..8. Index 0 is the
    /// identity.
    pub fn dihedral(&self, k: usize) -> ImageGrid {
        let base = if k & 4 != 0 { self.transposed() } else { self.clone() };
        let base = if k & 1 != 0 { base.flipped_horizontal() } else { base };
        if k & 2 != 0 {
            base.flipped_vertical()
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Forward,
    Backward,
}

/// One-sided difference `(D± u) / dx` with replicate extension, so
/// differences across the border vanish.
pub fn finite_diff(img: &ImageGrid, axis: Axis, side: Side) -> ImageGrid {
    let (sx, sy) = match axis {
        Axis::X => (1isize, 0isize),
        Axis::Y => (0, 1),
    };
    let inv_dx = 1.0 / img.dx;
    ImageGrid::from_fn(img.width, img.height, |m, n| {
        let (m, n) = (m as isize, n as isize);
        let d = match side {
            Side::Forward => img.sample_extended(m + sx, n + sy) - img.sample_extended(m, n),
            Side::Backward => img.sample_extended(m, n) - img.sample_extended(m - sx, n - sy),
        };
        d * inv_dx
    })
    .with_dx(img.dx)
}

/// Symmetric 1-D Gaussian taps truncated at radius `ceil(4 sigma)` and
/// normalized to unit sum. `sigma == 0` gives the single tap `[1]`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(BladeError::invalid(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Separable cross-correlation with centered odd-length 1-D kernels and
/// replicate boundary.
pub fn correlate_separable(img: &ImageGrid, kx: &[f64], ky: &[f64]) -> ImageGrid {
    assert!(kx.len() % 2 == 1 && ky.len() % 2 == 1, "kernels must have odd length");
    let (w, h) = img.dims();
    let rx = kx.len() / 2;
    let ry = ky.len() / 2;
    // replicate-padded copies, then one axpy per tap so the inner loops
    // vectorize
    let mut horiz = vec![0.0; w * h];
    let mut line = vec![0.0; w + 2 * rx];
    for (row, acc) in img.data.chunks_exact(w).zip(horiz.chunks_exact_mut(w)) {
        for (j, v) in line.iter_mut().enumerate() {
            *v = row[j.saturating_sub(rx).min(w - 1)];
        }
        for (k, &c) in kx.iter().enumerate() {
            for (a, &b) in acc.iter_mut().zip(&line[k..k + w]) {
                *a += c * b;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for (n, acc) in out.chunks_exact_mut(w).enumerate() {
        for (k, &c) in ky.iter().enumerate() {
            let src = (n + k).saturating_sub(ry).min(h - 1);
            for (a, &b) in acc.iter_mut().zip(&horiz[src * w..(src + 1) * w]) {
                *a += c * b;
            }
        }
    }
    ImageGrid {
        width: w,
        height: h,
        data: out,
        dx: img.dx,
    }
}

/// Gaussian smoothing with replicate boundary; `sigma = 0` is the identity.
pub fn gaussian_convolve(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    let taps = gaussian_taps(sigma)?;
    if taps.len() == 1 {
        return Ok(img.clone());
    }
    Ok(correlate_separable(img, &taps, &taps))
}

/// A small 2-D kernel with odd dimensions, origin at the center.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    width: usize,
    height: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(width: usize, height: usize, taps: Vec<f64>) -> Result<Self> {
        if width.is_multiple_of(2) || height.is_multiple_of(2) {
            return Err(BladeError::invalid("kernel dimensions must be odd"));
        }
        if taps.len() != width * height {
            return Err(BladeError::invalid("kernel tap count does not match its dimensions"));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(BladeError::invalid("kernel taps must be finite"));
        }
        Ok(Kernel { width, height, taps })
    }

    pub fn delta() -> Self {
        Kernel {
            width: 1,
            height: 1,
            taps: vec![1.0],
        }
    }

    /// Sampled isotropic Gaussian, truncated at `ceil(4 sigma)` and normalized.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let t = gaussian_taps(sigma)?;
        let size = t.len();
        let taps = (0..size * size).map(|i| t[i / size] * t[i % size]).collect();
        Ok(Kernel {
            width: size,
            height: size,
            taps,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> (isize, isize) {
        ((self.width / 2) as isize, (self.height / 2) as isize)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let (rx, ry) = self.radius();
        if dx.abs() > rx || dy.abs() > ry {
            return 0.0;
        }
        self.taps[((dy + ry) as usize) * self.width + (dx + rx) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Spatial reversal `k~(x) = k(-x)`.
    pub fn flipped(&self) -> Kernel {
        Kernel {
            width: self.width,
            height: self.height,
            taps: self.taps.iter().rev().copied().collect(),
        }
    }

    /// `sum_l k_l k_{l+d}`, i.e. the kernel of `k~ * k`.
    pub fn autocorrelation(&self) -> Kernel {
        let (rx, ry) = self.radius();
        let (w, h) = (4 * rx as usize + 1, 4 * ry as usize + 1);
        let taps = (0..w * h)
            .map(|i| {
                let dx = (i % w) as isize - 2 * rx;
                let dy = (i / w) as isize - 2 * ry;
                let mut acc = 0.0;
                for ly in -ry..=ry {
                    for lx in -rx..=rx {
                        acc += self.at(lx, ly) * self.at(lx + dx, ly + dy);
                    }
                }
                acc
            })
            .collect();
        Kernel {
            width: w,
            height: h,
            taps,
        }
    }
}

/// `out_i = sum_j k_j u_{i+j}` with replicate extension.
pub fn correlate(img: &ImageGrid, k: &Kernel) -> ImageGrid {
    let (rx, ry) = k.radius();
    ImageGrid::from_fn(img.width, img.height, |m, n| {
        let mut acc = 0.0;
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                acc += k.at(dx, dy) * img.sample_extended(m as isize + dx, n as isize + dy);
            }
        }
        acc
    })
    .with_dx(img.dx)
}

/// `out_i = sum_j k_j u_{i-j}` with replicate extension.
pub fn convolve(img: &ImageGrid, k: &Kernel) -> ImageGrid {
    correlate(img, &k.flipped())
}

/// Exact adjoint of [`convolve`] (replicate boundary included): contributions
/// that `convolve` gathers from clamped border pixels are scattered back onto
/// them.
pub fn convolve_adjoint(v: &ImageGrid, k: &Kernel) -> ImageGrid {
    let (rx, ry) = k.radius();
    let mut out = v.zeros_like();
    for n in 0..v.height {
        for m in 0..v.width {
            let g = v.get(m, n);
            if g == 0.0 {
                continue;
            }
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    let (mc, nc) = v.clamp_index(m as isize - dx, n as isize - dy);
                    out.data[nc * v.width + mc] += k.at(dx, dy) * g;
                }
            }
        }
    }
    out
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn downscale_area(img: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 || !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(BladeError::NotDivisible {
            width: img.width,
            height: img.height,
            factor,
        });
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Ok(ImageGrid::from_fn(w, h, |m, n| {
        let mut acc = 0.0;
        for j in 0..factor {
            for i in 0..factor {
                acc += img.get(m * factor + i, n * factor + j);
            }
        }
        acc * norm
    })
    .with_dx(img.dx * factor as f64))
}

/// Keep every `factor`-th sample starting at `(0, 0)`.
pub fn subsample(img: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 || !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(BladeError::NotDivisible {
            width: img.width,
            height: img.height,
            factor,
        });
    }
    Ok(ImageGrid::from_fn(img.width / factor, img.height / factor, |m, n| {
        img.get(m * factor, n * factor)
    })
    .with_dx(img.dx * factor as f64))
}

/// Transpose of [`subsample`]: place samples at multiples of `factor`, zeros
/// elsewhere.
pub fn zero_upsample(img: &ImageGrid, factor: usize) -> ImageGrid {
    let mut out = ImageGrid::zeros(img.width * factor, img.height * factor).with_dx(img.dx / factor as f64);
    for n in 0..img.height {
        for m in 0..img.width {
            out.set(m * factor, n * factor, img.get(m, n));
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(BladeError::invalid("psnr peak must be positive"));
    }
    let mse = a.sq_dist(b)? / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5),
/// with stabilizers `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`.
pub fn mean_ssim(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(BladeError::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.width, a.height
        )));
    }
    let r = (SSIM_WINDOW / 2) as isize;
    let mut win: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|w| *w /= total);

    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    // valid-region separable filtering of a, b, a^2, b^2, ab
    let filter_valid = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut horiz = vec![0.0; ow * a.height];
        for n in 0..a.height {
            for m in 0..ow {
                horiz[n * ow + m] = win.iter().enumerate().map(|(k, w)| w * f(n * a.width + m + k)).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for n in 0..oh {
            for m in 0..ow {
                out[n * ow + m] = win.iter().enumerate().map(|(k, w)| w * horiz[(n + k) * ow + m]).sum();
            }
        }
        out
    };
    let (da, db) = (&a.data, &b.data);
    let mu_a = filter_valid(&|i| da[i]);
    let mu_b = filter_valid(&|i| db[i]);
    let aa = filter_valid(&|i| da[i] * da[i]);
    let bb = filter_valid(&|i| db[i] * db[i]);
    let ab = filter_valid(&|i| da[i] * db[i]);

    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// Three equally-sized channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub r: ImageGrid,
    pub g: ImageGrid,
    pub b: ImageGrid,
}

impl ColorImage {
    pub fn new(r: ImageGrid, g: ImageGrid, b: ImageGrid) -> Result<Self> {
        r.ensure_same_dims(&g)?;
        r.ensure_same_dims(&b)?;
        Ok(ColorImage { r, g, b })
    }

    pub fn from_gray(gray: &ImageGrid) -> Self {
        ColorImage {
            r: gray.clone(),
            g: gray.clone(),
            b: gray.clone(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.r.dims()
    }

    pub fn channels(&self) -> [&ImageGrid; 3] {
        [&self.r, &self.g, &self.b]
    }

    pub fn try_map_channels(&self, mut f: impl FnMut(&ImageGrid) -> Result<ImageGrid>) -> Result<ColorImage> {
        ColorImage::new(f(&self.r)?, f(&self.g)?, f(&self.b)?)
    }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luma(c: &ColorImage) -> ImageGrid {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let mut out = c.r.zeros_like();
    for (i, o) in out.data.iter_mut().enumerate() {
        *o = wr * c.r.data[i] + wg * c.g.data[i] + wb * c.b.data[i];
    }
    out
}

/// Frames `u^(0), u^(1), ...` spaced `dt` apart in time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<ImageGrid>,
    dt: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageGrid>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(BladeError::invalid(format!("frame spacing dt must be > 0, got {dt}")));
        }
        if frames.is_empty() {
            return Err(BladeError::invalid("a frame sequence needs at least one frame"));
        }
        for f in &frames[1..] {
            frames[0].ensure_same_dims(f)?;
        }
        Ok(FrameSequence { frames, dt })
    }

    pub fn frames(&self) -> &[ImageGrid] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ImageGrid> {
        self.frames
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first(&self) -> &ImageGrid {
        &self.frames[0]
    }

    pub fn last(&self) -> &ImageGrid {
        self.frames.last().expect("sequence is never empty")
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}
