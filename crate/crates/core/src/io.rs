//! On-disk formats: images, frame sequences, filter banks (`BLADEFB1`) and
//! flow fields (`BLFLOW01`). All multi-byte fields are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::apps::FlowField;
use crate::error::{BladeError, Result};
use crate::features::SelectionConfig;
use crate::grid::{luma, ColorImage, FrameSequence, ImageGrid};
use crate::net::{FilterBank, Footprint};

pub const BANK_MAGIC: &[u8; 8] = b"BLADEFB1";
pub const BANK_VERSION: u32 = 1;
pub const FLOW_MAGIC: &[u8; 8] = b"BLFLOW01";

const KIND_STRENGTH: u32 = 1;
const KIND_COHERENCE: u32 = 2;
const KIND_INTENSITY: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_code(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(BladeError::Format(format!(
            "{}: unsupported image extension (use .png, .pgm or .ppm)",
            path.display()
        ))),
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    format_for(path)?;
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    Ok(reader.decode()?)
}

fn planes_from_rgb(img: &DynamicImage) -> ColorImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (r, g, b) = if img.color().bytes_per_pixel() / img.color().channel_count() > 1 {
        let buf = img.to_rgb16();
        let s = 255.0 / 65535.0;
        let plane = |c: usize| ImageGrid::from_fn(w, h, |m, n| buf.get_pixel(m as u32, n as u32)[c] as f64 * s);
        (plane(0), plane(1), plane(2))
    } else {
        let buf = img.to_rgb8();
        let plane = |c: usize| ImageGrid::from_fn(w, h, |m, n| buf.get_pixel(m as u32, n as u32)[c] as f64);
        (plane(0), plane(1), plane(2))
    };
    ColorImage { r, g, b }
}

/// Loads an image on the 0..255 scale (16-bit files are rescaled). Color
/// inputs are reduced to luma.
pub fn load_gray(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let img = open_image(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        return Ok(luma(&planes_from_rgb(&img)));
    }
    Ok(match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_luma8();
            ImageGrid::new(w, h, buf.into_raw().into_iter().map(f64::from).collect())?
        }
        _ => {
            let buf = img.to_luma16();
            let s = 255.0 / 65535.0;
            ImageGrid::new(w, h, buf.into_raw().into_iter().map(|v| v as f64 * s).collect())?
        }
    })
}

/// Loads an RGB image on the 0..255 scale; grayscale files are replicated.
pub fn load_color(path: impl AsRef<Path>) -> Result<ColorImage> {
    let img = open_image(path.as_ref())?;
    if img.color().has_color() {
        Ok(planes_from_rgb(&img))
    } else {
        Ok(ColorImage::from_gray(&load_gray(path)?))
    }
}

/// Maps `[lo, hi]` to the code range of `depth`, rounding and clamping.
pub fn quantize(v: f64, lo: f64, hi: f64, depth: BitDepth) -> u16 {
    let max = depth.max_code();
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t * max).round().clamp(0.0, max) as u16
}

pub fn dequantize(q: u16, lo: f64, hi: f64, depth: BitDepth) -> f64 {
    lo + q as f64 / depth.max_code() * (hi - lo)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Writes a grayscale image, mapping `range` to black..white.
pub fn save_gray(path: impl AsRef<Path>, img: &ImageGrid, range: (f64, f64), depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let fmt = format_for(path)?;
    ensure_parent(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let codes = img.data().iter().map(|&v| quantize(v, range.0, range.1, depth));
    match depth {
        BitDepth::Eight => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w, h, codes.map(|c| c as u8).collect()).expect("buffer size matches dims");
            buf.save_with_format(path, fmt)?;
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w, h, codes.collect()).expect("buffer size matches dims");
            buf.save_with_format(path, fmt)?;
        }
    }
    Ok(())
}

/// Writes an RGB image, mapping `range` to black..white in every channel.
pub fn save_color(path: impl AsRef<Path>, img: &ColorImage, range: (f64, f64), depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let fmt = format_for(path)?;
    ensure_parent(path)?;
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut codes = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        for c in ch {
            codes.push(quantize(c.data()[i], range.0, range.1, depth));
        }
    }
    match depth {
        BitDepth::Eight => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w as u32, h as u32, codes.into_iter().map(|c| c as u8).collect())
                    .expect("buffer size matches dims");
            buf.save_with_format(path, fmt)?;
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w as u32, h as u32, codes).expect("buffer size matches dims");
            buf.save_with_format(path, fmt)?;
        }
    }
    Ok(())
}

/// Sidecar of an exported sequence. Frames are 16-bit PNGs spanning
/// `[value_min, value_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub pde: String,
    /// Time between stored frames.
    pub dt: f64,
    pub dx: f64,
    /// Number of solver steps that produced the sequence.
    pub step_count: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub value_min: f64,
    pub value_max: f64,
    #[serde(default)]
    pub parameters: serde_json::Value,
}

pub const SEQUENCE_META: &str = "sequence.json";

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame_{k:04}.png"))
}

/// Writes `frame_0000.png, ...` and `sequence.json` into `dir`. The
/// `value_min`/`value_max` fields of `meta` are overwritten with the data
/// range.
pub fn write_sequence(dir: impl AsRef<Path>, seq: &FrameSequence, mut meta: SequenceMeta) -> Result<SequenceMeta> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let lo = seq.frames().iter().map(ImageGrid::min).fold(f64::INFINITY, f64::min);
    let hi = seq
        .frames()
        .iter()
        .map(ImageGrid::max)
        .fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(BladeError::invalid("cannot export a sequence with non-finite samples"));
    }
    let (w, h) = seq.dims();
    meta.frames = seq.len();
    meta.width = w;
    meta.height = h;
    meta.value_min = lo;
    meta.value_max = hi;
    for (k, f) in seq.frames().iter().enumerate() {
        save_gray(frame_path(dir, k), f, (lo, hi), BitDepth::Sixteen)?;
    }
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join(SEQUENCE_META), json + "\n")?;
    Ok(meta)
}

pub fn read_sequence_meta(dir: impl AsRef<Path>) -> Result<SequenceMeta> {
    let path = dir.as_ref().join(SEQUENCE_META);
    let text = fs::read_to_string(&path).map_err(|e| BladeError::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<(FrameSequence, SequenceMeta)> {
    let dir = dir.as_ref();
    let meta = read_sequence_meta(dir)?;
    let mut frames = Vec::with_capacity(meta.frames);
    for k in 0..meta.frames {
        let path = frame_path(dir, k);
        let img = open_image(&path)?;
        let buf = img.to_luma16();
        if (buf.width() as usize, buf.height() as usize) != (meta.width, meta.height) {
            return Err(BladeError::Format(format!(
                "{}: expected {}x{}",
                path.display(),
                meta.width,
                meta.height
            )));
        }
        let data = buf
            .into_raw()
            .into_iter()
            .map(|q| dequantize(q, meta.value_min, meta.value_max, BitDepth::Sixteen))
            .collect();
        frames.push(ImageGrid::new(meta.width, meta.height, data)?.with_dx(meta.dx));
    }
    Ok((FrameSequence::new(frames, meta.dt)?, meta))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| BladeError::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes one bank. Taps are stored as 32-bit floats.
pub fn encode_bank(bank: &FilterBank) -> Result<Vec<u8>> {
    let sel = bank.selection();
    let fp = bank.footprint();
    let mut out = Vec::with_capacity(64 + 4 * bank.taps().len());
    out.extend_from_slice(BANK_MAGIC);
    put_u32(&mut out, BANK_VERSION as usize)?;
    put_u32(&mut out, fp.width())?;
    put_u32(&mut out, fp.height())?;
    out.extend_from_slice(&sel.rho.to_le_bytes());
    put_u32(&mut out, sel.orientation_bins)?;
    let mut features = vec![
        (KIND_STRENGTH, &sel.strength_thresholds),
        (KIND_COHERENCE, &sel.coherence_thresholds),
    ];
    if let Some(t) = &sel.intensity_thresholds {
        features.push((KIND_INTENSITY, t));
    }
    put_u32(&mut out, features.len())?;
    for (kind, t) in features {
        put_u32(&mut out, kind as usize)?;
        put_u32(&mut out, t.len())?;
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, bank.num_filters())?;
    for &t in bank.taps() {
        let f = t as f32;
        if !f.is_finite() {
            return Err(BladeError::invalid(format!("tap {t} overflows a 32-bit float")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(BladeError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_bank_at(c: &mut Cursor) -> Result<FilterBank> {
    if c.take(8)? != BANK_MAGIC {
        return Err(BladeError::Format("not a BLADEFB1 filter bank".into()));
    }
    let version = c.u32()?;
    if version != BANK_VERSION as usize {
        return Err(BladeError::Format(format!("unsupported bank version {version}")));
    }
    let (fw, fh) = (c.u32()?, c.u32()?);
    let footprint = Footprint::new(fw, fh).map_err(|e| BladeError::Format(e.to_string()))?;
    let rho = c.f64()?;
    let orientation_bins = c.u32()?;
    let nfeat = c.u32()?;
    let mut sel = SelectionConfig {
        orientation_bins,
        strength_thresholds: vec![],
        coherence_thresholds: vec![],
        intensity_thresholds: None,
        rho,
    };
    for _ in 0..nfeat {
        let kind = c.u32()?;
        let n = c.u32()?;
        if n > c.buf.len() / 8 {
            return Err(BladeError::Format(format!("implausible threshold count {n}")));
        }
        let t = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        match kind as u32 {
            KIND_STRENGTH => sel.strength_thresholds = t,
            KIND_COHERENCE => sel.coherence_thresholds = t,
            KIND_INTENSITY => sel.intensity_thresholds = Some(t),
            k => return Err(BladeError::Format(format!("unknown feature kind {k}"))),
        }
    }
    sel.validate().map_err(|e| BladeError::Format(e.to_string()))?;
    let num_filters = c.u32()?;
    if num_filters != sel.num_filters() {
        return Err(BladeError::Format(format!(
            "header declares {num_filters} filters but the feature bins give {}",
            sel.num_filters()
        )));
    }
    let n = num_filters * footprint.area();
    if n > (c.buf.len() - c.pos) / 4 {
        return Err(BladeError::Format("truncated tap data".into()));
    }
    let taps = (0..n).map(|_| c.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    FilterBank::new(footprint, sel, taps).map_err(|e| BladeError::Format(e.to_string()))
}

/// Parses one or more concatenated bank records.
pub fn decode_banks(bytes: &[u8]) -> Result<Vec<FilterBank>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let mut out = vec![decode_bank_at(&mut c)?];
    while !c.done() {
        out.push(decode_bank_at(&mut c)?);
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<FilterBank> {
    let mut banks = decode_banks(bytes)?;
    if banks.len() != 1 {
        return Err(BladeError::Format(format!("expected one bank, found {}", banks.len())));
    }
    Ok(banks.remove(0))
}

/// Writes the banks back to back; a flux model is stored as its x and y
/// banks in that order.
pub fn save_banks(path: impl AsRef<Path>, banks: &[&FilterBank]) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    for b in banks {
        w.write_all(&encode_bank(b)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_banks(path: impl AsRef<Path>) -> Result<Vec<FilterBank>> {
    let path = path.as_ref();
    decode_banks(&fs::read(path)?).map_err(|e| match e {
        BladeError::Format(m) => BladeError::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn save_bank(path: impl AsRef<Path>, bank: &FilterBank) -> Result<()> {
    save_banks(path, &[bank])
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    decode_bank(&fs::read(path)?).map_err(|e| match e {
        BladeError::Format(m) => BladeError::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn encode_flow(flow: &FlowField) -> Result<Vec<u8>> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(16 + 8 * w * h);
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(&mut out, w)?;
    put_u32(&mut out, h)?;
    for plane in [&flow.vx, &flow.vy] {
        for &v in plane.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != FLOW_MAGIC {
        return Err(BladeError::Format("not a BLFLOW01 flow field".into()));
    }
    let (w, h) = (c.u32()?, c.u32()?);
    if w.checked_mul(h).and_then(|n| n.checked_mul(8)) != Some(bytes.len() - 16) {
        return Err(BladeError::Format(format!(
            "{w}x{h} flow needs {} payload bytes, file has {}",
            8 * w * h,
            bytes.len() - 16
        )));
    }
    let mut plane = || -> Result<ImageGrid> {
        let v = (0..w * h).map(|_| c.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BladeError::Format("flow contains non-finite values".into()));
        }
        ImageGrid::new(w, h, v)
    };
    let vx = plane()?;
    let vy = plane()?;
    FlowField::new(vx, vy)
}

pub fn save_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    fs::write(path, encode_flow(flow)?)?;
    Ok(())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    decode_flow(&bytes)
}

/// True when `err` is a missing file or directory.
pub fn is_not_found(err: &BladeError) -> bool {
    matches!(err, BladeError::Io(e) if e.kind() == ErrorKind::NotFound)
        || matches!(err, BladeError::Image(image::ImageError::IoError(e)) if e.kind() == ErrorKind::NotFound)
}
