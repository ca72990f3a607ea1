//! Color-space conversion, HSV foreground filtering, and slide tiling.
//!
//! The foreground rule is a band-pass in hue and value with a saturation
//! floor, applied with strict inequalities: 0.5 < h < 0.65, s > 0.1,
//! 0.5 < v < 0.9. Patches whose foreground ratio reaches `min_fg` become
//! training data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("pixel buffer length {len} does not match {width}x{height} RGB")]
    PixelLength { width: usize, height: usize, len: usize },
    #[error("rotate_flip requires a square image, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("failed to read image {path}: {source}")]
    Read { path: String, source: image::ImageError },
    #[error("failed to write image {path}: {source}")]
    Write { path: String, source: image::ImageError },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Source resolution tag carried through manifests and sampling filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResolutionTag {
    #[serde(rename = "10x")]
    R10x,
    #[serde(rename = "20x")]
    R20x,
    #[serde(rename = "40x")]
    R40x,
    #[serde(rename = "unknown")]
    Unknown,
}

impl std::str::FromStr for ResolutionTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "10x" => Ok(ResolutionTag::R10x),
            "20x" => Ok(ResolutionTag::R20x),
            "40x" => Ok(ResolutionTag::R40x),
            "unknown" => Ok(ResolutionTag::Unknown),
            other => Err(format!("unknown resolution tag: {other}")),
        }
    }
}

/// Provenance of a patch within its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMeta {
    pub dataset_id: String,
    pub source_id: String,
    pub x: u32,
    pub y: u32,
    pub resolution_tag: ResolutionTag,
}

impl Default for PatchMeta {
    fn default() -> Self {
        PatchMeta {
            dataset_id: String::new(),
            source_id: String::new(),
            x: 0,
            y: 0,
            resolution_tag: ResolutionTag::Unknown,
        }
    }
}

/// Row-major 8-bit RGB raster. Training patches are square with the
/// configured side; sources may be any size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub meta: PatchMeta,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, meta: PatchMeta) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(ImagingError::PixelLength { width, height, len: pixels.len() });
        }
        Ok(ImagePatch { width, height, pixels, meta })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        ImagePatch { width, height, pixels, meta: PatchMeta::default() }
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bit-exact crop of a window fully inside the raster.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> ImagePatch {
        assert!(x + w <= self.width && y + h <= self.height);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        ImagePatch {
            width: w,
            height: h,
            pixels,
            meta: PatchMeta { x: x as u32, y: y as u32, ..self.meta.clone() },
        }
    }
}

/// HSV triple with all components in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvPixel {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

/// Standard hexcone RGB -> HSV, every component scaled to [0, 1].
/// Hue is 0 when saturation is 0.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> HsvPixel {
    rgb_f64_to_hsv(f64::from(r) / 255.0, f64::from(g) / 255.0, f64::from(b) / 255.0)
}

/// Hexcone conversion on unit-range floats, shared with the augmentation
/// pipeline which works in f64 between stages.
pub fn rgb_f64_to_hsv(rf: f64, gf: f64, bf: f64) -> HsvPixel {
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        let mut h = (gf - bf) / delta / 6.0;
        if h < 0.0 {
            h += 1.0;
        }
        h
    } else if max == gf {
        ((bf - rf) / delta + 2.0) / 6.0
    } else {
        ((rf - gf) / delta + 4.0) / 6.0
    };
    HsvPixel { h, s, v }
}

/// Inverse hexcone conversion, used by the hue-jitter augmentation.
pub fn hsv_to_rgb(p: HsvPixel) -> [u8; 3] {
    let [rf, gf, bf] = hsv_to_rgb_f64(p);
    [quantize_channel(rf), quantize_channel(gf), quantize_channel(bf)]
}

/// Inverse hexcone conversion on unit-range floats.
pub fn hsv_to_rgb_f64(p: HsvPixel) -> [f64; 3] {
    let h6 = (p.h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let v = p.v;
    let a = v * (1.0 - p.s);
    let b = v * (1.0 - p.s * f);
    let c = v * (1.0 - p.s * (1.0 - f));
    let (rf, gf, bf) = match sector {
        0 => (v, c, a),
        1 => (b, v, a),
        2 => (a, v, c),
        3 => (a, b, v),
        4 => (c, a, v),
        _ => (v, a, b),
    };
    [rf, gf, bf]
}

/// Round-half-even quantization of a [0,1] channel to 8 bits.
pub fn quantize_channel(v: f64) -> u8 {
    let scaled = (v * 255.0).clamp(0.0, 255.0);
    scaled.round_ties_even() as u8
}

/// The published foreground rule, all inequalities strict.
pub fn is_foreground(p: HsvPixel) -> bool {
    p.h > 0.5 && p.h < 0.65 && p.s > 0.1 && p.v > 0.5 && p.v < 0.9
}

/// Fraction of pixels classified foreground.
pub fn foreground_ratio(patch: &ImagePatch) -> f64 {
    assert!(patch.width * patch.height > 0, "foreground_ratio on empty patch");
    let mut count = 0usize;
    for px in patch.pixels.chunks_exact(3) {
        if is_foreground(rgb_to_hsv(px[0], px[1], px[2])) {
            count += 1;
        }
    }
    count as f64 / (patch.width * patch.height) as f64
}

/// Grid-tile a source raster into square patches, keeping those whose
/// foreground ratio reaches `min_fg`. Border remainders smaller than one
/// tile are discarded. Returns patches in (y, x) scan order.
pub fn tile_source(
    source: &ImagePatch,
    side: usize,
    stride: usize,
    min_fg: f64,
) -> Vec<ImagePatch> {
    assert!(side > 0 && stride > 0);
    let mut out = Vec::new();
    if source.width < side || source.height < side {
        return out;
    }
    let mut y = 0;
    while y + side <= source.height {
        let mut x = 0;
        while x + side <= source.width {
            let patch = source.crop(x, y, side, side);
            if foreground_ratio(&patch) >= min_fg {
                out.push(patch);
            }
            x += stride;
        }
        y += stride;
    }
    out
}

/// Load a PNG or BMP raster as RGB.
pub fn load_rgb(path: &Path) -> Result<ImagePatch> {
    let img = image::open(path)
        .map_err(|source| ImagingError::Read { path: path.display().to_string(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ImagePatch::new(w as usize, h as usize, img.into_raw(), PatchMeta::default())
}

/// Write an RGB raster as PNG.
pub fn save_png(patch: &ImagePatch, path: &Path) -> Result<()> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(patch.width as u32, patch.height as u32, patch.pixels.clone())
            .expect("pixel length invariant");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImagingError::Write { path: path.display().to_string(), source })
}
