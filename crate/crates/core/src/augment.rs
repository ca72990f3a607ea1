//! The stochastic augmentation function producing two views per patch:
//! random resized crop, 90-degree rotations and axis flips, color jitter,
//! and Gaussian blur.
//!
//! All floating-point work accumulates in f64 and quantizes with
//! round-half-even, so outputs are byte-identical across platforms and
//! worker counts. Every random draw comes from the caller-supplied
//! [`RngStream`].

use serde::{Deserialize, Serialize};

use crate::imaging::{
    hsv_to_rgb_f64, rgb_f64_to_hsv, HsvPixel, ImagePatch, ImagingError, Result,
};
use crate::rng::RngStream;

/// Color jitter strength: (brightness, contrast, saturation, hue) as
/// fractions of possible change.
pub type JitterFactors = (f64, f64, f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterPreset {
    None,
    #[default]
    Light,
    Medium,
    Heavy,
}

impl JitterPreset {
    pub fn factors(self) -> JitterFactors {
        match self {
            JitterPreset::None => (0.0, 0.0, 0.0, 0.0),
            JitterPreset::Light => (0.4, 0.4, 0.4, 0.2),
            JitterPreset::Medium => (0.8, 0.8, 0.8, 0.2),
            JitterPreset::Heavy => (0.8, 0.8, 0.8, 0.4),
        }
    }
}

/// The augmentation policy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_min_area: f64,
    pub crop_max_area: f64,
    /// Aspect ratio range for the random resized crop.
    pub crop_aspect_min: f64,
    pub crop_aspect_max: f64,
    pub jitter: JitterPreset,
    pub blur_prob: f64,
    /// Uniform rotation over {0, 90, 180, 270} degrees when enabled.
    pub rotate: bool,
    /// Independent 50% flip per axis when enabled.
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min_area: 0.01,
            crop_max_area: 1.0,
            crop_aspect_min: 0.75,
            crop_aspect_max: 4.0 / 3.0,
            jitter: JitterPreset::Light,
            blur_prob: 0.5,
            rotate: true,
            flip: true,
        }
    }
}

impl AugmentConfig {
    /// Identity policy: every augmentation disabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop_min_area: 1.0,
            crop_max_area: 1.0,
            crop_aspect_min: 1.0,
            crop_aspect_max: 1.0,
            jitter: JitterPreset::None,
            blur_prob: 0.0,
            rotate: false,
            flip: false,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.crop_min_area > 0.0 && self.crop_min_area <= self.crop_max_area) {
            return Err(format!(
                "crop area range invalid: [{}, {}]",
                self.crop_min_area, self.crop_max_area
            ));
        }
        if self.crop_max_area > 1.0 {
            return Err(format!("crop_max_area {} > 1", self.crop_max_area));
        }
        if !(self.crop_aspect_min > 0.0 && self.crop_aspect_min <= self.crop_aspect_max) {
            return Err("crop aspect range invalid".into());
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(format!("blur_prob {} outside [0,1]", self.blur_prob));
        }
        Ok(())
    }
}

fn quantize_255(v: f64) -> u8 {
    let scaled = v.clamp(0.0, 255.0);
    scaled.round_ties_even() as u8
}

/// Crop a uniformly sampled rectangle (area fraction in
/// [crop_min_area, crop_max_area], aspect in the configured range) and
/// resize it back to the input size with f64 bilinear interpolation.
pub fn random_resized_crop(img: &ImagePatch, cfg: &AugmentConfig, rng: &mut RngStream) -> ImagePatch {
    let (w, h) = (img.width, img.height);
    let area_frac = rng.uniform(cfg.crop_min_area, cfg.crop_max_area);
    let aspect = rng.uniform(cfg.crop_aspect_min, cfg.crop_aspect_max);
    let target_area = area_frac * (w * h) as f64;
    let cw = ((target_area * aspect).sqrt().round() as usize).clamp(1, w);
    let ch = ((target_area / aspect).sqrt().round() as usize).clamp(1, h);
    let x0 = rng.below(w - cw + 1);
    let y0 = rng.below(h - ch + 1);
    let crop = img.crop(x0, y0, cw, ch);
    if cw == w && ch == h {
        // identity crop resizes to itself; skip interpolation entirely
        let mut out = crop;
        out.meta = img.meta.clone();
        return out;
    }
    let mut out = bilinear_resize(&crop, w, h);
    out.meta = img.meta.clone();
    out
}

/// Bilinear resize with f64 accumulation and round-half-even quantization.
/// Pixel centers follow the half-pixel convention, so same-size resizes are
/// exact copies.
pub fn bilinear_resize(img: &ImagePatch, out_w: usize, out_h: usize) -> ImagePatch {
    let (w, h) = (img.width, img.height);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut pixels = vec![0u8; out_w * out_h * 3];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let p00 = img.rgb(x0, y0);
            let p10 = img.rgb(x1, y0);
            let p01 = img.rgb(x0, y1);
            let p11 = img.rgb(x1, y1);
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - wx) + f64::from(p10[c]) * wx;
                let bot = f64::from(p01[c]) * (1.0 - wx) + f64::from(p11[c]) * wx;
                pixels[(oy * out_w + ox) * 3 + c] = quantize_255(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    ImagePatch { width: out_w, height: out_h, pixels, meta: img.meta.clone() }
}

/// Rotation by a uniformly drawn multiple of 90 degrees plus independent
/// 50% flips per axis. Pure pixel permutation; requires a square image.
pub fn rotate_flip(img: &ImagePatch, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<ImagePatch> {
    if img.width != img.height {
        return Err(ImagingError::NotSquare { width: img.width, height: img.height });
    }
    let quarter_turns = if cfg.rotate { rng.below(4) } else { 0 };
    let flip_h = cfg.flip && rng.bernoulli(0.5);
    let flip_v = cfg.flip && rng.bernoulli(0.5);
    Ok(apply_rotate_flip(img, quarter_turns, flip_h, flip_v))
}

/// Deterministic core of [`rotate_flip`]: `quarter_turns` clockwise, then
/// optional horizontal and vertical flips.
pub fn apply_rotate_flip(img: &ImagePatch, quarter_turns: usize, flip_h: bool, flip_v: bool) -> ImagePatch {
    let side = img.width;
    let mut out = img.clone();
    for y in 0..side {
        for x in 0..side {
            // clockwise rotation: source pixel for output (x, y)
            let (mut sx, mut sy) = match quarter_turns % 4 {
                0 => (x, y),
                1 => (y, side - 1 - x),
                2 => (side - 1 - x, side - 1 - y),
                _ => (side - 1 - y, x),
            };
            if flip_h {
                sx = side - 1 - sx;
            }
            if flip_v {
                sy = side - 1 - sy;
            }
            out.set_rgb(x, y, img.rgb(sx, sy));
        }
    }
    out
}

/// Per-view jitter: brightness/contrast/saturation factors drawn from
/// U[max(0, 1-s), 1+s], hue shift from U[-h, +h] of the hue circle, the four
/// sub-operations applied in a random order. Works in f64 end to end and
/// quantizes once.
pub fn color_jitter(img: &ImagePatch, preset: JitterPreset, rng: &mut RngStream) -> ImagePatch {
    color_jitter_with_factors(img, preset.factors(), rng)
}

pub fn color_jitter_with_factors(
    img: &ImagePatch,
    (bs, cs, ss, hs): JitterFactors,
    rng: &mut RngStream,
) -> ImagePatch {
    if (bs, cs, ss, hs) == (0.0, 0.0, 0.0, 0.0) {
        return img.clone();
    }
    let fb = rng.uniform((1.0 - bs).max(0.0), 1.0 + bs);
    let fc = rng.uniform((1.0 - cs).max(0.0), 1.0 + cs);
    let fs = rng.uniform((1.0 - ss).max(0.0), 1.0 + ss);
    let fh = rng.uniform(-hs, hs);
    let mut order = [0usize, 1, 2, 3];
    rng.shuffle(&mut order);

    let mut data: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v)).collect();
    for op in order {
        match op {
            0 => {
                if fb != 1.0 {
                    for v in &mut data {
                        *v = (*v * fb).clamp(0.0, 255.0);
                    }
                }
            }
            1 => {
                if fc != 1.0 {
                    // blend with the mean gray level of the current image
                    let mean = data
                        .chunks_exact(3)
                        .map(|p| luma(p[0], p[1], p[2]))
                        .sum::<f64>()
                        / (img.width * img.height) as f64;
                    for v in &mut data {
                        *v = (mean + (*v - mean) * fc).clamp(0.0, 255.0);
                    }
                }
            }
            2 => {
                if fs != 1.0 {
                    for p in data.chunks_exact_mut(3) {
                        let gray = luma(p[0], p[1], p[2]);
                        for v in p {
                            *v = (gray + (*v - gray) * fs).clamp(0.0, 255.0);
                        }
                    }
                }
            }
            _ => {
                if fh != 0.0 {
                    for p in data.chunks_exact_mut(3) {
                        let hsv = rgb_f64_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
                        let shifted =
                            HsvPixel { h: (hsv.h + fh).rem_euclid(1.0), s: hsv.s, v: hsv.v };
                        let [r, g, b] = hsv_to_rgb_f64(shifted);
                        p[0] = (r * 255.0).clamp(0.0, 255.0);
                        p[1] = (g * 255.0).clamp(0.0, 255.0);
                        p[2] = (b * 255.0).clamp(0.0, 255.0);
                    }
                }
            }
        }
    }
    let pixels = data.into_iter().map(quantize_255).collect();
    ImagePatch { width: img.width, height: img.height, pixels, meta: img.meta.clone() }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Kernel side for a given patch side: round(0.1 * side), bumped to the next
/// odd number when even (224 -> 23).
pub fn blur_kernel_side(patch_side: usize) -> usize {
    let k = (0.1 * patch_side as f64).round() as usize;
    let k = if k.is_multiple_of(2) { k + 1 } else { k };
    k.max(1)
}

/// Separable Gaussian blur with reflect padding, computed in f64.
/// Returns the un-quantized channel values so mass-conservation can be
/// checked before rounding.
pub fn gaussian_blur_f64(img: &ImagePatch, sigma: f64, ksize: usize) -> Vec<f64> {
    let radius = ksize / 2;
    let mut kernel = Vec::with_capacity(ksize);
    for i in 0..ksize {
        let d = i as f64 - radius as f64;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (w, h) = (img.width, img.height);
    // mirror without repeating the edge sample
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
        }
        i as usize
    };
    let mut horizontal = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius as isize, w);
                    acc += kv * f64::from(img.pixels[(y * w + sx) * 3 + c]);
                }
                horizontal[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius as isize, h);
                    acc += kv * horizontal[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Blur applied with probability `cfg.blur_prob`, sigma ~ U[0.1, 2.0],
/// kernel side from [`blur_kernel_side`].
pub fn gaussian_blur(img: &ImagePatch, cfg: &AugmentConfig, rng: &mut RngStream) -> ImagePatch {
    if !rng.bernoulli(cfg.blur_prob) {
        return img.clone();
    }
    let sigma = rng.uniform(0.1, 2.0);
    let ksize = blur_kernel_side(img.width);
    let data = gaussian_blur_f64(img, sigma, ksize);
    let pixels = data.into_iter().map(quantize_255).collect();
    ImagePatch { width: img.width, height: img.height, pixels, meta: img.meta.clone() }
}

/// One fully augmented view: crop -> rotate/flip -> jitter -> blur.
pub fn make_view(img: &ImagePatch, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<ImagePatch> {
    let cropped = random_resized_crop(img, cfg, rng);
    let rotated = rotate_flip(&cropped, cfg, rng)?;
    let jittered = color_jitter(&rotated, cfg.jitter, rng);
    Ok(gaussian_blur(&jittered, cfg, rng))
}

/// The two stochastically augmented views of one source image, each drawn
/// from its own independent stream.
pub fn make_views(
    img: &ImagePatch,
    cfg: &AugmentConfig,
    rng_pair: (&mut RngStream, &mut RngStream),
) -> Result<(ImagePatch, ImagePatch)> {
    Ok((make_view(img, cfg, rng_pair.0)?, make_view(img, cfg, rng_pair.1)?))
}
