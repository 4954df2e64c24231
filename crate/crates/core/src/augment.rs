//! Image augmentation built on a bit-specified bilinear resize.
//!
//! Bilinear resampling uses the half-pixel-center convention: destination
//! pixel `x_d` samples source coordinate `(x_d + 0.5) * w_in / w_out - 0.5`,
//! clamped to the border, and the blended value is rounded to the nearest
//! integer (ties away from zero) and clamped to `[0, 255]`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Image;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("motion blur length must be odd and >= 1, got {0}")]
    BadLength(usize),
    #[error("invalid augment profile {name:?}: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("unknown augment profile {0:?}")]
    UnknownProfile(String),
}

#[inline]
fn to_pixel(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn bilinear_resize(img: &Image, out_w: usize, out_h: usize) -> Image {
    assert!(out_w >= 1 && out_h >= 1, "output extents must be positive");
    if out_w == img.width() && out_h == img.height() {
        return img.clone();
    }
    let sx = img.width() as f64 / out_w as f64;
    let sy = img.height() as f64 / out_h as f64;
    Image::from_fn(out_w, out_h, |x, y| {
        let xs = (x as f64 + 0.5) * sx - 0.5;
        let ys = (y as f64 + 0.5) * sy - 0.5;
        to_pixel(img.sample_bilinear(xs, ys))
    })
}

/// `clamp(round(alpha * (v - 128) + 128 + beta))` per pixel.
pub fn brightness_contrast(img: &Image, alpha: f64, beta: f64) -> Image {
    assert!(alpha > 0.0, "contrast factor must be positive");
    Image::from_fn(img.width(), img.height(), |x, y| {
        to_pixel(alpha * (f64::from(img.get(x, y)) - 128.0) + 128.0 + beta)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlurAngle {
    #[serde(rename = "0")]
    Deg0,
    #[serde(rename = "45")]
    Deg45,
    #[serde(rename = "90")]
    Deg90,
    #[serde(rename = "135")]
    Deg135,
}

impl BlurAngle {
    pub const ALL: [BlurAngle; 4] = [
        BlurAngle::Deg0,
        BlurAngle::Deg45,
        BlurAngle::Deg90,
        BlurAngle::Deg135,
    ];

    /// Unit step along the blur line; image y grows downwards.
    fn step(self) -> (isize, isize) {
        match self {
            BlurAngle::Deg0 => (1, 0),
            BlurAngle::Deg45 => (1, -1),
            BlurAngle::Deg90 => (0, 1),
            BlurAngle::Deg135 => (-1, -1),
        }
    }
}

/// Averages `length` pixels along a line through each pixel, treating
/// out-of-image samples as zero.
pub fn motion_blur(img: &Image, length: usize, angle: BlurAngle) -> Result<Image, AugmentError> {
    if length == 0 || length.is_multiple_of(2) {
        return Err(AugmentError::BadLength(length));
    }
    if length == 1 {
        return Ok(img.clone());
    }
    let r = (length / 2) as isize;
    let (dx, dy) = angle.step();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let inv = 1.0 / length as f64;
    Ok(Image::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = 0.0;
        for k in -r..=r {
            let (sx, sy) = (x as isize + k * dx, y as isize + k * dy);
            if (0..w).contains(&sx) && (0..h).contains(&sy) {
                acc += f64::from(img.get(sx as usize, sy as usize));
            }
        }
        to_pixel(acc * inv)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentProfile {
    pub name: String,
    pub small_resize_prob: f64,
    pub small_sizes: Vec<usize>,
    pub final_size: usize,
    /// Additive brightness offset range; `(0, 0)` disables.
    pub brightness_delta_range: (f64, f64),
    /// Contrast factor range; `(1, 1)` disables.
    pub contrast_range: (f64, f64),
    pub blur_prob: f64,
    pub blur_lengths: Vec<usize>,
    pub crop_prob: f64,
    pub crop_fraction_range: (f64, f64),
}

impl Default for AugmentProfile {
    fn default() -> Self {
        Self::plain()
    }
}

impl AugmentProfile {
    pub const BUILTIN: [&'static str; 4] = ["plain", "stage1", "stage1_multi", "stage2"];

    /// Resize to the final size and nothing else.
    pub fn plain() -> Self {
        Self {
            name: "plain".to_string(),
            small_resize_prob: 0.0,
            small_sizes: vec![60],
            final_size: crate::extractor::INPUT_SIZE,
            brightness_delta_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            blur_prob: 0.0,
            blur_lengths: vec![3],
            crop_prob: 0.0,
            crop_fraction_range: (1.0, 1.0),
        }
    }

    /// Down to 60x60 with probability 0.5, then up to 224x224.
    pub fn stage1() -> Self {
        Self {
            name: "stage1".to_string(),
            small_resize_prob: 0.5,
            small_sizes: vec![60],
            ..Self::plain()
        }
    }

    /// Down to one of 50/60/70/80 with probability 0.45.
    pub fn stage1_multi() -> Self {
        Self {
            name: "stage1_multi".to_string(),
            small_resize_prob: 0.45,
            small_sizes: vec![50, 60, 70, 80],
            ..Self::plain()
        }
    }

    /// Stage-one resize plus brightness/contrast and motion blur.
    pub fn stage2() -> Self {
        Self {
            name: "stage2".to_string(),
            brightness_delta_range: (-20.0, 20.0),
            contrast_range: (0.8, 1.2),
            blur_prob: 0.3,
            blur_lengths: vec![3, 5, 7],
            ..Self::stage1()
        }
    }

    pub fn builtin(name: &str) -> Result<Self, AugmentError> {
        match name {
            "plain" => Ok(Self::plain()),
            "stage1" => Ok(Self::stage1()),
            "stage1_multi" => Ok(Self::stage1_multi()),
            "stage2" => Ok(Self::stage2()),
            other => Err(AugmentError::UnknownProfile(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |reason: String| {
            Err(AugmentError::InvalidProfile {
                name: self.name.clone(),
                reason,
            })
        };
        for (what, p) in [
            ("small_resize_prob", self.small_resize_prob),
            ("blur_prob", self.blur_prob),
            ("crop_prob", self.crop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{what} = {p} outside [0, 1]"));
            }
        }
        if self.final_size == 0 {
            return bad("final_size must be positive".to_string());
        }
        if self.small_sizes.is_empty() {
            return bad("small_sizes is empty".to_string());
        }
        if let Some(s) = self.small_sizes.iter().find(|&&s| s == 0 || s >= self.final_size) {
            return bad(format!("small size {s} not in [1, final_size)"));
        }
        let (f0, f1) = self.crop_fraction_range;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 1.0) {
            return bad(format!("crop fractions ({f0}, {f1}) not within (0, 1]"));
        }
        let (c0, c1) = self.contrast_range;
        if !(c0 > 0.0 && c0 <= c1) {
            return bad(format!("contrast range ({c0}, {c1}) invalid"));
        }
        let (b0, b1) = self.brightness_delta_range;
        if !(b0 <= b1) {
            return bad(format!("brightness range ({b0}, {b1}) invalid"));
        }
        if self.blur_prob > 0.0 && self.blur_lengths.is_empty() {
            return bad("blur_lengths is empty".to_string());
        }
        if let Some(&l) = self.blur_lengths.iter().find(|&&l| l % 2 == 0) {
            return bad(format!("blur length {l} is even"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// [`small_resize`], also reporting whether the downscale branch was taken.
pub fn small_resize_traced<R: Rng + ?Sized>(
    img: &Image,
    profile: &AugmentProfile,
    rng: &mut R,
) -> (Image, bool) {
    let n = profile.final_size;
    if rng.random::<f64>() < profile.small_resize_prob {
        let s = *profile.small_sizes.choose(rng).expect("small_sizes is non-empty");
        (bilinear_resize(&bilinear_resize(img, s, s), n, n), true)
    } else {
        (bilinear_resize(img, n, n), false)
    }
}

/// With probability `small_resize_prob`, resize down to a random small size;
/// always finish at `final_size x final_size`.
pub fn small_resize<R: Rng + ?Sized>(img: &Image, profile: &AugmentProfile, rng: &mut R) -> Image {
    small_resize_traced(img, profile, rng).0
}

/// Crops a random square of side `fraction * min(w, h)` and resizes it to
/// `final_size`.
pub fn crop_square<R: Rng + ?Sized>(
    img: &Image,
    fraction: f64,
    final_size: usize,
    rng: &mut R,
) -> Image {
    let short = img.width().min(img.height());
    let side = ((fraction * short as f64).round() as usize).clamp(1, short);
    let x0 = rng.random_range(0..=img.width() - side);
    let y0 = rng.random_range(0..=img.height() - side);
    bilinear_resize(&img.crop(x0, y0, side, side), final_size, final_size)
}

/// With probability `crop_prob`, crop a random square (side fraction drawn
/// from `crop_fraction_range`); the result is always `final_size` square.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, profile: &AugmentProfile, rng: &mut R) -> Image {
    let n = profile.final_size;
    if profile.crop_prob > 0.0 && rng.random::<f64>() < profile.crop_prob {
        let f = uniform(rng, profile.crop_fraction_range);
        crop_square(img, f, n, rng)
    } else {
        bilinear_resize(img, n, n)
    }
}

/// The full training-time pipeline of a profile: small resize, random crop,
/// brightness/contrast, then motion blur.
pub fn apply_profile<R: Rng + ?Sized>(img: &Image, profile: &AugmentProfile, rng: &mut R) -> Image {
    let mut out = small_resize(img, profile, rng);
    if profile.crop_prob > 0.0 {
        out = random_crop(&out, profile, rng);
    }
    let photometric = profile.brightness_delta_range != (0.0, 0.0) || profile.contrast_range != (1.0, 1.0);
    if photometric {
        let alpha = uniform(rng, profile.contrast_range);
        let beta = uniform(rng, profile.brightness_delta_range);
        out = brightness_contrast(&out, alpha, beta);
    }
    if profile.blur_prob > 0.0 && rng.random::<f64>() < profile.blur_prob {
        let length = *profile.blur_lengths.choose(rng).expect("blur_lengths is non-empty");
        let angle = *BlurAngle::ALL.choose(rng).expect("non-empty");
        out = motion_blur(&out, length, angle).expect("profile lengths are validated odd");
    }
    out
}

/// One test-time view recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TtaView {
    /// The input resized to the final size (unchanged if already that size).
    Identity,
    /// Down to `size x size`, back up to the final size.
    Scale { size: usize },
    /// Random square crop with side fraction in `[min_fraction, max_fraction]`.
    Crop { min_fraction: f64, max_fraction: f64 },
    /// Contrast factor drawn from `[min_alpha, max_alpha]`.
    Contrast { min_alpha: f64, max_alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub final_size: usize,
    pub views: Vec<TtaView>,
}

impl Default for TtaConfig {
    /// Identity, two rescalings, a random crop, and a contrast change.
    /// Compression and blur are deliberately absent.
    fn default() -> Self {
        Self {
            final_size: crate::extractor::INPUT_SIZE,
            views: vec![
                TtaView::Identity,
                TtaView::Scale { size: 160 },
                TtaView::Scale { size: 96 },
                TtaView::Crop {
                    min_fraction: 0.75,
                    max_fraction: 0.9,
                },
                TtaView::Contrast {
                    min_alpha: 0.8,
                    max_alpha: 1.2,
                },
            ],
        }
    }
}

/// Deterministic views of `img`, one per recipe. View `i` draws from its own
/// random stream so recipes do not perturb each other.
pub fn tta_views(img: &Image, config: &TtaConfig, seed: u64) -> Vec<Image> {
    let n = config.final_size;
    config
        .views
        .iter()
        .enumerate()
        .map(|(i, view)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match *view {
                TtaView::Identity => bilinear_resize(img, n, n),
                TtaView::Scale { size } => bilinear_resize(&bilinear_resize(img, size, size), n, n),
                TtaView::Crop {
                    min_fraction,
                    max_fraction,
                } => {
                    let f = uniform(&mut rng, (min_fraction, max_fraction));
                    crop_square(img, f, n, &mut rng)
                }
                TtaView::Contrast {
                    min_alpha,
                    max_alpha,
                } => {
                    let alpha = uniform(&mut rng, (min_alpha, max_alpha));
                    brightness_contrast(&bilinear_resize(img, n, n), alpha, 0.0)
                }
            }
        })
        .collect()
}

/// Mean squared 4-neighbour Laplacian over interior pixels; a proxy for
/// high-frequency energy.
pub fn laplacian_energy(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let p = |x: usize, y: usize| f64::from(img.get(x, y));
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = p(x - 1, y) + p(x + 1, y) + p(x, y - 1) + p(x, y + 1) - 4.0 * p(x, y);
            acc += lap * lap;
        }
    }
    acc / ((w - 2) * (h - 2)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| ((x * 37 + y * 11) % 256) as u8)
    }

    #[test]
    fn resize_examples() {
        let img = ramp(9, 7);
        assert_eq!(bilinear_resize(&img, 9, 7), img);
        let c = Image::filled(5, 5, 77);
        assert!(bilinear_resize(&c, 13, 3).pixels().iter().all(|&p| p == 77));
        let quad = Image::new(2, 2, vec![10, 20, 30, 40]).unwrap();
        assert_eq!(bilinear_resize(&quad, 1, 1).pixels(), &[25]);
    }

    #[test]
    fn resize_upsamples_with_half_pixel_centers() {
        // 1x2 -> 1x4: sample coordinates -0.25, 0.25, 0.75, 1.25
        let img = Image::new(2, 1, vec![0, 100]).unwrap();
        assert_eq!(bilinear_resize(&img, 4, 1).pixels(), &[0, 25, 75, 100]);
    }

    #[test]
    fn brightness_contrast_examples() {
        let img = ramp(4, 4);
        assert_eq!(brightness_contrast(&img, 1.0, 0.0), img);
        let v = |p: u8, a, b| brightness_contrast(&Image::filled(1, 1, p), a, b).pixels()[0];
        assert_eq!(v(200, 2.0, 0.0), 255);
        assert_eq!(v(100, 1.5, 10.0), 96);
    }

    #[test]
    fn brightness_contrast_inverts_up_to_rounding() {
        let img = Image::from_fn(16, 16, |x, y| (60 + (x * 7 + y * 3) % 130) as u8);
        for (a, b) in [(1.1, 5.0), (0.8, -10.0), (1.2, 3.3)] {
            let fwd = brightness_contrast(&img, a, b);
            assert!(fwd.pixels().iter().all(|&p| p > 0 && p < 255));
            let back = brightness_contrast(&fwd, 1.0 / a, -b / a);
            let worst = img
                .pixels()
                .iter()
                .zip(back.pixels())
                .map(|(&p, &q)| (i16::from(p) - i16::from(q)).abs())
                .max()
                .unwrap();
            assert!(worst <= 2);
        }
    }

    #[test]
    fn motion_blur_examples() {
        let img = ramp(6, 5);
        for angle in BlurAngle::ALL {
            assert_eq!(motion_blur(&img, 1, angle).unwrap(), img);
        }
        let row = Image::new(5, 1, vec![0, 0, 255, 0, 0]).unwrap();
        assert_eq!(motion_blur(&row, 3, BlurAngle::Deg0).unwrap().pixels(), &[0, 85, 85, 85, 0]);
        assert_eq!(motion_blur(&row, 2, BlurAngle::Deg0), Err(AugmentError::BadLength(2)));
        assert_eq!(motion_blur(&row, 0, BlurAngle::Deg0), Err(AugmentError::BadLength(0)));
    }

    #[test]
    fn motion_blur_darkens_border_band() {
        let img = Image::filled(9, 9, 90);
        let out = motion_blur(&img, 5, BlurAngle::Deg90).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let expected = if (2..7).contains(&y) { 90 } else if y == 1 || y == 7 { 72 } else { 54 };
                assert_eq!(out.get(x, y), expected, "({x}, {y})");
            }
        }
    }

    #[test]
    fn small_resize_always_final_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ramp(100, 80);
        let profile = AugmentProfile::stage1_multi();
        for _ in 0..20 {
            let out = small_resize(&img, &profile, &mut rng);
            assert_eq!((out.width(), out.height()), (224, 224));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            small_resize(&img, &AugmentProfile::plain(), &mut rng),
            bilinear_resize(&img, 224, 224)
        );
    }

    #[test]
    fn crop_behaviour() {
        let img = ramp(224, 224);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop(&img, &AugmentProfile::plain(), &mut rng), img);
        let full = AugmentProfile {
            crop_prob: 1.0,
            crop_fraction_range: (1.0, 1.0),
            ..AugmentProfile::plain()
        };
        assert_eq!(random_crop(&img, &full, &mut rng), img);
        let partial = AugmentProfile {
            crop_prob: 1.0,
            crop_fraction_range: (0.3, 0.6),
            ..AugmentProfile::plain()
        };
        let out = random_crop(&ramp(50, 70), &partial, &mut rng);
        assert_eq!((out.width(), out.height()), (224, 224));
    }

    #[test]
    fn profiles_validate() {
        for name in AugmentProfile::BUILTIN {
            AugmentProfile::builtin(name).unwrap().validate().unwrap();
        }
        assert!(AugmentProfile::builtin("nope").is_err());
        let bad = AugmentProfile {
            small_sizes: vec![300],
            ..AugmentProfile::stage1()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentProfile {
            blur_prob: 1.5,
            ..AugmentProfile::stage2()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn profile_outputs_are_valid_images() {
        let img = ramp(224, 224);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in AugmentProfile::BUILTIN {
            let p = AugmentProfile::builtin(name).unwrap();
            for _ in 0..5 {
                let out = apply_profile(&img, &p, &mut rng);
                assert_eq!((out.width(), out.height()), (224, 224));
            }
        }
    }

    #[test]
    fn tta_recipes() {
        let img = ramp(224, 224);
        let cfg = TtaConfig::default();
        let views = tta_views(&img, &cfg, 7);
        assert_eq!(views.len(), 5);
        assert_eq!(views[0], img);
        assert_eq!(views, tta_views(&img, &cfg, 7));
        let two = TtaConfig {
            views: vec![TtaView::Identity, TtaView::Scale { size: 50 }],
            ..TtaConfig::default()
        };
        assert_eq!(tta_views(&img, &two, 0).len(), 2);
    }
}
