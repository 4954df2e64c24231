//! Deterministic synthetic nose-print textures.
//!
//! Each identity is a band-limited mixture of sinusoidal gratings drawn from
//! its own random stream. Each image of an identity is that texture under a
//! small random affine warp plus brightness/contrast jitter, so variation
//! within an identity stays below variation between identities.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Image, Pair, PairManifest, TrainManifest};

/// Grating frequency band in cycles per pixel.
const FREQ_BAND: (f64, f64) = (0.03, 0.15);
/// Standard deviation of the texture around mid-gray before clamping.
const TEXTURE_GAIN: f64 = 40.0;

/// Bounds of the per-image perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    /// Max rotation in radians.
    pub rotation: f64,
    /// Max translation in pixels, per axis.
    pub translation: f64,
    /// Max relative scale change.
    pub scale: f64,
    /// Max additive brightness offset in gray levels.
    pub brightness: f64,
    /// Max relative contrast change.
    pub contrast: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            rotation: 0.05,
            translation: 3.0,
            scale: 0.05,
            brightness: 10.0,
            contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub gratings: usize,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 50,
            images_per_identity: 4,
            image_size: 224,
            gratings: 24,
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.identities < 2 {
            return bad(format!("identities must be >= 2, got {}", self.identities));
        }
        if self.images_per_identity < 2 {
            return bad(format!(
                "images_per_identity must be >= 2, got {}",
                self.images_per_identity
            ));
        }
        if self.image_size < 32 {
            return bad(format!("image_size must be >= 32, got {}", self.image_size));
        }
        if self.gratings == 0 {
            return bad("gratings must be >= 1".to_string());
        }
        let j = &self.jitter;
        let fields = [
            ("rotation", j.rotation),
            ("translation", j.translation),
            ("scale", j.scale),
            ("brightness", j.brightness),
            ("contrast", j.contrast),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("jitter.{name} must be finite and >= 0, got {v}"));
            }
        }
        if j.scale >= 1.0 || j.contrast >= 1.0 {
            return bad("jitter.scale and jitter.contrast must be < 1".to_string());
        }
        Ok(())
    }
}

/// Images of a synthetic dataset, ordered as `manifest.paths()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub images: Vec<Image>,
    pub manifest: TrainManifest,
}

impl SyntheticSet {
    pub fn named_images(&self) -> impl Iterator<Item = (&str, &Image)> {
        self.manifest.paths().map(|(_, p)| p).zip(&self.images)
    }
}

fn identity_rng(seed: u64, identity: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((identity as u64) << 32);
    rng
}

fn image_rng(seed: u64, identity: usize, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((identity as u64) << 32) | (image as u64 + 1));
    rng
}

struct Grating {
    amplitude: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

/// The un-jittered base texture of `identity`.
pub fn identity_texture(config: &SynthConfig, identity: usize) -> Image {
    let mut rng = identity_rng(config.seed, identity);
    let gratings: Vec<Grating> = (0..config.gratings)
        .map(|_| {
            let amplitude = rng.random_range(0.5..1.0);
            let freq = rng.random_range(FREQ_BAND.0..FREQ_BAND.1);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            Grating {
                amplitude,
                kx: 2.0 * PI * freq * theta.cos(),
                ky: 2.0 * PI * freq * theta.sin(),
                phase,
            }
        })
        .collect();
    // unit variance for the mixture of independent-phase sinusoids
    let norm = (gratings.iter().map(|g| g.amplitude * g.amplitude).sum::<f64>() / 2.0).sqrt();
    let n = config.image_size;
    Image::from_fn(n, n, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let s: f64 = gratings
            .iter()
            .map(|g| g.amplitude * (g.kx * xf + g.ky * yf + g.phase).sin())
            .sum();
        (128.0 + TEXTURE_GAIN * s / norm).round().clamp(0.0, 255.0) as u8
    })
}

fn jittered(base: &Image, jitter: &Jitter, rng: &mut ChaCha8Rng) -> Image {
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let angle = sym(rng, jitter.rotation);
    let tx = sym(rng, jitter.translation);
    let ty = sym(rng, jitter.translation);
    let scale = 1.0 + sym(rng, jitter.scale);
    let beta = sym(rng, jitter.brightness);
    let alpha = 1.0 + sym(rng, jitter.contrast);

    let n = base.width();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    Image::from_fn(n, base.height(), |x, y| {
        // inverse warp: undo translation, rotation, then scale about the center
        let dx = x as f64 - c - tx;
        let dy = y as f64 - c - ty;
        let sx = (cos * dx + sin * dy) / scale + c;
        let sy = (-sin * dx + cos * dy) / scale + c;
        let v = base.sample_bilinear(sx, sy);
        (alpha * (v - 128.0) + 128.0 + beta).round().clamp(0.0, 255.0) as u8
    })
}

fn image_name(identity: usize, image: usize) -> String {
    format!("id{identity:05}_{image:02}.pgm")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticSet, DataError> {
    generate_identities(config, 0..config.identities)
}

/// Like [`generate_synthetic`] for an arbitrary id range, e.g. identities
/// held out from training.
pub fn generate_identities(
    config: &SynthConfig,
    ids: std::ops::Range<usize>,
) -> Result<SyntheticSet, DataError> {
    config.validate()?;
    let mut groups = BTreeMap::new();
    let mut images = Vec::with_capacity(ids.len() * config.images_per_identity);
    for identity in ids {
        let base = identity_texture(config, identity);
        let mut paths = Vec::with_capacity(config.images_per_identity);
        for k in 0..config.images_per_identity {
            let mut rng = image_rng(config.seed, identity, k);
            images.push(jittered(&base, &config.jitter, &mut rng));
            paths.push(image_name(identity, k));
        }
        groups.insert(identity as u64, paths);
    }
    Ok(SyntheticSet {
        images,
        manifest: TrainManifest::from_groups(groups)?,
    })
}

/// Draws `per_class` same-identity and `per_class` cross-identity pairs from
/// `manifest`, positives first. No pair is repeated.
pub fn make_verification_pairs(
    manifest: &TrainManifest,
    per_class: usize,
    seed: u64,
) -> Result<PairManifest, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<&Vec<String>> = manifest.groups().values().collect();

    let mut positives: Vec<(&str, &str)> = groups
        .iter()
        .flat_map(|g| {
            (0..g.len()).flat_map(move |i| (i + 1..g.len()).map(move |j| (g[i].as_str(), g[j].as_str())))
        })
        .collect();
    if positives.len() < per_class {
        return Err(DataError::InvalidConfig(format!(
            "only {} positive pairs available, {per_class} requested",
            positives.len()
        )));
    }
    positives.shuffle(&mut rng);
    positives.truncate(per_class);

    let total_images = manifest.image_count();
    let max_negatives: usize = groups
        .iter()
        .map(|g| g.len() * (total_images - g.len()))
        .sum::<usize>()
        / 2;
    if groups.len() < 2 || max_negatives < per_class {
        return Err(DataError::InvalidConfig(format!(
            "cannot draw {per_class} negative pairs"
        )));
    }
    let mut negatives = Vec::with_capacity(per_class);
    let mut seen = std::collections::HashSet::new();
    while negatives.len() < per_class {
        let ga = rng.random_range(0..groups.len());
        let mut gb = rng.random_range(0..groups.len() - 1);
        if gb >= ga {
            gb += 1;
        }
        let a = &groups[ga][rng.random_range(0..groups[ga].len())];
        let b = &groups[gb][rng.random_range(0..groups[gb].len())];
        let key = if a < b { (a, b) } else { (b, a) };
        if seen.insert(key) {
            negatives.push((a.as_str(), b.as_str()));
        }
    }

    let pairs = positives
        .into_iter()
        .map(|(a, b)| (a, b, 1))
        .chain(negatives.into_iter().map(|(a, b)| (a, b, 0)))
        .map(|(a, b, l)| Pair {
            image_a: a.to_string(),
            image_b: b.to_string(),
            label: Some(l),
        })
        .collect();
    PairManifest::new(pairs)
}
