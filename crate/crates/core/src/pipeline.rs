//! Inference: images to embeddings with a frozen bank and a trained head.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{bilinear_resize, tta_views, TtaConfig};
use crate::data::{read_image, DataError, Image};
use crate::descriptor::{embed, DescriptorError, EmbedMode, Embedding, HeadParams};
use crate::extractor::{extract_features, make_filter_bank, ExtractError, FilterBank, INPUT_SIZE};
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub bank: FilterBank,
    pub head: HeadParams,
}

impl Model {
    pub fn new(bank: FilterBank, head: HeadParams) -> Self {
        Self { bank, head }
    }

    /// The EMA head by default, or the live head.
    pub fn from_checkpoint(ckpt: &Checkpoint, use_ema: bool) -> Self {
        let head = if use_ema { &ckpt.ema_head } else { &ckpt.head };
        Self::new(make_filter_bank(ckpt.extractor_seed), head.clone())
    }

    /// Resizes to the network input size if needed, then embeds.
    pub fn embed_image(&self, img: &Image, mode: EmbedMode) -> Result<Embedding, ModelError> {
        let features = if img.width() == INPUT_SIZE && img.height() == INPUT_SIZE {
            extract_features(img, &self.bank)?
        } else {
            extract_features(&bilinear_resize(img, INPUT_SIZE, INPUT_SIZE), &self.bank)?
        };
        Ok(embed(&features, &self.head, mode)?)
    }

    pub fn embed_images(&self, imgs: &[Image], mode: EmbedMode) -> Result<Vec<Embedding>, ModelError> {
        imgs.par_iter().map(|img| self.embed_image(img, mode)).collect()
    }

    /// One embedding per test-time view. The view seed is derived from the
    /// image content so a given image always gets the same views.
    pub fn embed_views(
        &self,
        img: &Image,
        tta: &TtaConfig,
        seed: u64,
        mode: EmbedMode,
    ) -> Result<Vec<Embedding>, ModelError> {
        tta_views(img, tta, seed ^ content_hash(img))
            .par_iter()
            .map(|v| self.embed_image(v, mode))
            .collect()
    }

    /// Embeddings keyed by name.
    pub fn embed_named<'a>(
        &self,
        images: impl IntoIterator<Item = (&'a str, &'a Image)>,
        mode: EmbedMode,
    ) -> Result<HashMap<String, Embedding>, ModelError> {
        let items: Vec<(&str, &Image)> = images.into_iter().collect();
        items
            .par_iter()
            .map(|(name, img)| Ok((name.to_string(), self.embed_image(img, mode)?)))
            .collect()
    }
}

/// FNV-1a over dimensions and pixels.
fn content_hash(img: &Image) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let dims = [img.width() as u64, img.height() as u64];
    for b in dims.iter().flat_map(|d| d.to_le_bytes()).chain(img.pixels().iter().copied()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Reads every path (relative paths resolved against `base`). On failure the
/// error lists each unreadable path.
pub fn load_images(paths: &[String], base: &Path) -> Result<Vec<Image>, Vec<(String, DataError)>> {
    let results: Vec<Result<Image, DataError>> = paths
        .par_iter()
        .map(|p| read_image(resolve(base, p)))
        .collect();
    let mut images = Vec::with_capacity(paths.len());
    let mut failures = Vec::new();
    for (p, r) in paths.iter().zip(results) {
        match r {
            Ok(img) => images.push(img),
            Err(e) => failures.push((p.clone(), e)),
        }
    }
    if failures.is_empty() {
        Ok(images)
    } else {
        Err(failures)
    }
}

pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
