//! Two-stage training of the head: PK batches, Adam with a cosine schedule,
//! EMA shadow weights, and checkpoints.

mod checkpoint;
mod optim;
mod sampler;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{
    adam_step, cosine_lr, ema_update, effective_ema_decay, AdamState, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use sampler::{epoch_batches, pk_sample, Sample};

use crate::augment::{apply_profile, AugmentError, AugmentProfile};
use crate::data::{DataError, Image, TrainManifest};
use crate::descriptor::{embed_with_cache, DescriptorError, EmbedCache, HeadParams, PoolSpec};
use crate::extractor::{extract_features, ExtractError, FeatureMap, FilterBank};
use crate::linalg::Matrix;
use crate::objective::{backprop_head, combined_loss, Batch, LossConfig, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need {needed} identities per batch but the manifest has {available}")]
    TooFewIdentities { needed: usize, available: usize },
    #[error("epoch {t} outside schedule horizon 0..={t_max}")]
    OutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("non-finite values in model state")]
    NonFinite,
    #[error("no image loaded for manifest path {0:?}")]
    MissingImage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub t_max: usize,
    #[serde(rename = "batch_P")]
    pub batch_p: usize,
    #[serde(rename = "batch_K")]
    pub batch_k: usize,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(ema_decay, (1 + step) / (10 + step))`.
    pub ema_warmup: bool,
    pub seed: u64,
    pub augment_profile: String,
    pub loss: LossConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            epochs: 30,
            lr_max: 3e-4,
            lr_min: 1e-6,
            t_max: 29,
            batch_p: 8,
            batch_k: 4,
            ema_decay: 0.999,
            ema_warmup: true,
            seed: 0,
            augment_profile: "stage1".to_string(),
            loss: LossConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            epochs: 20,
            lr_max: 3e-5,
            t_max: 19,
            augment_profile: "stage2".to_string(),
            ..Self::stage1()
        }
    }

    /// Same config with `epochs` changed and `t_max = epochs - 1`.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.t_max = epochs.saturating_sub(1).max(1);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.t_max < 1 {
            return bad("t_max must be >= 1".into());
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!("batch_P and batch_K must be >= 2, got {} and {}", self.batch_p, self.batch_k));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Learning rate for an epoch; epochs past `t_max` stay at `lr_min`.
    fn epoch_lr(&self, epoch: usize) -> Result<f64, TrainError> {
        cosine_lr(epoch.min(self.t_max), self)
    }
}

/// Shape of a freshly initialized head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    pub branch_dim: usize,
    pub branch_a: PoolSpec,
    pub branch_b: PoolSpec,
    pub cgd_order: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            branch_dim: 64,
            branch_a: PoolSpec::Spoc,
            branch_b: PoolSpec::Mac,
            cgd_order: false,
        }
    }
}

impl HeadSpec {
    /// Gaussian head drawn from stream 0 of `seed`.
    pub fn init(&self, channels: usize, seed: u64) -> Result<HeadParams, TrainError> {
        if self.branch_dim == 0 || channels == 0 {
            return Err(TrainError::InvalidConfig("head dimensions must be positive".into()));
        }
        let mut rng = stage_rng(seed, 0);
        let mut head =
            HeadParams::random_with(self.branch_a, self.branch_b, channels, self.branch_dim, &mut rng);
        head.cgd_order = self.cgd_order;
        head.validate()?;
        Ok(head)
    }
}

/// Where a stage starts from.
#[derive(Debug, Clone)]
pub enum TrainInit {
    /// Random head.
    Fresh(HeadSpec),
    /// Continue from a previous stage's weights with fresh optimizer state.
    FineTune(Checkpoint),
    /// Continue an interrupted run of the same stage.
    Resume(Checkpoint),
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6e},{:.6}", self.epoch, self.lr, self.mean_loss)
    }
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Distinct augmented inputs are few under discrete profiles (stage 1 yields
// at most two per image), so extraction results are memoized up to a cap.
const FEATURE_CACHE_LIMIT: usize = 1024;

/// A stage in progress. Each epoch draws from its own random stream, so a
/// run resumed from a checkpoint continues exactly like an uninterrupted one.
pub struct TrainSession<'a> {
    manifest: &'a TrainManifest,
    images: &'a HashMap<String, Image>,
    bank: &'a FilterBank,
    profile: AugmentProfile,
    cfg: StageConfig,
    head: HeadParams,
    ema_head: HeadParams,
    classifier: Option<Matrix>,
    adam: AdamState,
    epochs_done: usize,
    class_of: HashMap<u64, usize>,
    cache: HashMap<Image, Arc<FeatureMap>>,
}

impl<'a> TrainSession<'a> {
    pub fn new(
        manifest: &'a TrainManifest,
        images: &'a HashMap<String, Image>,
        bank: &'a FilterBank,
        init: TrainInit,
        cfg: StageConfig,
        profile: AugmentProfile,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        profile.validate()?;
        if manifest.identity_count() == 0 {
            return Err(TrainError::InvalidConfig("training manifest is empty".into()));
        }
        if manifest.identity_count() < cfg.batch_p {
            return Err(TrainError::TooFewIdentities {
                needed: cfg.batch_p,
                available: manifest.identity_count(),
            });
        }
        if let Some(missing) = manifest.paths().find(|(_, p)| !images.contains_key(*p)) {
            return Err(TrainError::MissingImage(missing.1.to_string()));
        }
        let class_of: HashMap<u64, usize> =
            manifest.groups().keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let classes = class_of.len();
        let (head, ema_head, classifier, adam, epochs_done) = match init {
            TrainInit::Fresh(spec) => {
                let head = spec.init(bank.output_channels(), cfg.seed)?;
                (head.clone(), head, None, AdamState::new(), 0)
            }
            TrainInit::FineTune(ck) => {
                check_bank(&ck, bank)?;
                (ck.head, ck.ema_head, ck.classifier, AdamState::new(), 0)
            }
            TrainInit::Resume(ck) => {
                check_bank(&ck, bank)?;
                if ck.stage != cfg {
                    return Err(TrainError::InvalidConfig(
                        "resume requires the checkpoint's own stage config".into(),
                    ));
                }
                (ck.head, ck.ema_head, ck.classifier, ck.adam, ck.epochs_done)
            }
        };
        if head.channels() != bank.output_channels() {
            return Err(TrainError::ShapeMismatch(format!(
                "head expects {} channels, extractor produces {}",
                head.channels(),
                bank.output_channels()
            )));
        }
        let dim = 2 * head.branch_dim();
        let classifier = match classifier {
            _ if !cfg.loss.uses_classifier() => None,
            Some(c) if c.shape() == (classes, dim) => Some(c),
            _ => Some(Matrix::zeros(classes, dim)),
        };
        Ok(Self {
            manifest,
            images,
            bank,
            profile,
            cfg,
            head,
            ema_head,
            classifier,
            adam,
            epochs_done,
            class_of,
            cache: HashMap::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.cfg.epochs
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn ema_head(&self) -> &HeadParams {
        &self.ema_head
    }

    fn features(&mut self, inputs: Vec<Image>) -> Result<Vec<Arc<FeatureMap>>, TrainError> {
        let bank = self.bank;
        let cache = &self.cache;
        let fresh: Vec<(usize, Result<FeatureMap, ExtractError>)> = inputs
            .par_iter()
            .enumerate()
            .filter(|(_, img)| !cache.contains_key(*img))
            .map(|(i, img)| (i, extract_features(img, bank)))
            .collect();
        let mut computed: HashMap<usize, Arc<FeatureMap>> = HashMap::new();
        for (i, fm) in fresh {
            computed.insert(i, Arc::new(fm?));
        }
        let mut out = Vec::with_capacity(inputs.len());
        for (i, img) in inputs.into_iter().enumerate() {
            match computed.remove(&i) {
                Some(fm) => {
                    if self.cache.len() < FEATURE_CACHE_LIMIT {
                        self.cache.insert(img, fm.clone());
                    }
                    out.push(fm);
                }
                None => out.push(self.cache[&img].clone()),
            }
        }
        Ok(out)
    }

    fn step(&mut self, batch: &[Sample], rng: &mut impl Rng, lr: f64) -> Result<f64, TrainError> {
        let inputs: Vec<Image> = batch
            .iter()
            .map(|(path, _)| apply_profile(&self.images[path], &self.profile, rng))
            .collect();
        let features = self.features(inputs)?;
        let head = &self.head;
        let caches: Vec<EmbedCache> = features
            .par_iter()
            .map(|fm| embed_with_cache(fm, head))
            .collect::<Result<_, _>>()?;
        let rows: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding.as_slice().to_vec()).collect();
        let labels = batch.iter().map(|(_, id)| self.class_of[id]).collect();
        let loss = combined_loss(
            &Batch::from_rows(&rows, labels)?,
            &self.cfg.loss,
            self.classifier.as_ref(),
        )?;
        let grads = backprop_head(&loss.grad_embeddings, &caches, &self.head)?;
        {
            let mut params: Vec<&mut [f64]> = self.head.tensors_mut().into_iter().collect();
            let mut gs: Vec<&[f64]> = grads.tensors().into_iter().collect();
            if let (Some(c), Some(g)) = (self.classifier.as_mut(), loss.grad_classifier.as_ref()) {
                params.push(c.as_mut_slice());
                gs.push(g.as_slice());
            }
            adam_step(&mut params, &gs, &mut self.adam, lr)?;
        }
        let decay = effective_ema_decay(self.cfg.ema_decay, self.adam.step, self.cfg.ema_warmup);
        let mut shadow: Vec<&mut [f64]> = self.ema_head.tensors_mut().into_iter().collect();
        ema_update(&mut shadow, &self.head.tensors(), decay)?;
        if !loss.loss.is_finite() || !self.head.is_finite() {
            return Err(TrainError::NonFinite);
        }
        Ok(loss.loss)
    }

    /// Runs the next epoch and returns its log line.
    pub fn run_epoch(&mut self) -> Result<EpochLog, TrainError> {
        if self.is_finished() {
            return Err(TrainError::OutOfRange {
                t: self.epochs_done,
                t_max: self.cfg.epochs - 1,
            });
        }
        let epoch = self.epochs_done;
        let lr = self.cfg.epoch_lr(epoch)?;
        let mut rng = stage_rng(self.cfg.seed, epoch as u64 + 1);
        let batches = epoch_batches(self.manifest, self.cfg.batch_p, self.cfg.batch_k, &mut rng)?;
        let mut total = 0.0;
        for batch in &batches {
            total += self.step(batch, &mut rng, lr)?;
        }
        self.epochs_done += 1;
        Ok(EpochLog {
            epoch: self.epochs_done,
            lr,
            mean_loss: total / batches.len() as f64,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            head: self.head.clone(),
            classifier: self.classifier.clone(),
            ema_head: self.ema_head.clone(),
            adam: self.adam.clone(),
            stage: self.cfg.clone(),
            epochs_done: self.epochs_done,
            extractor_seed: self.bank.seed(),
            format_version: CHECKPOINT_VERSION,
        }
    }
}

fn check_bank(ck: &Checkpoint, bank: &FilterBank) -> Result<(), TrainError> {
    if ck.extractor_seed != bank.seed() {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint was trained on extractor seed {}, got {}",
            ck.extractor_seed,
            bank.seed()
        )));
    }
    Ok(())
}

/// Runs all remaining epochs with the builtin profile named in `cfg`.
pub fn train_stage(
    manifest: &TrainManifest,
    images: &HashMap<String, Image>,
    bank: &FilterBank,
    init: TrainInit,
    cfg: &StageConfig,
) -> Result<(Checkpoint, Vec<EpochLog>), TrainError> {
    let profile = AugmentProfile::builtin(&cfg.augment_profile)?;
    train_stage_with_profile(manifest, images, bank, init, cfg, profile, |_| {})
}

/// Like [`train_stage`] with an explicit profile; `on_epoch` sees each log
/// line as it is produced.
pub fn train_stage_with_profile(
    manifest: &TrainManifest,
    images: &HashMap<String, Image>,
    bank: &FilterBank,
    init: TrainInit,
    cfg: &StageConfig,
    profile: AugmentProfile,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>), TrainError> {
    let mut session = TrainSession::new(manifest, images, bank, init, cfg.clone(), profile)?;
    let mut logs = Vec::new();
    while !session.is_finished() {
        let log = session.run_epoch()?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok((session.checkpoint(), logs))
}
