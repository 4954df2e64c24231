//! Python bindings: images, synthetic data, training, embedding and the
//! evaluation helpers.

use std::collections::{BTreeMap, HashMap};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use dgd_core::augment::bilinear_resize;
use dgd_core::data::{self, PairManifest, SynthConfig, TrainManifest};
use dgd_core::descriptor::EmbedMode;
use dgd_core::evalfuse::{self, PairScore};
use dgd_core::extractor::make_filter_bank;
use dgd_core::pipeline;
use dgd_core::trainer::{self, HeadSpec, StageConfig, TrainInit};

create_exception!(dgd, DgdError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    DgdError::new_err(e.to_string())
}

/// 8-bit grayscale image.
#[pyclass(module = "dgd", frozen, from_py_object)]
#[derive(Clone)]
struct Image(data::Image);

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        data::Image::new(width, height, pixels).map(Self).map_err(err)
    }

    /// Reads a PGM or PPM file; color is converted to luma.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        data::read_image(path).map(Self).map_err(err)
    }

    fn save_pgm(&self, path: &str) -> PyResult<()> {
        data::write_pgm(&self.0, path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    /// Row-major pixel bytes.
    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.pixels())
    }

    fn resize(&self, width: usize, height: usize) -> Self {
        Self(bilinear_resize(&self.0, width, height))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

#[pyclass(module = "dgd", frozen, from_py_object)]
#[derive(Clone)]
struct Checkpoint(trainer::Checkpoint);

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        trainer::load_checkpoint(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::save_checkpoint(&self.0, path).map_err(err)
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.0.epochs_done
    }

    #[getter]
    fn extractor_seed(&self) -> u64 {
        self.0.extractor_seed
    }

    /// The stage configuration as JSON.
    #[getter]
    fn stage(&self) -> String {
        serde_json::to_string(&self.0.stage).expect("stage serializes")
    }
}

/// Frozen extractor plus a trained head.
#[pyclass(module = "dgd", frozen)]
struct Model(pipeline::Model);

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (checkpoint, use_ema = true))]
    fn from_checkpoint(checkpoint: &Checkpoint, use_ema: bool) -> Self {
        Self(pipeline::Model::from_checkpoint(&checkpoint.0, use_ema))
    }

    #[pyo3(signature = (with_fc = true))]
    fn embedding_dim(&self, with_fc: bool) -> usize {
        self.0.head.embedding_dim(mode(with_fc))
    }

    /// Unit-norm embedding of one image.
    #[pyo3(signature = (image, with_fc = true))]
    fn embed(&self, py: Python<'_>, image: &Image, with_fc: bool) -> PyResult<Vec<f64>> {
        let img = image.0.clone();
        py.detach(|| self.0.embed_image(&img, mode(with_fc)))
            .map(|e| e.into_vec())
            .map_err(err)
    }

    #[pyo3(signature = (images, with_fc = true))]
    fn embed_many(&self, py: Python<'_>, images: Vec<Image>, with_fc: bool) -> PyResult<Vec<Vec<f64>>> {
        let imgs: Vec<data::Image> = images.into_iter().map(|i| i.0).collect();
        py.detach(|| self.0.embed_images(&imgs, mode(with_fc)))
            .map(|v| v.into_iter().map(|e| e.into_vec()).collect())
            .map_err(err)
    }
}

fn mode(with_fc: bool) -> EmbedMode {
    if with_fc {
        EmbedMode::WithFc
    } else {
        EmbedMode::NoFc
    }
}

/// Synthetic identities `start..start+identities` as `(identity, name, image)`.
#[pyfunction]
#[pyo3(signature = (identities, images_per_identity = 4, image_size = 224, seed = 0, start = 0))]
fn synth(
    py: Python<'_>,
    identities: usize,
    images_per_identity: usize,
    image_size: usize,
    seed: u64,
    start: usize,
) -> PyResult<Vec<(u64, String, Image)>> {
    let cfg = SynthConfig {
        identities: identities.max(2),
        images_per_identity,
        image_size,
        seed,
        ..SynthConfig::default()
    };
    let set = py
        .detach(|| data::generate_identities(&cfg, start..start + identities))
        .map_err(err)?;
    Ok(set
        .manifest
        .paths()
        .zip(&set.images)
        .map(|((id, name), img)| (id, name.to_string(), Image(img.clone())))
        .collect())
}

/// `per_class` positive and negative pairs `(a, b, label)` from identity groups.
#[pyfunction]
fn verification_pairs(
    groups: BTreeMap<u64, Vec<String>>,
    per_class: usize,
    seed: u64,
) -> PyResult<Vec<(String, String, u8)>> {
    let manifest = TrainManifest::from_groups(groups).map_err(err)?;
    let pairs = data::make_verification_pairs(&manifest, per_class, seed).map_err(err)?;
    Ok(pairs
        .pairs()
        .iter()
        .map(|p| (p.image_a.clone(), p.image_b.clone(), p.label.unwrap_or(0)))
        .collect())
}

/// `(epoch, lr, mean_loss)`.
type EpochRow = (usize, f64, f64);

/// Trains one stage. `init` fine-tunes from a checkpoint; with `resume` the
/// checkpoint's own stage config continues instead. Returns the checkpoint
/// and `(epoch, lr, mean_loss)` per epoch.
#[pyfunction]
#[pyo3(signature = (groups, images, stage = 1, epochs = None, seed = 0, extractor_seed = 0, init = None, resume = false, batch_p = None, batch_k = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    groups: BTreeMap<u64, Vec<String>>,
    images: HashMap<String, Image>,
    stage: u8,
    epochs: Option<usize>,
    seed: u64,
    extractor_seed: u64,
    init: Option<Checkpoint>,
    resume: bool,
    batch_p: Option<usize>,
    batch_k: Option<usize>,
) -> PyResult<(Checkpoint, Vec<EpochRow>)> {
    let manifest = TrainManifest::from_groups(groups).map_err(err)?;
    let images: HashMap<String, data::Image> = images.into_iter().map(|(k, v)| (k, v.0)).collect();
    let mut cfg = match stage {
        1 => StageConfig::stage1(),
        2 => StageConfig::stage2(),
        other => return Err(err(format!("stage must be 1 or 2, got {other}"))),
    };
    if let Some(n) = epochs {
        cfg = cfg.with_epochs(n);
    }
    cfg.seed = seed;
    cfg.batch_p = batch_p.unwrap_or(cfg.batch_p);
    cfg.batch_k = batch_k.unwrap_or(cfg.batch_k);
    let (init, bank_seed) = match (init, resume) {
        (Some(ck), true) => {
            cfg = ck.0.stage.clone();
            let s = ck.0.extractor_seed;
            (TrainInit::Resume(ck.0), s)
        }
        (Some(ck), false) => {
            let s = ck.0.extractor_seed;
            (TrainInit::FineTune(ck.0), s)
        }
        (None, true) => return Err(err("resume needs a checkpoint")),
        (None, false) => (TrainInit::Fresh(HeadSpec::default()), extractor_seed),
    };
    let (ck, logs) = py
        .detach(|| trainer::train_stage(&manifest, &images, &make_filter_bank(bank_seed), init, &cfg))
        .map_err(err)?;
    Ok((
        Checkpoint(ck),
        logs.into_iter().map(|l| (l.epoch, l.lr, l.mean_loss)).collect(),
    ))
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = dgd_core::descriptor::Embedding::normalized(&a).map_err(err)?;
    let b = dgd_core::descriptor::Embedding::normalized(&b).map_err(err)?;
    evalfuse::cosine_similarity(&a, &b).map_err(err)
}

fn scored(scores: &[f64], labels: Option<&[u8]>) -> Vec<PairScore> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &score)| PairScore {
            index: i,
            image_a: String::new(),
            image_b: String::new(),
            score,
            label: labels.map(|l| l[i]),
        })
        .collect()
}

/// Area under the ROC curve; ties count half.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(err(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    evalfuse::auc(&scored(&scores, Some(&labels))).map_err(err)
}

/// Weighted fusion of aligned score lists.
#[pyfunction]
#[pyo3(signature = (inputs, weights = None))]
fn fuse(inputs: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let lists: Vec<Vec<PairScore>> = inputs.iter().map(|s| scored(s, None)).collect();
    let fused = evalfuse::fuse(&lists, weights.as_deref()).map_err(err)?;
    Ok(fused.into_iter().map(|s| s.score).collect())
}

/// Pseudo identities from the `k` highest-scoring `(a, b, score)` pairs,
/// numbered from `next_id`.
#[pyfunction]
fn mine_pseudo(pairs: Vec<(String, String, f64)>, k: usize, next_id: u64) -> PyResult<BTreeMap<u64, Vec<String>>> {
    let manifest = PairManifest::new(
        pairs
            .iter()
            .map(|(a, b, _)| data::Pair {
                image_a: a.clone(),
                image_b: b.clone(),
                label: None,
            })
            .collect(),
    )
    .map_err(err)?;
    let scores: Vec<PairScore> = manifest
        .pairs()
        .iter()
        .zip(&pairs)
        .enumerate()
        .map(|(i, (p, (_, _, s)))| PairScore {
            index: i,
            image_a: p.image_a.clone(),
            image_b: p.image_b.clone(),
            score: *s,
            label: None,
        })
        .collect();
    let mined = evalfuse::mine_pseudo(&scores, k, next_id).map_err(err)?;
    Ok(mined.groups().clone())
}

#[pymodule]
fn dgd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DgdError", m.py().get_type::<DgdError>())?;
    m.add_class::<Image>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(verification_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(mine_pseudo, m)?)?;
    Ok(())
}
