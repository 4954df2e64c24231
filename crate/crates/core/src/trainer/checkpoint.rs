//! `DGCK` container: magic, version, then named `DGT1` records.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, StageConfig, TrainError};
use crate::data::{DataError, TensorRecord};
use crate::descriptor::{HeadParams, PoolSpec};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: HeadParams,
    /// `K x D` linear classifier, present when trained with cross-entropy.
    pub classifier: Option<Matrix>,
    pub ema_head: HeadParams,
    pub adam: AdamState,
    pub stage: StageConfig,
    /// Completed epochs of `stage`.
    pub epochs_done: usize,
    pub extractor_seed: u64,
    pub format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    stage: StageConfig,
    epochs_done: usize,
    extractor_seed: u64,
    branch_a: PoolSpec,
    branch_b: PoolSpec,
    cgd_order: bool,
    adam_step: u64,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.head.validate()?;
        self.ema_head.validate()?;
        if self.head.w_a.shape() != self.ema_head.w_a.shape() {
            return Err(TrainError::ShapeMismatch(
                "EMA head dimensions differ from the live head".to_string(),
            ));
        }
        let finite = self.head.is_finite()
            && self.ema_head.is_finite()
            && self.adam.is_finite()
            && self.classifier.as_ref().is_none_or(|c| c.is_finite());
        if !finite {
            return Err(TrainError::NonFinite);
        }
        Ok(())
    }

    fn records(&self) -> Result<Vec<(String, TensorRecord)>, TrainError> {
        let meta = Meta {
            stage: self.stage.clone(),
            epochs_done: self.epochs_done,
            extractor_seed: self.extractor_seed,
            branch_a: self.head.branch_a,
            branch_b: self.head.branch_b,
            cgd_order: self.head.cgd_order,
            adam_step: self.adam.step,
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = vec![(
            "meta".to_string(),
            TensorRecord::vector(json.into_iter().map(f64::from).collect())?,
        )];
        for (prefix, head) in [("head", &self.head), ("ema", &self.ema_head)] {
            out.extend(head_records(prefix, head)?);
        }
        if let Some(c) = &self.classifier {
            out.push(("classifier".to_string(), matrix_record(c)?));
        }
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (i, t) in moments.iter().enumerate() {
                out.push((format!("adam.{kind}.{i}"), TensorRecord::vector(t.clone())?));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| DataError::Io {
            path: "<memory>".to_string(),
            source: e,
        })?;
        Ok(buf)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let records = self.records().map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.format_version.to_le_bytes())?;
        for (name, record) in records {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            record.write_to(w)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            let found = bytes.get(..4.min(bytes.len())).unwrap_or_default();
            return Err(TrainError::Data(DataError::BadMagic {
                expected: "DGCK".to_string(),
                found: String::from_utf8_lossy(found).into_owned(),
            }));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::UnknownVersion(version));
        }
        let mut records = BTreeMap::new();
        let mut rest = &bytes[8..];
        while !rest.is_empty() {
            if rest.len() < 2 {
                return Err(DataError::LengthMismatch { expected: 2, found: rest.len() }.into());
            }
            let n = u16::from_le_bytes([rest[0], rest[1]]) as usize;
            rest = &rest[2..];
            if rest.len() < n {
                return Err(DataError::LengthMismatch { expected: n, found: rest.len() }.into());
            }
            let name = String::from_utf8_lossy(&rest[..n]).into_owned();
            rest = &rest[n..];
            let record = TensorRecord::read_from(&mut rest)?;
            records.insert(name, record);
        }
        Self::from_records(version, records)
    }

    fn from_records(
        version: u32,
        mut records: BTreeMap<String, TensorRecord>,
    ) -> Result<Self, TrainError> {
        let mut take = |name: &str| {
            records
                .remove(name)
                .ok_or_else(|| TrainError::MissingTensor(name.to_string()))
        };
        let meta_bytes: Vec<u8> = take("meta")?.data().iter().map(|&b| b as u8).collect();
        let meta: Meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| TrainError::InvalidConfig(format!("checkpoint metadata: {e}")))?;
        let mut head_from = |prefix: &str| -> Result<HeadParams, TrainError> {
            Ok(HeadParams {
                branch_a: meta.branch_a,
                branch_b: meta.branch_b,
                w_a: matrix_from(take(&format!("{prefix}.w_a"))?)?,
                b_a: take(&format!("{prefix}.b_a"))?.into_data(),
                w_b: matrix_from(take(&format!("{prefix}.w_b"))?)?,
                b_b: take(&format!("{prefix}.b_b"))?.into_data(),
                cgd_order: meta.cgd_order,
            })
        };
        let head = head_from("head")?;
        let ema_head = head_from("ema")?;
        let classifier = match records.remove("classifier") {
            Some(r) => Some(matrix_from(r)?),
            None => None,
        };
        let mut adam = AdamState {
            step: meta.adam_step,
            ..AdamState::default()
        };
        while let Some(m) = records.remove(&format!("adam.m.{}", adam.m.len())) {
            let i = adam.m.len();
            let v = records
                .remove(&format!("adam.v.{i}"))
                .ok_or_else(|| TrainError::MissingTensor(format!("adam.v.{i}")))?;
            adam.m.push(m.into_data());
            adam.v.push(v.into_data());
        }
        if adam.step > 0 && adam.m.is_empty() {
            return Err(TrainError::MissingTensor("adam.m.0".to_string()));
        }
        let ckpt = Checkpoint {
            head,
            classifier,
            ema_head,
            adam,
            stage: meta.stage,
            epochs_done: meta.epochs_done,
            extractor_seed: meta.extractor_seed,
            format_version: version,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn matrix_record(m: &Matrix) -> Result<TensorRecord, DataError> {
    TensorRecord::new(vec![m.rows(), m.cols()], m.as_slice().to_vec())
}

fn matrix_from(r: TensorRecord) -> Result<Matrix, TrainError> {
    match *r.dims() {
        [rows, cols] => Ok(Matrix::from_vec(rows, cols, r.into_data())),
        _ => Err(DataError::InvalidTensor(format!("expected a matrix, got dims {:?}", r.dims())).into()),
    }
}

fn head_records(prefix: &str, h: &HeadParams) -> Result<Vec<(String, TensorRecord)>, DataError> {
    Ok(vec![
        (format!("{prefix}.w_a"), matrix_record(&h.w_a)?),
        (format!("{prefix}.b_a"), TensorRecord::vector(h.b_a.clone())?),
        (format!("{prefix}.w_b"), matrix_record(&h.w_b)?),
        (format!("{prefix}.b_b"), TensorRecord::vector(h.b_b.clone())?),
    ])
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| DataError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
