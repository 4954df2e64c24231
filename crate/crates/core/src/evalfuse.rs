//! Pair scoring, rank-based ROC-AUC, pseudo-label mining, score fusion, and
//! test-time augmentation aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{column_indices, csv_rows, field, DataError, PairManifest, TrainManifest};
use crate::descriptor::Embedding;
use crate::linalg::dot;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {expected} vs {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("AUC needs at least one positive and one negative label")]
    OneClassOnly,
    #[error("pair {index} has no label")]
    MissingLabel { index: usize },
    #[error("score of pair {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("asked for the top {k} pairs but only {available} exist")]
    KTooLarge { k: usize, available: usize },
    #[error("input {input} has {found} pairs, expected {expected}")]
    LengthMismatch {
        input: usize,
        expected: usize,
        found: usize,
    },
    #[error("input {input}, row {row}: pair does not match the first input")]
    OrderMismatch { input: usize, row: usize },
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error("{path:?} has {found} views, expected {expected}")]
    ViewCountMismatch {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Similarity of one manifest pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    /// Row position in the pair manifest.
    pub index: usize,
    pub image_a: String,
    pub image_b: String,
    pub score: f64,
    pub label: Option<u8>,
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

fn lookup<'a, T>(map: &'a HashMap<String, T>, path: &str) -> Result<&'a T, EvalError> {
    map.get(path)
        .ok_or_else(|| EvalError::MissingEmbedding(path.to_string()))
}

fn check_paths<T>(map: &HashMap<String, T>, manifest: &PairManifest) -> Result<(), EvalError> {
    for p in manifest.pairs() {
        lookup(map, &p.image_a)?;
        lookup(map, &p.image_b)?;
    }
    Ok(())
}

/// One score per manifest row, in manifest order.
pub fn score_pairs(
    embeddings: &HashMap<String, Embedding>,
    manifest: &PairManifest,
) -> Result<Vec<PairScore>, EvalError> {
    check_paths(embeddings, manifest)?;
    manifest
        .pairs()
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let score = cosine_similarity(&embeddings[&p.image_a], &embeddings[&p.image_b])?;
            Ok(PairScore {
                index,
                image_a: p.image_a.clone(),
                image_b: p.image_b.clone(),
                score,
                label: p.label,
            })
        })
        .collect()
}

/// How per-view embeddings are reduced to one pair score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TtaMode {
    /// Mean cosine over matched views.
    #[default]
    MeanSim,
    /// Cosine of the re-normalized mean embeddings.
    MeanEmb,
}

pub fn tta_score(
    views: &HashMap<String, Vec<Embedding>>,
    manifest: &PairManifest,
    mode: TtaMode,
) -> Result<Vec<PairScore>, EvalError> {
    check_paths(views, manifest)?;
    let mut expected = None;
    for p in manifest.pairs() {
        for path in [&p.image_a, &p.image_b] {
            let found = views[path].len();
            let want = *expected.get_or_insert(found);
            if found != want || found == 0 {
                return Err(EvalError::ViewCountMismatch {
                    path: path.clone(),
                    expected: want.max(1),
                    found,
                });
            }
        }
    }
    let pooled: HashMap<&str, Embedding> = match mode {
        TtaMode::MeanSim => HashMap::new(),
        TtaMode::MeanEmb => views
            .iter()
            .map(|(path, vs)| Ok((path.as_str(), mean_embedding(vs)?)))
            .collect::<Result<_, EvalError>>()?,
    };
    manifest
        .pairs()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let score = match mode {
                TtaMode::MeanSim => {
                    let (va, vb) = (&views[&p.image_a], &views[&p.image_b]);
                    let mut total = 0.0;
                    for (a, b) in va.iter().zip(vb) {
                        total += cosine_similarity(a, b)?;
                    }
                    total / va.len() as f64
                }
                TtaMode::MeanEmb => {
                    cosine_similarity(&pooled[p.image_a.as_str()], &pooled[p.image_b.as_str()])?
                }
            };
            Ok(PairScore {
                index,
                image_a: p.image_a.clone(),
                image_b: p.image_b.clone(),
                score,
                label: p.label,
            })
        })
        .collect()
}

fn mean_embedding(views: &[Embedding]) -> Result<Embedding, EvalError> {
    let dim = views[0].dim();
    let mut acc = vec![0.0; dim];
    for v in views {
        if v.dim() != dim {
            return Err(EvalError::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
        acc.iter_mut().zip(v.as_slice()).for_each(|(a, x)| *a += x);
    }
    Embedding::normalized(&acc).map_err(|_| EvalError::DimensionMismatch {
        expected: dim,
        found: 0,
    })
}

/// Mann-Whitney AUC with midranks for ties: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[PairScore]) -> Result<f64, EvalError> {
    let mut labeled = Vec::with_capacity(scores.len());
    for s in scores {
        let label = s.label.ok_or(EvalError::MissingLabel { index: s.index })?;
        if !s.score.is_finite() {
            return Err(EvalError::NonFiniteScore { index: s.index });
        }
        labeled.push((s.score, label == 1));
    }
    let positives = labeled.iter().filter(|(_, pos)| *pos).count();
    let negatives = labeled.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::OneClassOnly);
    }
    labeled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are 1-based; a tie block spanning ranks lo+1..=hi shares (lo+1+hi)/2.
    let mut rank_sum = 0.0;
    let mut lo = 0;
    while lo < labeled.len() {
        let mut hi = lo + 1;
        while hi < labeled.len() && labeled[hi].0 == labeled[lo].0 {
            hi += 1;
        }
        let midrank = (lo + 1 + hi) as f64 / 2.0;
        let pos_in_block = labeled[lo..hi].iter().filter(|(_, pos)| *pos).count();
        rank_sum += midrank * pos_in_block as f64;
        lo = hi;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Treats the `k` most similar pairs as same-identity and returns their
/// connected components as new identities numbered from `next_id`. Ties are
/// broken by manifest index. Components and their members are listed in order
/// of first appearance among the selected pairs.
pub fn mine_pseudo(scores: &[PairScore], k: usize, next_id: u64) -> Result<TrainManifest, EvalError> {
    if k > scores.len() {
        return Err(EvalError::KTooLarge {
            k,
            available: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(EvalError::NonFiniteScore { index: s.index });
    }
    let mut order: Vec<&PairScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));

    let mut node_of: HashMap<&str, usize> = HashMap::new();
    let mut names: Vec<&str> = Vec::new();
    let mut uf = UnionFind::default();
    for s in &order[..k] {
        let mut ends = [0; 2];
        for (slot, name) in ends.iter_mut().zip([s.image_a.as_str(), s.image_b.as_str()]) {
            *slot = *node_of.entry(name).or_insert_with(|| {
                names.push(name);
                uf.push()
            });
        }
        uf.union(ends[0], ends[1]);
    }

    let mut component_order: Vec<usize> = Vec::new();
    let mut members: HashMap<usize, Vec<String>> = HashMap::new();
    for (i, name) in names.iter().enumerate() {
        let root = uf.find(i);
        let group = members.entry(root).or_insert_with(|| {
            component_order.push(root);
            Vec::new()
        });
        group.push(name.to_string());
    }
    let groups: BTreeMap<u64, Vec<String>> = component_order
        .into_iter()
        .enumerate()
        .map(|(i, root)| (next_id + i as u64, members.remove(&root).unwrap()))
        .collect();
    Ok(TrainManifest::from_groups(groups)?)
}

#[derive(Default)]
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn push(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the earlier node as root so component order is stable
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Weighted mean of several score lists over the same manifest. Weights
/// default to uniform and are normalized to sum to one.
pub fn fuse(inputs: &[Vec<PairScore>], weights: Option<&[f64]>) -> Result<Vec<PairScore>, EvalError> {
    let first = inputs
        .first()
        .ok_or_else(|| EvalError::InvalidWeights("no inputs to fuse".to_string()))?;
    let weights: Vec<f64> = match weights {
        None => vec![1.0; inputs.len()],
        Some(w) => w.to_vec(),
    };
    if weights.len() != inputs.len() {
        return Err(EvalError::InvalidWeights(format!(
            "{} weights for {} inputs",
            weights.len(),
            inputs.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(EvalError::InvalidWeights("weights must be finite and >= 0".to_string()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(EvalError::InvalidWeights("weights must sum to a positive value".to_string()));
    }
    for (i, input) in inputs.iter().enumerate() {
        if input.len() != first.len() {
            return Err(EvalError::LengthMismatch {
                input: i,
                expected: first.len(),
                found: input.len(),
            });
        }
        for (row, (s, f)) in input.iter().zip(first).enumerate() {
            if s.index != f.index || s.image_a != f.image_a || s.image_b != f.image_b {
                return Err(EvalError::OrderMismatch { input: i, row });
            }
            if !s.score.is_finite() {
                return Err(EvalError::NonFiniteScore { index: s.index });
            }
        }
    }
    // Offsets from the first input keep the fusion of identical files exact.
    Ok(first
        .iter()
        .enumerate()
        .map(|(row, base)| {
            let shift: f64 = inputs
                .iter()
                .zip(&weights)
                .map(|(input, w)| w * (input[row].score - base.score))
                .sum();
            PairScore {
                score: base.score + shift / total,
                ..base.clone()
            }
        })
        .collect())
}

/// `index,imageA,imageB,score[,label]`, with scores in shortest round-trip form.
pub fn scores_to_csv(scores: &[PairScore]) -> String {
    let labeled = scores.first().is_some_and(|s| s.label.is_some());
    let mut out = String::from(if labeled {
        "index,imageA,imageB,score,label\n"
    } else {
        "index,imageA,imageB,score\n"
    });
    for s in scores {
        let _ = write!(out, "{},{},{},{:?}", s.index, s.image_a, s.image_b, s.score);
        if let Some(l) = s.label {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<PairScore>, EvalError> {
    let mut rows = csv_rows(text);
    let (_, header) = rows
        .next()
        .ok_or_else(|| DataError::MissingColumn("index".to_string()))?;
    let [i_col, a_col, b_col, s_col] = column_indices(&header, ["index", "imageA", "imageB", "score"])?;
    let label_col = header.iter().position(|h| *h == "label");
    let mut out = Vec::new();
    for (line, row) in rows {
        let parse_err = |message: String| EvalError::Parse { line, message };
        let raw_index = field(&row, i_col, line)?;
        let index = raw_index
            .parse()
            .map_err(|_| parse_err(format!("index {raw_index:?} is not a non-negative integer")))?;
        let raw_score = field(&row, s_col, line)?;
        let score: f64 = raw_score
            .parse()
            .map_err(|_| parse_err(format!("score {raw_score:?} is not a number")))?;
        if !score.is_finite() {
            return Err(parse_err(format!("score {raw_score:?} is not finite")));
        }
        let label = match label_col.map(|c| row.get(c).copied().unwrap_or("")) {
            None => None,
            Some("0") => Some(0),
            Some("1") => Some(1),
            Some(other) => return Err(DataError::BadLabel { line, value: other.to_string() }.into()),
        };
        out.push(PairScore {
            index,
            image_a: field(&row, a_col, line)?.to_string(),
            image_b: field(&row, b_col, line)?.to_string(),
            score,
            label,
        });
    }
    Ok(out)
}

/// `auc=<value>` with six decimals.
pub fn format_auc(value: f64) -> String {
    format!("auc={value:.6}")
}
