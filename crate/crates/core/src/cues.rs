//! Zero-shot scoring, Top-k cue mining and multi-label target expansion.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::neighbors::NeighborGraph;

/// Cosine similarities between every embedding and every class prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotLogits {
    classes: usize,
    scores: Vec<f64>,
}

impl ZeroShotLogits {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::DimensionMismatch("ragged score rows".into()));
        }
        Ok(Self {
            classes,
            scores: rows.into_iter().flatten().collect(),
        })
    }

    pub fn num_samples(&self) -> usize {
        self.scores.len().checked_div(self.classes).unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    /// Argmax per row, ties to the smaller class index.
    pub fn predict(&self) -> Vec<usize> {
        (0..self.num_samples()).map(|i| argmax(self.row(i))).collect()
    }

    /// Single-precision copy for persistence.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.num_samples(),
            self.classes,
            self.scores.iter().map(|&s| s as f32).collect(),
        )
        .expect("shape is consistent")
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            classes: m.cols(),
            scores: m.as_slice().iter().map(|&s| s as f64).collect(),
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = c;
        }
    }
    best
}

fn unit_rows(m: &Matrix, what: &'static str) -> Result<Vec<Vec<f64>>> {
    m.iter_rows()
        .enumerate()
        .map(|(row, r)| {
            let norm = r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { what, row });
            }
            Ok(r.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect()
}

/// `scores[i][c] = cos(embeddings[i], prototypes[c])`. Both inputs are re-normalized.
pub fn zero_shot_logits(embeddings: &Matrix, prototypes: &Matrix) -> Result<ZeroShotLogits> {
    if embeddings.cols() != prototypes.cols() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} dims, prototypes {}",
            embeddings.cols(),
            prototypes.cols()
        )));
    }
    let protos = unit_rows(prototypes, "prototypes")?;
    let embs = unit_rows(embeddings, "embeddings")?;
    let mut scores = Vec::with_capacity(embs.len() * protos.len());
    for e in &embs {
        for p in &protos {
            scores.push(e.iter().zip(p).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Ok(ZeroShotLogits {
        classes: protos.len(),
        scores,
    })
}

/// How cue classes are picked from a zero-shot score row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CueMode {
    /// Highest-scoring non-ground-truth classes.
    #[default]
    Top,
    /// Uniform sample of non-ground-truth classes.
    Random,
    /// Lowest-scoring non-ground-truth classes.
    Last,
}

impl CueMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CueMode::Top => "top",
            CueMode::Random => "random",
            CueMode::Last => "last",
        }
    }
}

impl std::str::FromStr for CueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(CueMode::Top),
            "random" => Ok(CueMode::Random),
            "last" => Ok(CueMode::Last),
            other => Err(Error::Validation(format!("unknown cue mode {other:?}"))),
        }
    }
}

fn clamp_k(k: usize, classes: usize) -> usize {
    let limit = classes.saturating_sub(1);
    if k > limit {
        log::warn!("k={k} exceeds the {limit} non-ground-truth classes; clamping");
        limit
    } else {
        k
    }
}

fn check_labels(scores: &ZeroShotLogits, labels: &[usize]) -> Result<()> {
    if labels.len() != scores.num_samples() {
        return Err(Error::DimensionMismatch(format!(
            "{} score rows but {} labels",
            scores.num_samples(),
            labels.len()
        )));
    }
    let classes = scores.num_classes();
    if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label,
            position,
            classes,
        });
    }
    Ok(())
}

/// Non-ground-truth classes of one row, ordered by `cmp` on scores with ties to the
/// smaller index, truncated to `k`.
fn ranked(row: &[f64], label: usize, k: usize, descending: bool) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..row.len()).filter(|&c| c != label).collect();
    candidates.sort_by(|&a, &b| {
        let by_score = row[a].total_cmp(&row[b]);
        let by_score = if descending { by_score.reverse() } else { by_score };
        match by_score {
            Ordering::Equal => a.cmp(&b),
            other => other,
        }
    });
    candidates.truncate(k);
    candidates
}

/// The `min(k, C-1)` highest-scoring classes other than the label, best first.
pub fn topk_cues(scores: &ZeroShotLogits, labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    variant_cues(scores, labels, k, CueMode::Top, 0)
}

/// Cue lists under a selection mode. `seed` only matters for [`CueMode::Random`].
pub fn variant_cues(
    scores: &ZeroShotLogits,
    labels: &[usize],
    k: usize,
    mode: CueMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    check_labels(scores, labels)?;
    let k = clamp_k(k, scores.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| match mode {
            CueMode::Top => ranked(scores.row(i), y, k, true),
            CueMode::Last => ranked(scores.row(i), y, k, false),
            CueMode::Random => {
                let others = scores.num_classes() - 1;
                index::sample(&mut rng, others, k)
                    .into_iter()
                    .map(|j| if j >= y { j + 1 } else { j })
                    .collect()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueKind {
    Zs,
    Llm,
}

/// Binary multi-label targets, stored as the sorted positive classes of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CueTargets {
    pub kind: CueKind,
    pub k: Option<usize>,
    num_classes: usize,
    positives: Vec<Vec<usize>>,
}

impl CueTargets {
    /// Plain one-hot targets.
    pub fn one_hot(labels: &[usize], num_classes: usize, kind: CueKind) -> Self {
        Self {
            kind,
            k: None,
            num_classes,
            positives: labels.iter().map(|&y| vec![y]).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    /// Writes row `i` as 0/1 values into `out`.
    pub fn fill_row(&self, i: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &c in &self.positives[i] {
            out[c] = 1.0;
        }
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_classes];
        self.fill_row(i, &mut row);
        row
    }

    /// Keeps only the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            kind: self.kind,
            k: self.k,
            num_classes: self.num_classes,
            positives: indices.iter().map(|&i| self.positives[i].clone()).collect(),
        }
    }
}

fn expand(label: usize, extra: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    if label >= num_classes {
        return Err(Error::Validation(format!("label {label} out of range for {num_classes} classes")));
    }
    let mut row = Vec::with_capacity(extra.len() + 1);
    row.push(label);
    for &c in extra {
        if c >= num_classes {
            return Err(Error::Validation(format!("cue class {c} out of range for {num_classes} classes")));
        }
        row.push(c);
    }
    row.sort_unstable();
    row.dedup();
    Ok(row)
}

/// Ones at `{y_i} ∪ cues_i`.
pub fn expand_targets_zs(cues: &[Vec<usize>], labels: &[usize], num_classes: usize) -> Result<CueTargets> {
    if cues.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cue lists but {} labels",
            cues.len(),
            labels.len()
        )));
    }
    let mut k = None;
    let positives = cues
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (list, &y))| {
            if list.contains(&y) {
                return Err(Error::Validation(format!("cue list of sample {i} contains its label {y}")));
            }
            k = k.max(Some(list.len()));
            let row = expand(y, list, num_classes)?;
            if row.len() != list.len() + 1 {
                return Err(Error::Validation(format!("cue list of sample {i} has duplicates")));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(CueTargets {
        kind: CueKind::Zs,
        k,
        num_classes,
        positives,
    })
}

/// Ones at `{y_i} ∪ N(y_i)`.
pub fn expand_targets_llm(graph: &NeighborGraph, labels: &[usize], num_classes: usize) -> Result<CueTargets> {
    if graph.neighbors.len() != num_classes {
        return Err(Error::Validation(format!(
            "graph covers {} classes, dataset has {num_classes}",
            graph.neighbors.len()
        )));
    }
    let per_class: Vec<Vec<usize>> = graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(c, n)| expand(c, n, num_classes))
        .collect::<Result<_>>()?;
    let positives = labels
        .iter()
        .map(|&y| {
            per_class
                .get(y)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("label {y} out of range for {num_classes} classes")))
        })
        .collect::<Result<_>>()?;
    Ok(CueTargets {
        kind: CueKind::Llm,
        k: None,
        num_classes,
        positives,
    })
}

/// Persisted cue lists for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueCache {
    pub kind: CueKind,
    pub k: usize,
    pub mode: CueMode,
    pub seed: u64,
    /// Hash of the manifest and split descriptor these lists were mined from.
    pub key: String,
    pub per_sample_cue_lists: Vec<Vec<usize>>,
}

impl CueCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}
