//! Predictive rates and the evaluation protocols: per-held-out-word
//! perplexity, Recall@R / NDCG@R under fold-in, and Precision@R for
//! multi-label prediction.
//!
//! Rows are scored in parallel in fixed-size chunks; per-row results are
//! collected in row order and summed sequentially, so every reported number
//! is independent of the thread count.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::Tensor;
use crate::distributions::bernoulli_link_prob;
use crate::models::{Decoded, Model, ModelError, Variant};
use crate::sparse_data::{
    split_heldout, BinaryMatrix, DataError, FeatureMatrix, SparseCountMatrix,
};

/// Rows encoded per chunk of parallel work.
const CHUNK_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Contract(String),
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Unnormalized predictive rates `l′` and their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveRate {
    pub rates: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl PredictiveRate {
    fn from_rates(rates: Vec<f64>) -> Self {
        let total: f64 = rates.iter().sum();
        let normalized = rates.iter().map(|r| r / total).collect();
        Self { rates, normalized }
    }

    fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rates: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        Self::from_rates(rates)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), EvalError> {
    if got != want {
        return Err(EvalError::Contract(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Predictive rate of the next event for one row given decoder outputs and
/// the counts `observed` already seen in that row.
///
/// * `nbvae`: `(y⁻_v + r_v)·p_v`
/// * `nbvae_dm`: `y⁻_v + r_v`
/// * `multivae`: `softmax(logits)_v`
pub fn predictive_rate(
    variant: Variant,
    decoded: &Decoded,
    observed: &[f64],
) -> Result<PredictiveRate, EvalError> {
    let rates = match (variant, decoded) {
        (Variant::Nbvae, Decoded::NegBinomial { r, p }) => {
            check_len("observed counts", observed.len(), r.len())?;
            let p_at = |v: usize| if p.len() == 1 { p[0] } else { p[v] };
            observed
                .iter()
                .zip(r)
                .enumerate()
                .map(|(v, (y, r))| (y + r) * p_at(v))
                .collect()
        }
        (Variant::NbvaeDm, Decoded::NegBinomial { r, .. }) => {
            check_len("observed counts", observed.len(), r.len())?;
            observed.iter().zip(r).map(|(y, r)| y + r).collect()
        }
        (Variant::Multivae, Decoded::Logits(l)) => {
            check_len("observed counts", observed.len(), l.len())?;
            return Ok(PredictiveRate::from_logits(l));
        }
        (Variant::NbvaeB | Variant::NbvaeC, _) => {
            return Err(EvalError::Contract(format!(
                "{variant} has no predictive rate; use label or item scoring"
            )))
        }
        _ => {
            return Err(EvalError::Contract(format!(
                "decoder outputs do not match {variant}"
            )))
        }
    };
    Ok(PredictiveRate::from_rates(rates))
}

/// Factor models whose predictive rates are computed from externally supplied
/// loadings `phi` (`V×K`) and scores `theta` (length K) for a single row.
#[derive(Debug, Clone, Copy)]
pub enum DiagnosticModel<'a> {
    /// `Σ_k φ_vk θ_k`
    Pfa { phi: &'a Tensor, theta: &'a [f64] },
    /// `Σ_k φ_vk θ_k / θ_·`
    Lda { phi: &'a Tensor, theta: &'a [f64] },
    /// `(y⁻_v + Σ_k φ_vk θ_k)·p`
    Nbfa {
        phi: &'a Tensor,
        theta: &'a [f64],
        p: f64,
    },
}

pub fn diagnostic_rate(
    model: DiagnosticModel<'_>,
    observed: &[f64],
) -> Result<PredictiveRate, EvalError> {
    let (phi, theta) = match model {
        DiagnosticModel::Pfa { phi, theta }
        | DiagnosticModel::Lda { phi, theta }
        | DiagnosticModel::Nbfa { phi, theta, .. } => (phi, theta),
    };
    check_len("theta", theta.len(), phi.ncols())?;
    let mix: Vec<f64> = phi
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(theta).map(|(f, t)| f * t).sum())
        .collect();
    let rates = match model {
        DiagnosticModel::Pfa { .. } => mix,
        DiagnosticModel::Lda { .. } => {
            let total: f64 = theta.iter().sum();
            mix.into_iter().map(|m| m / total).collect()
        }
        DiagnosticModel::Nbfa { p, .. } => {
            check_len("observed counts", observed.len(), mix.len())?;
            mix.iter().zip(observed).map(|(m, y)| (y + m) * p).collect()
        }
    };
    Ok(PredictiveRate::from_rates(rates))
}

/// `exp(−Σ h log s / Σ h)` over rows given as (normalized rates, held-out
/// entries). Rows with no held-out tokens contribute nothing.
pub fn perplexity_from_rates<'a>(
    rows: impl IntoIterator<Item = (&'a [f64], &'a [(usize, u32)])>,
) -> Result<f64, EvalError> {
    let (mut loglik, mut tokens) = (0.0, 0u64);
    for (s, heldout) in rows {
        for &(v, h) in heldout {
            loglik += f64::from(h) * s[v].ln();
            tokens += u64::from(h);
        }
    }
    if tokens == 0 {
        return Err(EvalError::Empty(
            "every row has an empty held-out part".into(),
        ));
    }
    Ok((-loglik / tokens as f64).exp())
}

fn dense_rows(m: &SparseCountMatrix, rows: std::ops::Range<usize>) -> Tensor {
    let mut y = Array2::zeros((rows.len(), m.n_cols()));
    for (i, j) in rows.enumerate() {
        for (c, n) in m.row_entries(j) {
            y[[i, c]] = f64::from(n);
        }
    }
    y
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(CHUNK_ROWS)
        .map(|s| s..(s + CHUNK_ROWS).min(n))
        .collect()
}

/// Decoder outputs at the posterior mean for every row of `observed`.
fn decode_at_mean(
    model: &Model,
    observed: &SparseCountMatrix,
    rows: std::ops::Range<usize>,
) -> Result<Vec<Decoded>, EvalError> {
    let y = dense_rows(observed, rows);
    let (mu, _) = model.encode_batch(&y)?;
    Ok(model.decode_batch(&mu)?)
}

/// Per-held-out-word perplexity: each row is split into observed and held-out
/// tokens, the observed part is encoded to its posterior mean, and held-out
/// tokens are scored under the normalized predictive rate.
pub fn perplexity(
    model: &Model,
    test: &SparseCountMatrix,
    fraction: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    let split = split_heldout(test, fraction, seed)?;
    perplexity_on_split(model, &split.observed, &split.heldout)
}

pub fn perplexity_on_split(
    model: &Model,
    observed: &SparseCountMatrix,
    heldout: &SparseCountMatrix,
) -> Result<f64, EvalError> {
    check_len("data columns", observed.n_cols(), model.config.input_dim)?;
    let variant = model.variant();
    let per_chunk: Vec<Result<(f64, u64), EvalError>> = chunks(observed.n_rows())
        .into_par_iter()
        .map(|range| {
            let decoded = decode_at_mean(model, observed, range.clone())?;
            let (mut loglik, mut tokens) = (0.0, 0u64);
            for (d, j) in decoded.iter().zip(range) {
                if heldout.row_total(j) == 0 {
                    continue;
                }
                let rate = predictive_rate(variant, d, &observed.dense_row(j))?;
                for (v, h) in heldout.row_entries(j) {
                    loglik += f64::from(h) * rate.normalized[v].ln();
                    tokens += u64::from(h);
                }
            }
            Ok((loglik, tokens))
        })
        .collect();
    let (mut loglik, mut tokens) = (0.0, 0u64);
    for c in per_chunk {
        let (l, t) = c?;
        loglik += l;
        tokens += t;
    }
    if tokens == 0 {
        return Err(EvalError::Empty(
            "every row has an empty held-out part".into(),
        ));
    }
    Ok((-loglik / tokens as f64).exp())
}

/// Indices of the `r` highest scores, skipping `exclude` (sorted). Ties go to
/// the smaller index.
pub fn top_r(scores: &[f64], exclude: &[u32], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&v| exclude.binary_search(&(v as u32)).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if r < order.len() {
        order.select_nth_unstable_by(r, cmp);
        order.truncate(r);
    }
    order.sort_unstable_by(cmp);
    order
}

/// Recall@R and NDCG@R, one entry per requested cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMetrics {
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// Ranking metrics for one row. `heldout` and `exclude` are sorted item
/// indices; returns `None` when `heldout` is empty.
pub fn rank_metrics(
    scores: &[f64],
    heldout: &[u32],
    exclude: &[u32],
    r_values: &[usize],
) -> Option<RankMetrics> {
    if heldout.is_empty() {
        return None;
    }
    let max_r = r_values.iter().copied().max().unwrap_or(0);
    let ranked = top_r(scores, exclude, max_r);
    let hits: Vec<bool> = ranked
        .iter()
        .map(|&v| heldout.binary_search(&(v as u32)).is_ok())
        .collect();
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let mut out = RankMetrics {
        recall: Vec::with_capacity(r_values.len()),
        ndcg: Vec::with_capacity(r_values.len()),
    };
    for &r in r_values {
        let top = &hits[..r.min(hits.len())];
        let found = top.iter().filter(|&&h| h).count();
        out.recall.push(found as f64 / r.min(heldout.len()) as f64);
        let dcg: f64 = top
            .iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(i, _)| discount(i))
            .sum();
        let ideal: f64 = (0..r.min(heldout.len())).map(discount).sum();
        out.ndcg.push(dcg / ideal);
    }
    Some(out)
}

/// Fraction of the top-R scored labels that are true, per cutoff.
pub fn precision_at_r(scores: &[f64], true_labels: &[u32], r_values: &[usize]) -> Vec<f64> {
    let max_r = r_values.iter().copied().max().unwrap_or(0);
    let ranked = top_r(scores, &[], max_r);
    r_values
        .iter()
        .map(|&r| {
            let hits = ranked[..r.min(ranked.len())]
                .iter()
                .filter(|&&v| true_labels.binary_search(&(v as u32)).is_ok())
                .count();
            hits as f64 / r as f64
        })
        .collect()
}

fn link_scores(d: &Decoded) -> Result<Vec<f64>, EvalError> {
    match d {
        Decoded::NegBinomial { r, p } => Ok(r
            .iter()
            .zip(p)
            .map(|(&r, &p)| bernoulli_link_prob(r, p))
            .collect()),
        Decoded::Logits(_) => Err(EvalError::Contract(
            "link scores need NB decoder outputs".into(),
        )),
    }
}

/// Label scores `1 − (1−p)^r` at the mean of the feature prior, for each row
/// of `x` (`n×D`).
pub fn score_labels_batch(model: &Model, x: &Tensor) -> Result<Vec<Vec<f64>>, EvalError> {
    if model.variant() != Variant::NbvaeC {
        return Err(EvalError::Contract(format!(
            "label scoring needs nbvae_c, not {}",
            model.variant()
        )));
    }
    let (mu, _) = model.feature_encode_batch(x)?;
    model.decode_batch(&mu)?.iter().map(link_scores).collect()
}

pub fn score_labels(model: &Model, x: &[f64]) -> Result<Vec<f64>, EvalError> {
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    Ok(score_labels_batch(model, &x)?.remove(0))
}

/// Item scores for ranking given a row's observed part: predictive rates for
/// `nbvae`/`nbvae_dm`/`multivae`, link probabilities for `nbvae_b`.
fn item_scores(model: &Model, d: &Decoded, observed: &[f64]) -> Result<Vec<f64>, EvalError> {
    match model.variant() {
        Variant::NbvaeB => link_scores(d),
        Variant::NbvaeC => Err(EvalError::Contract(
            "nbvae_c ranks labels from features".into(),
        )),
        v => Ok(predictive_rate(v, d, observed)?.normalized),
    }
}

/// Item scores for every row of `observed`, in row order.
pub fn score_items(
    model: &Model,
    observed: &SparseCountMatrix,
) -> Result<Vec<Vec<f64>>, EvalError> {
    check_len("data columns", observed.n_cols(), model.config.input_dim)?;
    let per_chunk: Vec<Result<Vec<Vec<f64>>, EvalError>> = chunks(observed.n_rows())
        .into_par_iter()
        .map(|range| {
            let decoded = decode_at_mean(model, observed, range.clone())?;
            decoded
                .iter()
                .zip(range)
                .map(|(d, j)| item_scores(model, d, &observed.dense_row(j)))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(observed.n_rows());
    for c in per_chunk {
        out.extend(c?);
    }
    Ok(out)
}

/// Mean Recall@R and NDCG@R over rows with a non-empty held-out part.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldInMetrics {
    pub r_values: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub rows: usize,
}

/// Fold-in protocol on binary data: a `fraction` of each row's items is held
/// out, the rest is encoded, and held-out items are ranked among all items
/// not in the observed part.
pub fn fold_in(
    model: &Model,
    data: &BinaryMatrix,
    fraction: f64,
    seed: u64,
    r_values: &[usize],
) -> Result<FoldInMetrics, EvalError> {
    let split = split_heldout(data.as_counts(), fraction, seed)?;
    let scores = score_items(model, &split.observed)?;
    let mut sums = RankMetrics {
        recall: vec![0.0; r_values.len()],
        ndcg: vec![0.0; r_values.len()],
    };
    let mut rows = 0;
    for (j, s) in scores.iter().enumerate() {
        let Some(m) = rank_metrics(s, split.heldout.row(j).0, split.observed.row(j).0, r_values)
        else {
            continue;
        };
        rows += 1;
        for i in 0..r_values.len() {
            sums.recall[i] += m.recall[i];
            sums.ndcg[i] += m.ndcg[i];
        }
    }
    if rows == 0 {
        return Err(EvalError::Empty("no row has held-out items".into()));
    }
    let n = rows as f64;
    Ok(FoldInMetrics {
        r_values: r_values.to_vec(),
        recall: sums.recall.iter().map(|s| s / n).collect(),
        ndcg: sums.ndcg.iter().map(|s| s / n).collect(),
        rows,
    })
}

/// Mean Precision@R of `nbvae_c` label predictions.
pub fn label_precision(
    model: &Model,
    features: &FeatureMatrix,
    labels: &BinaryMatrix,
    r_values: &[usize],
) -> Result<Vec<f64>, EvalError> {
    if features.n_rows() != labels.n_rows() {
        return Err(EvalError::Contract("feature and label rows differ".into()));
    }
    if features.n_rows() == 0 {
        return Err(EvalError::Empty("no rows".into()));
    }
    let per_chunk: Vec<Result<Vec<f64>, EvalError>> = chunks(features.n_rows())
        .into_par_iter()
        .map(|range| {
            let mut x = Array2::zeros((range.len(), features.n_dims()));
            for (i, j) in range.clone().enumerate() {
                let (idx, val) = features.row(j);
                for (&c, &v) in idx.iter().zip(val) {
                    x[[i, c as usize]] = v;
                }
            }
            let scores = score_labels_batch(model, &x)?;
            let mut sums = vec![0.0; r_values.len()];
            for (s, j) in scores.iter().zip(range) {
                for (acc, p) in sums
                    .iter_mut()
                    .zip(precision_at_r(s, labels.row(j), r_values))
                {
                    *acc += p;
                }
            }
            Ok(sums)
        })
        .collect();
    let mut sums = vec![0.0; r_values.len()];
    for c in per_chunk {
        for (acc, p) in sums.iter_mut().zip(c?) {
            *acc += p;
        }
    }
    Ok(sums.iter().map(|s| s / features.n_rows() as f64).collect())
}

/// Identity of the evaluated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIdentity {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

/// Metric values plus what they were computed on. Wall-clock time is kept
/// out of the serialized form so identical runs produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub r_values: Vec<usize>,
    pub dataset: DatasetIdentity,
    pub checkpoint: String,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn all_finite(&self) -> bool {
        self.metrics.values().all(|v| v.is_finite())
    }
}

/// Metric families a run may request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Perplexity,
    Recall,
    Ndcg,
    Precision,
}

impl MetricKind {
    pub fn parse(name: &str) -> Result<Self, EvalError> {
        match name {
            "perplexity" => Ok(Self::Perplexity),
            "recall" => Ok(Self::Recall),
            "ndcg" => Ok(Self::Ndcg),
            "precision" => Ok(Self::Precision),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }

    /// Key used in reports, e.g. `ndcg@5`.
    pub fn key(self, r: Option<usize>) -> String {
        let base = match self {
            Self::Perplexity => "perplexity",
            Self::Recall => "recall",
            Self::Ndcg => "ndcg",
            Self::Precision => "precision",
        };
        match r {
            Some(r) => format!("{base}@{r}"),
            None => base.to_string(),
        }
    }
}
