//! Log-likelihoods, Gaussian KL divergences and reparameterized sampling.
//!
//! Each quantity comes in two forms: a plain function over slices, used for
//! evaluation and as a reference, and a graph builder returning per-row
//! values (`n×1`) for the training objective.

use thiserror::Error;

use crate::diffmath::special::{ln_1m_exp, ln_gamma};
use crate::diffmath::{Axis, DiffError, Graph, NodeId, Tensor, UnaryOp};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DistError {
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("{what} = {value} at index {index} is outside the domain")]
    Domain {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{0}")]
    Contract(String),
}

/// Diagonal Gaussian over the latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, DistError> {
        if mean.len() != variance.len() {
            return Err(DistError::Shape(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if let Some((i, &v)) = variance
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(DistError::Domain {
                what: "variance",
                index: i,
                value: v,
            });
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }
}

fn same_len(what: &str, a: usize, b: usize) -> Result<(), DistError> {
    if a != b {
        return Err(DistError::Shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

fn check_positive(what: &'static str, xs: &[f64]) -> Result<(), DistError> {
    match xs
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        Some((index, &value)) => Err(DistError::Domain { what, index, value }),
        None => Ok(()),
    }
}

fn check_counts(y: &[f64]) -> Result<(), DistError> {
    match y
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && v.fract() == 0.0))
    {
        Some((index, &value)) => Err(DistError::Domain {
            what: "count",
            index,
            value,
        }),
        None => Ok(()),
    }
}

fn check_probability(p: &[f64]) -> Result<(), DistError> {
    match p
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && **v < 1.0))
    {
        Some((index, &value)) => Err(DistError::Domain {
            what: "p",
            index,
            value,
        }),
        None => Ok(()),
    }
}

/// `Σ_v log NB(y_v; r_v, p_v)` with pmf `Γ(y+r)/(Γ(r) y!) p^y (1-p)^r`.
pub fn nb_logpmf(y: &[f64], r: &[f64], p: &[f64]) -> Result<f64, DistError> {
    same_len("y/r", y.len(), r.len())?;
    same_len("y/p", y.len(), p.len())?;
    check_counts(y)?;
    check_positive("r", r)?;
    check_probability(p)?;
    Ok(y.iter()
        .zip(r)
        .zip(p)
        .map(|((&y, &r), &p)| {
            ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0) + y * p.ln() + r * (-p).ln_1p()
        })
        .sum())
}

/// Dirichlet-multinomial log-pmf of `y` given its total `n = Σ y_v`.
pub fn dirmulti_logpmf(y: &[f64], r: &[f64]) -> Result<f64, DistError> {
    same_len("y/r", y.len(), r.len())?;
    check_counts(y)?;
    check_positive("r", r)?;
    let n: f64 = y.iter().sum();
    let r_tot: f64 = r.iter().sum();
    let per_dim: f64 = y
        .iter()
        .zip(r)
        .map(|(&y, &r)| ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0))
        .sum();
    Ok(ln_gamma(n + 1.0) + ln_gamma(r_tot) - ln_gamma(n + r_tot) + per_dim)
}

/// `Σ_v y_v log softmax(logits)_v`; the multinomial coefficient is left out.
pub fn multinomial_loglik(y: &[f64], logits: &[f64]) -> Result<f64, DistError> {
    same_len("y/logits", y.len(), logits.len())?;
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(y.iter().zip(logits).map(|(&y, &l)| y * (l - lse)).sum())
}

/// Log-likelihood of binary `y` under `y_v ~ Bernoulli(1 - (1-p_v)^{r_v})`,
/// the law of `1(m_v ≥ 1)` for `m_v ~ NB(r_v, p_v)`.
pub fn bernoulli_link_loglik(y: &[f64], r: &[f64], p: &[f64]) -> Result<f64, DistError> {
    same_len("y/r", y.len(), r.len())?;
    same_len("y/p", y.len(), p.len())?;
    if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(DistError::Contract(format!(
            "binary likelihood given non-binary value {v} at index {i}"
        )));
    }
    check_positive("r", r)?;
    check_probability(p)?;
    Ok(y.iter()
        .zip(r)
        .zip(p)
        .map(|((&y, &r), &p)| {
            // log P(m = 0) = r log(1-p)
            let log_p0 = r * (-p).ln_1p();
            if y == 1.0 {
                ln_1m_exp(log_p0)
            } else {
                log_p0
            }
        })
        .sum())
}

/// Probability that a thresholded NB draw is one: `1 - (1-p)^r`.
pub fn bernoulli_link_prob(r: f64, p: f64) -> f64 {
    -(r * (-p).ln_1p()).exp_m1()
}

/// `KL(q ‖ N(0, I))`.
pub fn kl_standard(q: &LatentGaussian) -> f64 {
    0.5 * q
        .mean
        .iter()
        .zip(&q.variance)
        .map(|(&m, &v)| m * m + v - 1.0 - v.ln())
        .sum::<f64>()
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_general(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64, DistError> {
    same_len("q/p", q.dim(), p.dim())?;
    Ok(0.5
        * (0..q.dim())
            .map(|k| {
                let d = q.mean[k] - p.mean[k];
                (p.variance[k] / q.variance[k]).ln() + (q.variance[k] + d * d) / p.variance[k] - 1.0
            })
            .sum::<f64>())
}

/// `z = μ + √σ² ⊙ noise`.
pub fn reparam_sample(q: &LatentGaussian, noise: &[f64]) -> Result<Vec<f64>, DistError> {
    same_len("noise", noise.len(), q.dim())?;
    Ok(q.mean
        .iter()
        .zip(&q.variance)
        .zip(noise)
        .map(|((&m, &v), &e)| m + v.sqrt() * e)
        .collect())
}

// ---------------------------------------------------------------------------
// Graph builders. `y` is a constant count matrix (n×V); all outputs are n×1.

/// Constant `ln Γ(y + 1)` matrix.
pub fn ln_factorial(y: &Tensor) -> Tensor {
    y.mapv(|v| ln_gamma(v + 1.0))
}

/// Per-row NB log-likelihood. `p` must already lie strictly inside (0, 1).
pub fn nb_loglik_rows(g: &mut Graph, y: NodeId, r: NodeId, p: NodeId) -> Result<NodeId, DiffError> {
    let lf = g.constant(ln_factorial(g.value(y)));
    let yr = g.add(y, r)?;
    let lg_yr = g.lgamma(yr)?;
    let lg_r = g.lgamma(r)?;
    let log_p = g.log(p)?;
    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.shift(neg_p, 1.0);
    let log_1mp = g.log(one_minus_p)?;
    let a = g.sub(lg_yr, lg_r)?;
    let a = g.sub(a, lf)?;
    let b = g.mul(y, log_p)?;
    let c = g.mul(r, log_1mp)?;
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    Ok(g.sum(s, Axis::Cols))
}

/// Per-row Dirichlet-multinomial log-likelihood conditioned on row totals.
pub fn dirmulti_loglik_rows(g: &mut Graph, y: NodeId, r: NodeId) -> Result<NodeId, DiffError> {
    let yv = g.value(y);
    let totals = yv.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    let coef = totals.mapv(|n| ln_gamma(n + 1.0))
        - ln_factorial(yv)
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
    let coef = g.constant(coef);
    let n = g.constant(totals);
    let r_tot = g.sum(r, Axis::Cols);
    let lg_rtot = g.lgamma(r_tot)?;
    let n_rtot = g.add(n, r_tot)?;
    let lg_n_rtot = g.lgamma(n_rtot)?;
    let yr = g.add(y, r)?;
    let lg_yr = g.lgamma(yr)?;
    let lg_r = g.lgamma(r)?;
    let per_dim = g.sub(lg_yr, lg_r)?;
    let per_dim = g.sum(per_dim, Axis::Cols);
    let s = g.sub(lg_rtot, lg_n_rtot)?;
    let s = g.add(s, per_dim)?;
    g.add(s, coef)
}

/// Per-row `Σ_v y_v log softmax(logits)_v`.
pub fn multinomial_loglik_rows(
    g: &mut Graph,
    y: NodeId,
    logits: NodeId,
) -> Result<NodeId, DiffError> {
    let ls = g.log_softmax(logits);
    let t = g.mul(y, ls)?;
    Ok(g.sum(t, Axis::Cols))
}

/// Per-row Bernoulli-link log-likelihood for binary `y`.
pub fn bernoulli_link_loglik_rows(
    g: &mut Graph,
    y: NodeId,
    r: NodeId,
    p: NodeId,
) -> Result<NodeId, DiffError> {
    let yv = g.value(y);
    if let Some(((i, j), v)) = yv.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(DiffError::Contract(format!(
            "binary likelihood given value {v} at ({i}, {j})"
        )));
    }
    let not_y = g.constant(yv.mapv(|v| 1.0 - v));
    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.shift(neg_p, 1.0);
    let log_1mp = g.log(one_minus_p)?;
    let log_p0 = g.mul(r, log_1mp)?;
    let log_p1 = g.unary(UnaryOp::Ln1mExp, log_p0)?;
    let a = g.mul(y, log_p1)?;
    let b = g.mul(not_y, log_p0)?;
    let s = g.add(a, b)?;
    Ok(g.sum(s, Axis::Cols))
}

/// Per-row `KL(N(μ, e^{lv}) ‖ N(0, I))`.
pub fn kl_standard_rows(g: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId, DiffError> {
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.shift(t, -1.0);
    let s = g.sum(t, Axis::Cols);
    Ok(g.scale(s, 0.5))
}

/// Per-row `KL(N(μ_q, e^{lv_q}) ‖ N(μ_p, e^{lv_p}))`.
pub fn kl_general_rows(
    g: &mut Graph,
    mu_q: NodeId,
    lv_q: NodeId,
    mu_p: NodeId,
    lv_p: NodeId,
) -> Result<NodeId, DiffError> {
    let var_q = g.exp(lv_q)?;
    let d = g.sub(mu_q, mu_p)?;
    let d2 = g.square(d)?;
    let num = g.add(var_q, d2)?;
    let neg_lvp = g.scale(lv_p, -1.0);
    let inv_var_p = g.exp(neg_lvp)?;
    let ratio = g.mul(num, inv_var_p)?;
    let t = g.sub(lv_p, lv_q)?;
    let t = g.add(t, ratio)?;
    let t = g.shift(t, -1.0);
    let s = g.sum(t, Axis::Cols);
    Ok(g.scale(s, 0.5))
}

/// `z = μ + e^{lv/2} ⊙ noise` with `noise` a constant.
pub fn reparam_rows(
    g: &mut Graph,
    mu: NodeId,
    logvar: NodeId,
    noise: Tensor,
) -> Result<NodeId, DiffError> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half)?;
    let e = g.constant(noise);
    let scaled = g.mul(sd, e)?;
    g.add(mu, scaled)
}
