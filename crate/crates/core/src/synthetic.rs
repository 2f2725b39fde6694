//! Seeded synthetic datasets.
//!
//! * [`nb_mixture_corpus`]: documents drawn from a mixture of independent NB
//!   word-count profiles.
//! * [`bursty_corpus`]: topic-mixture documents whose word distribution is
//!   itself Dirichlet-distributed around the topic mixture, so words repeat
//!   within a document far more than a multinomial allows.
//! * [`implicit_feedback`]: a user×item binary matrix from a latent-factor
//!   model with `P(y=1) = 1 − exp(−exp(u·w + b))`.
//! * [`planted_multilabel`]: Gaussian features and labels drawn through a
//!   low-rank linear map and the Bernoulli link `1 − (1−p)^r`.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sparse_data::{BinaryMatrix, FeatureMatrix, SparseCountMatrix};

fn gamma(rng: &mut ChaCha8Rng, shape: f64, scale: f64) -> f64 {
    Gamma::new(shape, scale)
        .expect("positive gamma parameters")
        .sample(rng)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda)
        .expect("finite poisson rate")
        .sample(rng) as u32
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = alpha.iter().map(|&a| gamma(rng, a, 1.0)).collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 {
        g.iter_mut().for_each(|x| *x /= total);
    } else {
        // Every draw underflowed; fall back to the mean.
        let s: f64 = alpha.iter().sum();
        g = alpha.iter().map(|a| a / s).collect();
    }
    g
}

fn counts_to_row(counts: &[u32]) -> Vec<(u32, u32)> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(v, &c)| (v as u32, c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbMixtureSpec {
    pub n_docs: usize,
    pub vocab: usize,
    pub components: usize,
    /// NB probability shared by all words.
    pub p: f64,
}

impl Default for NbMixtureSpec {
    fn default() -> Self {
        Self {
            n_docs: 500,
            vocab: 50,
            components: 3,
            p: 0.5,
        }
    }
}

/// Each component draws a dispersion profile `r_v ~ Gamma(0.5, 2)`; each
/// document picks a component uniformly and draws `y_v ~ NB(r_v, p)`.
pub fn nb_mixture_corpus(spec: NbMixtureSpec, seed: u64) -> SparseCountMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles: Vec<Vec<f64>> = (0..spec.components)
        .map(|_| (0..spec.vocab).map(|_| gamma(&mut rng, 0.5, 2.0)).collect())
        .collect();
    let odds = spec.p / (1.0 - spec.p);
    let rows = (0..spec.n_docs)
        .map(|_| {
            let r = &profiles[rng.random_range(0..spec.components)];
            let counts: Vec<u32> = r
                .iter()
                .map(|&r| {
                    let lambda = gamma(&mut rng, r, odds);
                    poisson(&mut rng, lambda)
                })
                .collect();
            counts_to_row(&counts)
        })
        .collect();
    SparseCountMatrix::from_rows(spec.vocab, rows).expect("generated rows are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstySpec {
    pub n_docs: usize,
    pub vocab: usize,
    pub topics: usize,
    pub mean_length: f64,
    /// Concentration of each document's word distribution around its topic
    /// mixture; smaller is burstier.
    pub concentration: f64,
}

impl Default for BurstySpec {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            vocab: 1000,
            topics: 20,
            mean_length: 150.0,
            concentration: 20.0,
        }
    }
}

/// Topics `φ_k ~ Dir(0.05)`, proportions `θ_j ~ Dir(0.2)`, document word
/// distribution `π_j ~ Dir(κ·Φθ_j)`, length `~ Poisson(L)` (at least 10) and
/// tokens drawn from `π_j`.
pub fn bursty_corpus(spec: BurstySpec, seed: u64) -> SparseCountMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics: Vec<Vec<f64>> = (0..spec.topics)
        .map(|_| dirichlet(&mut rng, &vec![0.05; spec.vocab]))
        .collect();
    let rows = (0..spec.n_docs)
        .map(|_| {
            let theta = dirichlet(&mut rng, &vec![0.2; spec.topics]);
            let mean: Vec<f64> = (0..spec.vocab)
                .map(|v| {
                    theta
                        .iter()
                        .zip(&topics)
                        .map(|(t, phi)| t * phi[v])
                        .sum::<f64>()
                })
                .collect();
            let alpha: Vec<f64> = mean
                .iter()
                .map(|m| (spec.concentration * m).max(1e-6))
                .collect();
            let pi = dirichlet(&mut rng, &alpha);
            let len = poisson(&mut rng, spec.mean_length).max(10);
            let mut counts = vec![0u32; spec.vocab];
            if let Ok(words) = WeightedIndex::new(&pi) {
                for _ in 0..len {
                    counts[words.sample(&mut rng)] += 1;
                }
            }
            counts_to_row(&counts)
        })
        .collect();
    SparseCountMatrix::from_rows(spec.vocab, rows).expect("generated rows are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub factors: usize,
    /// Scale of the user·item affinity.
    pub affinity: f64,
    /// Mean item bias; controls density.
    pub bias_mean: f64,
    pub bias_sd: f64,
}

impl Default for ImplicitSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            factors: 8,
            affinity: 1.0,
            bias_mean: -4.0,
            bias_sd: 1.0,
        }
    }
}

/// Factor entries `~ N(0, 1/√factors)` (so `u·w` has unit variance), item bias
/// `b_v ~ N(bias_mean, bias_sd²)`, and `y_iv ~ Bernoulli(1 − exp(−exp(a·u_i·w_v + b_v)))`.
/// Users with no items get one item drawn by their highest affinity.
pub fn implicit_feedback(spec: ImplicitSpec, seed: u64) -> BinaryMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (spec.factors as f64).sqrt().sqrt();
    let factors = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..spec.factors)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let users = factors(spec.n_users, &mut rng);
    let items = factors(spec.n_items, &mut rng);
    let bias_dist = Normal::new(spec.bias_mean, spec.bias_sd).expect("finite bias parameters");
    let bias: Vec<f64> = (0..spec.n_items)
        .map(|_| bias_dist.sample(&mut rng))
        .collect();
    let rows = users
        .iter()
        .map(|u| {
            let logits: Vec<f64> = items
                .iter()
                .zip(&bias)
                .map(|(w, b)| spec.affinity * u.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
                .collect();
            let mut row: Vec<u32> = logits
                .iter()
                .enumerate()
                .filter(|(_, &l)| rng.random_bool(-(-l.exp()).exp_m1()))
                .map(|(v, _)| v as u32)
                .collect();
            if row.is_empty() {
                let best = (0..logits.len())
                    .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)));
                row.extend(best.map(|v| v as u32));
            }
            row
        })
        .collect();
    BinaryMatrix::from_rows(spec.n_items, rows).expect("generated rows are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultilabelSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_labels: usize,
    /// Rank of the planted feature→label map.
    pub rank: usize,
    /// Scale of the planted map on the log-rate scale.
    pub signal: f64,
    /// Log-rate offset; controls label density.
    pub offset: f64,
    /// NB probability of the Bernoulli link.
    pub p: f64,
}

impl Default for MultilabelSpec {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            n_features: 50,
            n_labels: 100,
            rank: 5,
            signal: 4.0,
            offset: -5.0,
            p: 0.5,
        }
    }
}

/// Features `x ~ N(0, I)`; `log r = signal·B·C·x + offset` with `B` (L×rank)
/// and `C` (rank×D) Gaussian with unit-variance rows after scaling; labels
/// `y_l ~ Bernoulli(1 − (1−p)^{r_l})`. Samples with no label get their
/// highest-rate label.
pub fn planted_multilabel(spec: MultilabelSpec, seed: u64) -> (FeatureMatrix, BinaryMatrix) {
    let (x, y, _) = generate_multilabel(spec, seed);
    (x, y)
}

/// The planted `log r` of every sample and label for the data
/// [`planted_multilabel`] returns with the same arguments.
pub fn planted_log_rates(spec: MultilabelSpec, seed: u64) -> Vec<Vec<f64>> {
    generate_multilabel(spec, seed).2
}

fn generate_multilabel(
    spec: MultilabelSpec,
    seed: u64,
) -> (FeatureMatrix, BinaryMatrix, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let c: Vec<Vec<f64>> = (0..spec.rank)
        .map(|_| {
            (0..spec.n_features)
                .map(|_| normal(&mut rng) / (spec.n_features as f64).sqrt())
                .collect()
        })
        .collect();
    let b: Vec<Vec<f64>> = (0..spec.n_labels)
        .map(|_| {
            (0..spec.rank)
                .map(|_| normal(&mut rng) / (spec.rank as f64).sqrt())
                .collect()
        })
        .collect();
    let ln_q = (-spec.p).ln_1p();
    let mut features = Vec::with_capacity(spec.n_samples);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut rates = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let x: Vec<f64> = (0..spec.n_features).map(|_| normal(&mut rng)).collect();
        let h: Vec<f64> = c
            .iter()
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        let log_r: Vec<f64> = b
            .iter()
            .map(|row| {
                spec.signal * row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + spec.offset
            })
            .collect();
        let mut row: Vec<u32> = log_r
            .iter()
            .enumerate()
            .filter(|(_, &lr)| rng.random_bool(-(lr.exp() * ln_q).exp_m1()))
            .map(|(l, _)| l as u32)
            .collect();
        if row.is_empty() {
            let best =
                (0..log_r.len()).max_by(|&a, &b| log_r[a].total_cmp(&log_r[b]).then(b.cmp(&a)));
            row.extend(best.map(|l| l as u32));
        }
        features.push(x.iter().enumerate().map(|(d, &v)| (d as u32, v)).collect());
        labels.push(row);
        rates.push(log_r);
    }
    (
        FeatureMatrix::from_rows(spec.n_features, features).expect("generated rows are valid"),
        BinaryMatrix::from_rows(spec.n_labels, labels).expect("generated rows are valid"),
        rates,
    )
}
