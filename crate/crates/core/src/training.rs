//! Minibatch training: Adam with bias correction, linear KL annealing,
//! per-epoch validation with early stopping, and for `nbvae_c` the
//! alternating latent source (feature prior on odd gradient steps).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{Gradients, ParamStore, Tensor};
use crate::evaluation::{fold_in, label_precision, EvalError};
use crate::models::{Batch, LatentSource, Modality, Model, ModelError, Variant};
use crate::sparse_data::{minibatches, BinaryMatrix, FeatureMatrix, SparseCountMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub anneal_steps: u64,
    pub beta_max: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// `nbvae_c`: draw `z` from the feature prior on odd gradient steps.
    pub alternate_feature_prior: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            max_epochs: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            anneal_steps: 10_000,
            beta_max: 1.0,
            patience: 10,
            seed: 0,
            alternate_feature_prior: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, why: &str| Err(TrainError::Config(format!("train.{field} {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.anneal_steps == 0 {
            return bad("anneal_steps", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.beta_max) {
            return bad("beta_max", "must lie in [0, 1]");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite {what} at step {step}; training aborted")]
    NonFinite {
        what: String,
        step: u64,
        /// State before the failing step.
        last_good: Box<TrainState>,
        history: Vec<HistoryRow>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Model plus optimizer progress. Adam moments live in each parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: u64,
    pub best_validation_metric: Option<f64>,
    pub model: Model,
}

/// One gradient step; `validation_metric` is set on the last step of an
/// epoch when validation data is present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub beta: f64,
    pub validation_metric: Option<f64>,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,elbo,kl,beta,validation_metric\n");
    for h in history {
        let val = h
            .validation_metric
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            h.step, h.epoch, h.elbo, h.kl, h.beta, val
        )
        .expect("write to string");
    }
    out
}

pub fn write_history(history: &[HistoryRow], path: &Path) -> std::io::Result<()> {
    fs::write(path, history_csv(history))
}

/// Training rows: counts or binary indicators, plus features for `nbvae_c`.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub modality: Modality,
    pub y: &'a SparseCountMatrix,
    pub x: Option<&'a FeatureMatrix>,
}

/// Held-out rows used for early stopping. Larger metric values are better.
#[derive(Debug, Clone, Copy)]
pub enum Validation<'a> {
    /// Mean per-row ELBO at β = 1 with fixed noise.
    Elbo(&'a SparseCountMatrix),
    /// NDCG@`r` under fold-in.
    Ndcg {
        data: &'a BinaryMatrix,
        fraction: f64,
        seed: u64,
        r: usize,
    },
    /// Precision@1 of label predictions.
    PrecisionAt1 {
        features: &'a FeatureMatrix,
        labels: &'a BinaryMatrix,
    },
}

pub fn kl_beta(global_step: u64, anneal_steps: u64, beta_max: f64) -> f64 {
    assert!(anneal_steps >= 1, "anneal_steps must be at least 1");
    beta_max.min(global_step as f64 / anneal_steps as f64)
}

/// Settings for one Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One Adam update at step `t` (1-based) for every parameter not in `frozen`.
/// Nothing is modified if any gradient is non-finite; the error names the
/// offending parameter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    t: u64,
    settings: AdamSettings,
    frozen: &[crate::diffmath::ParamId],
) -> Result<(), String> {
    assert!(t >= 1, "Adam steps are 1-based");
    assert_eq!(grads.len(), store.len(), "one gradient per parameter");
    for (id, p) in store.iter() {
        let g = grads.get(id);
        assert_eq!(g.dim(), p.value.dim(), "gradient shape for {}", p.name);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(format!("gradient of {}", p.name));
        }
    }
    let AdamSettings {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
    } = settings;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (id, p) in store.iter_mut() {
        if frozen.contains(&id) {
            continue;
        }
        let g = grads.get(id);
        ndarray::Zip::from(&mut p.value)
            .and(&mut p.first_moment)
            .and(&mut p.second_moment)
            .and(g)
            .for_each(|theta, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
    debug_assert!(store.all_finite(), "parameters became non-finite");
    Ok(())
}

/// Standard-normal noise matrix.
fn noise(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
    Array2::from_shape_simple_fn((rows, k), || rng.sample(StandardNormal))
}

/// Seed for the minibatch order of `epoch`.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64 + 1)
}

/// Mean per-row ELBO (β = 1) over `data`, with noise fixed by `seed`.
pub fn validation_elbo(
    model: &Model,
    data: &SparseCountMatrix,
    seed: u64,
) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    let mut total = 0.0;
    for chunk in rows.chunks(512) {
        let batch = Batch::from_rows(data, chunk);
        let eps = noise(&mut rng, chunk.len(), model.config.latent_dim);
        total += model.elbo(&batch, 1.0, &eps)?.elbo * chunk.len() as f64;
    }
    Ok(total / data.n_rows().max(1) as f64)
}

fn validation_metric(
    model: &Model,
    validation: &Validation<'_>,
    seed: u64,
) -> Result<f64, TrainError> {
    Ok(match *validation {
        Validation::Elbo(data) => validation_elbo(model, data, seed)?,
        Validation::Ndcg {
            data,
            fraction,
            seed,
            r,
        } => fold_in(model, data, fraction, seed, &[r])?.ndcg[0],
        Validation::PrecisionAt1 { features, labels } => {
            label_precision(model, features, labels, &[1])?[0]
        }
    })
}

/// Result of [`train`]: the returned state is the best-validation one when
/// validation data was given, otherwise the final one.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
}

fn check_data(model: &Model, data: &TrainData<'_>) -> Result<(), TrainError> {
    let variant = model.variant();
    if !variant.accepts(data.modality) {
        return Err(TrainError::Contract(format!(
            "{variant} cannot be trained on {:?} data",
            data.modality
        )));
    }
    if data.y.n_cols() != model.config.input_dim {
        return Err(TrainError::Contract(format!(
            "data has {} columns, model expects {}",
            data.y.n_cols(),
            model.config.input_dim
        )));
    }
    if matches!(variant, Variant::NbvaeB | Variant::NbvaeC) && !data.y.is_binary() {
        return Err(TrainError::Contract(format!("{variant} needs binary data")));
    }
    match (variant, data.x) {
        (Variant::NbvaeC, None) => Err(TrainError::Contract("nbvae_c needs features".into())),
        (Variant::NbvaeC, Some(x)) if x.n_rows() != data.y.n_rows() => {
            Err(TrainError::Contract("feature and label rows differ".into()))
        }
        (Variant::NbvaeC, Some(x)) if Some(x.n_dims()) != model.config.feature_dim => Err(
            TrainError::Contract("feature dimension does not match the model".into()),
        ),
        _ => Ok(()),
    }
}

pub fn train(
    model: Model,
    config: &TrainConfig,
    data: TrainData<'_>,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_data(&model, &data)?;
    let frozen = model.params.frozen(&model.config);
    let adam = AdamSettings::from(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let validation_seed = config.seed ^ 0x5A5A_5A5A;
    let k = model.config.latent_dim;

    let mut state = TrainState {
        epoch: 0,
        global_step: 0,
        best_validation_metric: None,
        model,
    };
    let mut best: Option<TrainState> = None;
    let mut history = Vec::new();
    let mut bad_epochs = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        for rows in minibatches(
            data.y.n_rows(),
            config.batch_size,
            epoch_seed(config.seed, epoch),
        ) {
            let mut batch = Batch::from_rows(data.y, &rows);
            if let Some(x) = data.x.filter(|_| state.model.variant() == Variant::NbvaeC) {
                batch = batch.with_features(x, &rows);
            }
            let beta = kl_beta(state.global_step, config.anneal_steps, config.beta_max);
            let source = if state.model.variant() == Variant::NbvaeC
                && config.alternate_feature_prior
                && state.global_step % 2 == 1
            {
                LatentSource::FeaturePrior
            } else {
                LatentSource::Encoder
            };
            let eps = noise(&mut rng, rows.len(), k);
            let step = state.global_step + 1;
            let abort = |what: String, state: &TrainState, history: &Vec<HistoryRow>| {
                TrainError::NonFinite {
                    what,
                    step,
                    last_good: Box::new(state.clone()),
                    history: history.clone(),
                }
            };
            let (value, grads) = state.model.loss_gradients(&batch, beta, &eps, source)?;
            if !value.elbo.is_finite() {
                return Err(abort("ELBO".into(), &state, &history));
            }
            let mut next = state.model.params.store.clone();
            if let Err(what) = adam_step(&mut next, &grads, step, adam, &frozen) {
                return Err(abort(what, &state, &history));
            }
            state.model.params.store = next;
            state.global_step = step;
            history.push(HistoryRow {
                step,
                epoch,
                elbo: value.elbo,
                kl: value.kl,
                beta,
                validation_metric: None,
            });
        }
        state.epoch = epoch;

        let Some(validation) = &validation else {
            continue;
        };
        let metric = validation_metric(&state.model, validation, validation_seed)?;
        if let Some(last) = history.last_mut() {
            last.validation_metric = Some(metric);
        }
        log::info!("epoch {epoch}: validation {metric:.6}");
        if state.best_validation_metric.is_none_or(|b| metric > b) {
            state.best_validation_metric = Some(metric);
            best = Some(state.clone());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(mut b) = best {
        // Keep the progress counters of the full run on the restored state.
        b.epoch = state.epoch;
        b.global_step = state.global_step;
        state = b;
    }
    Ok(TrainOutcome {
        state,
        history,
        stopped_early,
    })
}
