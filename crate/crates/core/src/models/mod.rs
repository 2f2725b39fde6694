//! Encoder, feature encoder and decoder networks, and the per-variant ELBO.
//!
//! All networks are stacks of affine layers with `tanh` activations:
//!
//! * encoder `f_φ`: `log(1+y)` → hidden layers → heads for the posterior mean
//!   and log-variance;
//! * decoder: `z` → shared hidden trunk → heads producing `r = exp(h_r)` and
//!   `p = sigmoid(h_p)` (NB variants) or multinomial logits (`multivae`);
//! * feature encoder `f_ψ` (`nbvae_c` only): features → hidden layers → heads
//!   for the prior mean and log-variance.

mod checkpoint;

pub use checkpoint::{
    checkpoint_digest, load_checkpoint, read_checkpoint_config, save_checkpoint, CheckpointError,
    MANIFEST_FILE, PAYLOAD_FILE,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis as NdAxis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{Axis, DiffError, Gradients, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::distributions::{self as dist, DistError, LatentGaussian};
use crate::sparse_data::{FeatureMatrix, SparseCountMatrix};

/// Lower/upper clamp for the log-variance heads.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);
/// Clamp applied to `h_r` before `r = exp(h_r)`.
pub const RATE_LOGIT_CLAMP: (f64, f64) = (-30.0, 30.0);
/// Clamp applied to `p = sigmoid(h_p)`.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Nbvae,
    NbvaeDm,
    NbvaeB,
    NbvaeC,
    Multivae,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Nbvae,
        Variant::NbvaeDm,
        Variant::NbvaeB,
        Variant::NbvaeC,
        Variant::Multivae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nbvae => "nbvae",
            Variant::NbvaeDm => "nbvae_dm",
            Variant::NbvaeB => "nbvae_b",
            Variant::NbvaeC => "nbvae_c",
            Variant::Multivae => "multivae",
        }
    }

    /// Whether the variant can be trained on data of the given modality.
    pub fn accepts(self, modality: Modality) -> bool {
        match self {
            Variant::Nbvae | Variant::NbvaeDm => {
                matches!(modality, Modality::Counts | Modality::Binary)
            }
            Variant::Multivae => matches!(modality, Modality::Counts | Modality::Binary),
            Variant::NbvaeB => modality == Modality::Binary,
            Variant::NbvaeC => modality == Modality::Multilabel,
        }
    }

    fn has_p_head(self) -> bool {
        self != Variant::Multivae
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Counts,
    Binary,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// `nbvae_c` only: replace the learned feature prior by `N(0, I)`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ablate_feature_encoder: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, input_dim: usize, latent_dim: usize) -> Self {
        Self {
            variant,
            input_dim,
            latent_dim,
            encoder_layers: vec![128, 64],
            decoder_layers: vec![64, 128],
            feature_dim: None,
            ablate_feature_encoder: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if let Some(w) = self
            .encoder_layers
            .iter()
            .chain(&self.decoder_layers)
            .find(|&&w| w == 0)
        {
            return bad(format!("layer widths must be at least 1, got {w}"));
        }
        match (self.variant, self.feature_dim) {
            (Variant::NbvaeC, None) => return bad("feature_dim is required for nbvae_c".into()),
            (Variant::NbvaeC, Some(0)) => return bad("feature_dim must be at least 1".into()),
            (v, Some(_)) if v != Variant::NbvaeC => {
                return bad(format!("feature_dim is only valid for nbvae_c, not {v}"))
            }
            _ => {}
        }
        if self.ablate_feature_encoder && self.variant != Variant::NbvaeC {
            return bad("ablate_feature_encoder is only valid for nbvae_c".into());
        }
        Ok(())
    }
}

/// Weight and bias of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// All trainable weights, laid out in a [`ParamStore`] in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    encoder: Vec<Dense>,
    encoder_mean: Dense,
    encoder_logvar: Dense,
    decoder: Vec<Dense>,
    /// `h_r` for NB variants, logits for `multivae`.
    decoder_rate: Dense,
    decoder_prob: Option<Dense>,
    feature: Vec<Dense>,
    feature_heads: Option<(Dense, Dense)>,
}

fn dense(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Dense {
    Dense {
        weight: store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng),
        bias: store.add_zeros(format!("{name}.bias"), 1, fan_out),
    }
}

fn stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    widths: &[usize],
) -> (Vec<Dense>, usize) {
    let mut fan_in = input;
    let layers = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let d = dense(store, rng, &format!("{prefix}.{i}"), fan_in, w);
            fan_in = w;
            d
        })
        .collect();
    (layers, fan_in)
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases, drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let k = config.latent_dim;
        let v = config.input_dim;

        let (encoder, h) = stack(&mut store, &mut rng, "encoder", v, &config.encoder_layers);
        let encoder_mean = dense(&mut store, &mut rng, "encoder.mean", h, k);
        let encoder_logvar = dense(&mut store, &mut rng, "encoder.logvar", h, k);

        let (decoder, h) = stack(&mut store, &mut rng, "decoder", k, &config.decoder_layers);
        let rate_name = if config.variant == Variant::Multivae {
            "decoder.logits"
        } else {
            "decoder.r"
        };
        let decoder_rate = dense(&mut store, &mut rng, rate_name, h, v);
        let decoder_prob = config.variant.has_p_head().then(|| {
            let width = if config.variant == Variant::NbvaeDm {
                1
            } else {
                v
            };
            dense(&mut store, &mut rng, "decoder.p", h, width)
        });

        let (feature, feature_heads) = match config.feature_dim {
            Some(d) if config.variant == Variant::NbvaeC => {
                let (layers, h) = stack(&mut store, &mut rng, "feature", d, &config.encoder_layers);
                let mean = dense(&mut store, &mut rng, "feature.mean", h, k);
                let logvar = dense(&mut store, &mut rng, "feature.logvar", h, k);
                (layers, Some((mean, logvar)))
            }
            _ => (Vec::new(), None),
        };

        let mut params = Self {
            store,
            encoder,
            encoder_mean,
            encoder_logvar,
            decoder,
            decoder_rate,
            decoder_prob,
            feature,
            feature_heads,
        };
        if config.ablate_feature_encoder {
            params.zero_feature_heads();
        }
        Ok(params)
    }

    fn zero_dense(&mut self, d: Dense) {
        self.store.get_mut(d.weight).value.fill(0.0);
        self.store.get_mut(d.bias).value.fill(0.0);
    }

    /// Zeroes every output head: encoder mean/log-variance, decoder heads and
    /// feature-encoder heads.
    pub fn zero_output_heads(&mut self) {
        for d in [self.encoder_mean, self.encoder_logvar, self.decoder_rate] {
            self.zero_dense(d);
        }
        if let Some(d) = self.decoder_prob {
            self.zero_dense(d);
        }
        self.zero_feature_heads();
    }

    pub fn zero_feature_heads(&mut self) {
        if let Some((m, l)) = self.feature_heads {
            self.zero_dense(m);
            self.zero_dense(l);
        }
    }

    /// Parameters that receive no updates (the feature encoder when ablated).
    pub fn frozen(&self, config: &ModelConfig) -> Vec<ParamId> {
        if !config.ablate_feature_encoder {
            return Vec::new();
        }
        let mut out: Vec<ParamId> = self
            .feature
            .iter()
            .flat_map(|d| [d.weight, d.bias])
            .collect();
        if let Some((m, l)) = self.feature_heads {
            out.extend([m.weight, m.bias, l.weight, l.bias]);
        }
        out
    }
}

/// Likelihood parameters produced by the decoder for one row.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// `r` has length V; `p` has length V, or 1 for `nbvae_dm`.
    NegBinomial {
        r: Vec<f64>,
        p: Vec<f64>,
    },
    Logits(Vec<f64>),
}

impl Decoded {
    pub fn r(&self) -> Option<&[f64]> {
        match self {
            Decoded::NegBinomial { r, .. } => Some(r),
            Decoded::Logits(_) => None,
        }
    }

    pub fn p(&self) -> Option<&[f64]> {
        match self {
            Decoded::NegBinomial { p, .. } => Some(p),
            Decoded::Logits(_) => None,
        }
    }
}

/// Decoder outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub enum DecoderNodes {
    NegBinomial { r: NodeId, p: NodeId },
    Logits(NodeId),
}

/// Where the latent sample feeding the decoder comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Encoder,
    /// `nbvae_c`: sample from the feature prior `p(z | x)`.
    FeaturePrior,
}

/// A dense minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `n×V` counts or binary indicators.
    pub y: Tensor,
    /// `n×D` features, `nbvae_c` only.
    pub x: Option<Tensor>,
}

impl Batch {
    pub fn from_rows(m: &SparseCountMatrix, rows: &[usize]) -> Self {
        let mut y = Array2::zeros((rows.len(), m.n_cols()));
        for (i, &j) in rows.iter().enumerate() {
            for (c, n) in m.row_entries(j) {
                y[[i, c]] = f64::from(n);
            }
        }
        Self { y, x: None }
    }

    pub fn with_features(mut self, features: &FeatureMatrix, rows: &[usize]) -> Self {
        let mut x = Array2::zeros((rows.len(), features.n_dims()));
        for (i, &j) in rows.iter().enumerate() {
            let (idx, val) = features.row(j);
            for (&c, &v) in idx.iter().zip(val) {
                x[[i, c as usize]] = v;
            }
        }
        self.x = Some(x);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.y.nrows()
    }
}

/// Value of the objective for one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    /// Mean over rows of `loglik - β·KL`.
    pub elbo: f64,
    pub loglik: f64,
    pub kl: f64,
}

pub struct ElboNodes {
    pub elbo: NodeId,
    pub loglik: NodeId,
    pub kl: NodeId,
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn affine(&self, g: &mut Graph, x: NodeId, d: Dense) -> Result<NodeId, DiffError> {
        let w = g.param(&self.params.store, d.weight);
        let b = g.param(&self.params.store, d.bias);
        g.affine(x, w, b)
    }

    fn hidden(&self, g: &mut Graph, mut h: NodeId, layers: &[Dense]) -> Result<NodeId, DiffError> {
        for &d in layers {
            let a = self.affine(g, h, d)?;
            h = g.tanh(a)?;
        }
        Ok(h)
    }

    fn check_cols(&self, what: &str, got: usize, want: usize) -> Result<(), ModelError> {
        if got != want {
            return Err(ModelError::Contract(format!(
                "{what} has {got} columns, model expects {want}"
            )));
        }
        Ok(())
    }

    /// Encoder on raw counts `y` (`n×V`); returns mean and clamped log-variance.
    pub fn encoder_graph(&self, g: &mut Graph, y: &Tensor) -> Result<(NodeId, NodeId), ModelError> {
        self.check_cols("encoder input", y.ncols(), self.config.input_dim)?;
        let input = g.constant(y.mapv(f64::ln_1p));
        let h = self.hidden(g, input, &self.params.encoder)?;
        let mu = self.affine(g, h, self.params.encoder_mean)?;
        let lv = self.affine(g, h, self.params.encoder_logvar)?;
        let lv = g.clamp(lv, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
        Ok((mu, lv))
    }

    /// Feature encoder on `x` (`n×D`); returns prior mean and log-variance.
    pub fn feature_graph(&self, g: &mut Graph, x: &Tensor) -> Result<(NodeId, NodeId), ModelError> {
        let (Some(d), Some((mean, logvar))) = (self.config.feature_dim, self.params.feature_heads)
        else {
            return Err(ModelError::Contract(format!(
                "feature encoder is only defined for nbvae_c, not {}",
                self.variant()
            )));
        };
        self.check_cols("feature input", x.ncols(), d)?;
        if self.config.ablate_feature_encoder {
            let zeros = Array2::zeros((x.nrows(), self.config.latent_dim));
            return Ok((g.constant(zeros.clone()), g.constant(zeros)));
        }
        let input = g.constant(x.clone());
        let h = self.hidden(g, input, &self.params.feature)?;
        let mu = self.affine(g, h, mean)?;
        let lv = self.affine(g, h, logvar)?;
        let lv = g.clamp(lv, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
        Ok((mu, lv))
    }

    pub fn decoder_graph(&self, g: &mut Graph, z: NodeId) -> Result<DecoderNodes, ModelError> {
        self.check_cols("latent code", g.shape(z).1, self.config.latent_dim)?;
        let h = self.hidden(g, z, &self.params.decoder)?;
        let hr = self.affine(g, h, self.params.decoder_rate)?;
        let Some(prob) = self.params.decoder_prob else {
            return Ok(DecoderNodes::Logits(hr));
        };
        let hr = g.clamp(hr, RATE_LOGIT_CLAMP.0, RATE_LOGIT_CLAMP.1);
        let r = g.exp(hr)?;
        let hp = self.affine(g, h, prob)?;
        let p = g.sigmoid(hp)?;
        let p = g.clamp(p, PROB_CLAMP.0, PROB_CLAMP.1);
        Ok(DecoderNodes::NegBinomial { r, p })
    }

    /// Builds the minibatch ELBO: mean over rows of `log p(y|z) − β·KL`, with
    /// `z` drawn by reparameterization from `source` using `noise` (`n×K`).
    pub fn elbo_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        beta: f64,
        noise: &Tensor,
        source: LatentSource,
    ) -> Result<ElboNodes, ModelError> {
        let n = batch.n_rows();
        if noise.dim() != (n, self.config.latent_dim) {
            return Err(ModelError::Contract(format!(
                "noise has shape {:?}, expected {:?}",
                noise.dim(),
                (n, self.config.latent_dim)
            )));
        }
        if beta < 0.0 {
            return Err(ModelError::Contract(format!(
                "beta must be non-negative, got {beta}"
            )));
        }
        let (mu_q, lv_q) = self.encoder_graph(g, &batch.y)?;
        let prior = match self.variant() {
            Variant::NbvaeC => {
                let x = batch
                    .x
                    .as_ref()
                    .ok_or_else(|| ModelError::Contract("nbvae_c batch needs features".into()))?;
                if x.nrows() != n {
                    return Err(ModelError::Contract(
                        "feature and label batches differ in rows".into(),
                    ));
                }
                Some(self.feature_graph(g, x)?)
            }
            _ => None,
        };
        let z = match (source, prior) {
            (LatentSource::Encoder, _) => dist::reparam_rows(g, mu_q, lv_q, noise.clone())?,
            (LatentSource::FeaturePrior, Some((mu_p, lv_p))) => {
                dist::reparam_rows(g, mu_p, lv_p, noise.clone())?
            }
            (LatentSource::FeaturePrior, None) => {
                return Err(ModelError::Contract(format!(
                    "feature-prior sampling is only defined for nbvae_c, not {}",
                    self.variant()
                )))
            }
        };
        let y = g.constant(batch.y.clone());
        let loglik = match (self.variant(), self.decoder_graph(g, z)?) {
            (Variant::Nbvae, DecoderNodes::NegBinomial { r, p }) => {
                dist::nb_loglik_rows(g, y, r, p)?
            }
            (Variant::NbvaeDm, DecoderNodes::NegBinomial { r, .. }) => {
                dist::dirmulti_loglik_rows(g, y, r)?
            }
            (Variant::NbvaeB | Variant::NbvaeC, DecoderNodes::NegBinomial { r, p }) => {
                dist::bernoulli_link_loglik_rows(g, y, r, p)?
            }
            (Variant::Multivae, DecoderNodes::Logits(l)) => dist::multinomial_loglik_rows(g, y, l)?,
            _ => unreachable!("decoder heads match the variant"),
        };
        let kl = match prior {
            Some((mu_p, lv_p)) => dist::kl_general_rows(g, mu_q, lv_q, mu_p, lv_p)?,
            None => dist::kl_standard_rows(g, mu_q, lv_q)?,
        };
        let weighted = g.scale(kl, beta);
        let per_row = g.sub(loglik, weighted)?;
        Ok(ElboNodes {
            elbo: g.mean(per_row, Axis::All),
            loglik: g.mean(loglik, Axis::All),
            kl: g.mean(kl, Axis::All),
        })
    }

    /// ELBO value without gradients.
    pub fn elbo(&self, batch: &Batch, beta: f64, noise: &Tensor) -> Result<ElboValue, ModelError> {
        self.elbo_with_source(batch, beta, noise, LatentSource::Encoder)
    }

    pub fn elbo_with_source(
        &self,
        batch: &Batch,
        beta: f64,
        noise: &Tensor,
        source: LatentSource,
    ) -> Result<ElboValue, ModelError> {
        let mut g = Graph::inference();
        let nodes = self.elbo_graph(&mut g, batch, beta, noise, source)?;
        Ok(ElboValue {
            elbo: g.scalar(nodes.elbo),
            loglik: g.scalar(nodes.loglik),
            kl: g.scalar(nodes.kl),
        })
    }

    /// ELBO value and gradients of the *negative* ELBO (the minimized loss).
    pub fn loss_gradients(
        &self,
        batch: &Batch,
        beta: f64,
        noise: &Tensor,
        source: LatentSource,
    ) -> Result<(ElboValue, Gradients), ModelError> {
        let mut g = Graph::new();
        let nodes = self.elbo_graph(&mut g, batch, beta, noise, source)?;
        let loss = g.scale(nodes.elbo, -1.0);
        g.backward(loss)?;
        let value = ElboValue {
            elbo: g.scalar(nodes.elbo),
            loglik: g.scalar(nodes.loglik),
            kl: g.scalar(nodes.kl),
        };
        Ok((value, g.param_gradients(&self.params.store)))
    }

    /// Posterior means and variances for each row of `y` (`n×V`).
    pub fn encode_batch(&self, y: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut g = Graph::inference();
        let (mu, lv) = self.encoder_graph(&mut g, y)?;
        Ok((g.value(mu).clone(), g.value(lv).mapv(f64::exp)))
    }

    pub fn encode(&self, y: &[f64]) -> Result<LatentGaussian, ModelError> {
        let y = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row vector");
        let (mu, var) = self.encode_batch(&y)?;
        Ok(LatentGaussian::new(
            mu.row(0).to_vec(),
            var.row(0).to_vec(),
        )?)
    }

    pub fn feature_encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut g = Graph::inference();
        let (mu, lv) = self.feature_graph(&mut g, x)?;
        Ok((g.value(mu).clone(), g.value(lv).mapv(f64::exp)))
    }

    pub fn feature_encode(&self, x: &[f64]) -> Result<LatentGaussian, ModelError> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        let (mu, var) = self.feature_encode_batch(&x)?;
        Ok(LatentGaussian::new(
            mu.row(0).to_vec(),
            var.row(0).to_vec(),
        )?)
    }

    /// Decodes each row of `z` (`n×K`).
    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<Decoded>, ModelError> {
        let mut g = Graph::inference();
        let zn = g.constant(z.clone());
        let out = match self.decoder_graph(&mut g, zn)? {
            DecoderNodes::NegBinomial { r, p } => {
                let (r, p) = (g.value(r), g.value(p));
                r.axis_iter(NdAxis(0))
                    .zip(p.axis_iter(NdAxis(0)))
                    .map(|(r, p)| Decoded::NegBinomial {
                        r: r.to_vec(),
                        p: p.to_vec(),
                    })
                    .collect()
            }
            DecoderNodes::Logits(l) => g
                .value(l)
                .axis_iter(NdAxis(0))
                .map(|l| Decoded::Logits(l.to_vec()))
                .collect(),
        };
        Ok(out)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Decoded, ModelError> {
        let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row vector");
        Ok(self.decode_batch(&z)?.remove(0))
    }
}

#[cfg(test)]
mod tests;
