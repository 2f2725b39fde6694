//! Finite-difference verification of every differentiable operation and of
//! the full per-variant ELBO graph.
//!
//! Reverse-mode gradients are compared entry by entry against central
//! differences with step `1e-5`. The error of an entry is
//! `|a - b| / max(|a|, |b|, 1e-4)`.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{Axis, DiffError, Graph, NodeId, Tensor, UnaryOp};
use crate::models::{Batch, LatentSource, Model, ModelConfig, ModelError, Variant};

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;
/// Tolerance for elementwise operations.
pub const ELEMENTWISE_TOL: f64 = 1e-6;
/// Tolerance for everything else, including whole ELBO graphs.
pub const GRAPH_TOL: f64 = 1e-4;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn finite_difference(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Array2::zeros(x.dim());
    let mut xp = x.clone();
    let cols = x.ncols();
    for idx in 0..x.len() {
        let at = [idx / cols, idx % cols];
        let orig = xp[at];
        xp[at] = orig + STEP;
        let up = f(&xp);
        xp[at] = orig - STEP;
        let down = f(&xp);
        xp[at] = orig;
        out[at] = (up - down) / (2.0 * STEP);
    }
    out
}

/// Worst error between the reverse-mode gradient of the ELBO and finite
/// differences, over every parameter entry of `model`.
pub fn check_elbo_gradients(
    model: &Model,
    batch: &Batch,
    beta: f64,
    noise: &Tensor,
    source: LatentSource,
) -> Result<f64, ModelError> {
    let (_, grads) = model.loss_gradients(batch, beta, noise, source)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (id, param) in model.params.store.iter() {
        let value = param.value.clone();
        let mut failure = None;
        let fd = finite_difference(&value, |v| {
            probe.params.store.get_mut(id).value.assign(v);
            match probe.elbo_with_source(batch, beta, noise, source) {
                Ok(e) => e.elbo,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        probe.params.store.get_mut(id).value.assign(&value);
        if let Some(e) = failure {
            return Err(e);
        }
        // Gradients are of the loss, −ELBO.
        worst = worst.max(max_rel_error(&(-grads.get(id)), &fd));
    }
    Ok(worst)
}

/// Outcome for one checked operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn failures(&self) -> Vec<&OpCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&OpCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn record(&mut self, name: &str, tolerance: f64, err: f64) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                // NaN must not be swallowed by max.
                c.worst = if err.is_nan() || c.worst.is_nan() {
                    f64::NAN
                } else {
                    c.worst.max(err)
                };
                c.cases += 1;
            }
            None => self.checks.push(OpCheck {
                name: name.to_string(),
                worst: err,
                tolerance,
                cases: 1,
            }),
        }
    }
}

impl OpCheck {
    fn status(&self) -> &'static str {
        if self.passed() {
            "ok"
        } else {
            "FAIL"
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>12} {:>10} {:>6}  status",
            "operation", "worst", "tolerance", "cases"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<24} {:>12.3e} {:>10.0e} {:>6}  {}",
                c.name,
                c.worst,
                c.tolerance,
                c.cases,
                c.status()
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seeds: u64,
    /// Name of an elementwise op whose backward rule is replaced by a wrong
    /// one; the suite must then report that op as failing.
    pub inject_fault: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("unknown op {0:?} for fault injection (expected an elementwise op name)")]
    UnknownOp(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>;

/// Checks the gradient of `sum(build(inputs) ⊙ w)` with respect to every input,
/// where `w` is a fixed random weight matrix matching the output shape.
fn check_graph(rng: &mut ChaCha8Rng, inputs: &[Tensor], build: &Build) -> Result<f64, DiffError> {
    let weighted_loss = |g: &mut Graph,
                         ids: &[NodeId],
                         w: Option<&Tensor>|
     -> Result<(NodeId, Tensor), DiffError> {
        let out = build(g, ids)?;
        let w = match w {
            Some(w) => w.clone(),
            None => Array2::zeros(g.shape(out)),
        };
        let wn = g.constant(w.clone());
        let prod = g.mul(out, wn)?;
        Ok((g.sum(prod, Axis::All), w))
    };
    // Output shape first, to draw the weights.
    let shape = {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        g.shape(out)
    };
    let w = Array2::from_shape_simple_fn(shape, || rng.random_range(0.5..1.5));
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let (loss, _) = weighted_loss(&mut g, &ids, Some(&w))?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(ids[k])
            .cloned()
            .unwrap_or_else(|| Array2::zeros(input.dim()));
        let fd = finite_difference(input, |xk| {
            let mut g = Graph::inference();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.constant(if i == k { xk.clone() } else { t.clone() }))
                .collect();
            weighted_loss(&mut g, &ids, Some(&w))
                .map(|(l, _)| g.scalar(l))
                .unwrap_or(f64::NAN)
        });
        let err = max_rel_error(&analytic, &fd);
        worst = if err.is_nan() {
            f64::NAN
        } else {
            worst.max(err)
        };
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Tensor {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

fn unary_domain(op: UnaryOp) -> (f64, f64) {
    match op {
        UnaryOp::Log | UnaryOp::Sqrt | UnaryOp::Lgamma => (0.5, 3.0),
        UnaryOp::Ln1mExp => (-3.0, -0.2),
        _ => (-2.0, 2.0),
    }
}

/// Small random model and batch for whole-ELBO checks: V = 4, K = 2, one
/// hidden unit in encoder and decoder.
pub fn tiny_elbo_case(variant: Variant, seed: u64) -> (Model, Batch, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, k, n, d) = (4, 2, 3, 3);
    let mut config = ModelConfig::new(variant, v, k);
    config.encoder_layers = vec![1];
    config.decoder_layers = vec![1];
    config.seed = seed;
    if variant == Variant::NbvaeC {
        config.feature_dim = Some(d);
    }
    let mut model = Model::new(config).expect("valid tiny config");
    for (_, p) in model.params.store.iter_mut() {
        p.value
            .mapv_inplace(|w| w + 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    let binary = matches!(variant, Variant::NbvaeB | Variant::NbvaeC);
    let y = Array2::from_shape_simple_fn((n, v), || {
        if binary {
            f64::from(rng.random_bool(0.5))
        } else {
            f64::from(rng.random_range(0..6u8))
        }
    });
    let mut batch = Batch { y, x: None };
    if variant == Variant::NbvaeC {
        batch.x = Some(uniform(&mut rng, (n, d), -1.0, 1.0));
    }
    let noise = Array2::from_shape_simple_fn((n, k), || rng.sample(StandardNormal));
    (model, batch, noise)
}

/// Runs the full suite over `options.seeds` seeds.
pub fn run_suite(options: &GradcheckOptions) -> Result<GradcheckReport, GradcheckError> {
    let fault = match &options.inject_fault {
        Some(name) => Some(
            UnaryOp::ALL
                .into_iter()
                .find(|op| op.name() == name)
                .ok_or_else(|| GradcheckError::UnknownOp(name.clone()))?,
        ),
        None => None,
    };
    let mut report = GradcheckReport::default();
    for seed in 0..options.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m34 = |rng: &mut ChaCha8Rng| uniform(rng, (3, 4), -1.0, 1.0);

        let (x, w, b) = (
            uniform(&mut rng, (3, 2), -1.0, 1.0),
            uniform(&mut rng, (2, 4), -1.0, 1.0),
            uniform(&mut rng, (1, 4), -1.0, 1.0),
        );
        let err = check_graph(&mut rng, &[x, w, b], &|g, i| g.affine(i[0], i[1], i[2]))?;
        report.record("affine", GRAPH_TOL, err);

        let (a, bm) = (
            uniform(&mut rng, (3, 2), -1.0, 1.0),
            uniform(&mut rng, (2, 4), -1.0, 1.0),
        );
        let err = check_graph(&mut rng, &[a, bm], &|g, i| g.matmul(i[0], i[1]))?;
        report.record("matmul", GRAPH_TOL, err);

        let pair = [m34(&mut rng), m34(&mut rng)];
        report.record(
            "add",
            ELEMENTWISE_TOL,
            check_graph(&mut rng, &pair, &|g, i| g.add(i[0], i[1]))?,
        );
        report.record(
            "sub",
            ELEMENTWISE_TOL,
            check_graph(&mut rng, &pair, &|g, i| g.sub(i[0], i[1]))?,
        );
        report.record(
            "mul",
            ELEMENTWISE_TOL,
            check_graph(&mut rng, &pair, &|g, i| g.mul(i[0], i[1]))?,
        );

        for op in UnaryOp::ALL {
            let (lo, hi) = unary_domain(op);
            let x = uniform(&mut rng, (3, 4), lo, hi);
            let err = if fault == Some(op) {
                // Wrong backward rule: derivative off by 10%.
                check_graph(&mut rng, &[x], &move |g, i| {
                    Ok(g.custom_unary(
                        i[0],
                        move |v| op.apply(v),
                        move |v| 1.1 * op.derivative(v, op.apply(v)),
                    ))
                })?
            } else {
                check_graph(&mut rng, &[x], &move |g, i| g.unary(op, i[0]))?
            };
            report.record(op.name(), ELEMENTWISE_TOL, err);
        }

        let x = [m34(&mut rng)];
        report.record(
            "scale",
            ELEMENTWISE_TOL,
            check_graph(&mut rng, &x, &|g, i| Ok(g.scale(i[0], -1.7)))?,
        );
        report.record(
            "shift",
            ELEMENTWISE_TOL,
            check_graph(&mut rng, &x, &|g, i| Ok(g.shift(i[0], 0.3)))?,
        );
        report.record(
            "clamp",
            ELEMENTWISE_TOL,
            check_graph(&mut rng, &x, &|g, i| Ok(g.clamp(i[0], -5.0, 5.0)))?,
        );
        for (name, kind) in [
            ("sum", crate::diffmath::Reduce::Sum),
            ("mean", crate::diffmath::Reduce::Mean),
        ] {
            for axis in [Axis::Rows, Axis::Cols, Axis::All] {
                let err = check_graph(&mut rng, &x, &move |g, i| Ok(g.reduce(kind, axis, i[0])))?;
                report.record(name, GRAPH_TOL, err);
            }
        }
        let col = [uniform(&mut rng, (3, 1), -1.0, 1.0)];
        report.record(
            "broadcast_cols",
            GRAPH_TOL,
            check_graph(&mut rng, &col, &|g, i| g.broadcast_cols(i[0], 4))?,
        );
        let x = [uniform(&mut rng, (3, 4), -3.0, 3.0)];
        report.record(
            "log_softmax",
            GRAPH_TOL,
            check_graph(&mut rng, &x, &|g, i| Ok(g.log_softmax(i[0])))?,
        );

        for variant in Variant::ALL {
            let (model, batch, noise) = tiny_elbo_case(variant, seed);
            let beta = rng.random_range(0.1..1.0);
            let err = check_elbo_gradients(&model, &batch, beta, &noise, LatentSource::Encoder)?;
            report.record(&format!("elbo:{variant}"), GRAPH_TOL, err);
            if variant == Variant::NbvaeC {
                let err =
                    check_elbo_gradients(&model, &batch, beta, &noise, LatentSource::FeaturePrior)?;
                report.record("elbo:nbvae_c/feature-prior", GRAPH_TOL, err);
            }
        }
    }
    Ok(report)
}
