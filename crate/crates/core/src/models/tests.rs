use super::*;
use crate::distributions::{kl_general, nb_logpmf};
use crate::gradcheck::{check_elbo_gradients, finite_difference, max_rel_error, tiny_elbo_case};
use ndarray::array;
use rand::Rng;
use rand_distr::StandardNormal;

fn zero_head_model(variant: Variant, v: usize, k: usize) -> Model {
    let mut config = ModelConfig::new(variant, v, k);
    config.encoder_layers = vec![8];
    config.decoder_layers = vec![8];
    if variant == Variant::NbvaeC {
        config.feature_dim = Some(3);
    }
    let mut model = Model::new(config).unwrap();
    model.params.zero_output_heads();
    model
}

#[test]
fn zero_heads_give_standard_posterior_and_unit_rates() {
    let model = zero_head_model(Variant::Nbvae, 5, 3);
    let q = model.encode(&[3.0, 0.0, 1.0, 0.0, 7.0]).unwrap();
    assert_eq!(q.mean(), &[0.0; 3]);
    assert_eq!(q.variance(), &[1.0; 3]);
    let d = model.decode(&[0.4, -1.0, 2.0]).unwrap();
    assert_eq!(d.r().unwrap(), &[1.0; 5]);
    assert_eq!(d.p().unwrap(), &[0.5; 5]);
}

#[test]
fn nbvae_dm_has_a_single_dispersion() {
    let model = zero_head_model(Variant::NbvaeDm, 6, 2);
    let d = model.decode(&[0.1, 0.2]).unwrap();
    assert_eq!(d.r().unwrap().len(), 6);
    assert_eq!(d.p().unwrap().len(), 1);
}

#[test]
fn multivae_logits_softmax_to_one() {
    let model = Model::new(ModelConfig::new(Variant::Multivae, 7, 2)).unwrap();
    let Decoded::Logits(l) = model.decode(&[0.3, -0.8]).unwrap() else {
        panic!("expected logits")
    };
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
    let total: f64 = l.iter().map(|x| (x - m).exp() / z).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn empty_row_gives_zero_encoder_input() {
    // With zero biases a zero input must produce zero pre-activations, so the
    // posterior mean is exactly zero whatever the weights.
    let model = Model::new(ModelConfig::new(Variant::Nbvae, 4, 2)).unwrap();
    let q = model.encode(&[0.0; 4]).unwrap();
    assert_eq!(q.mean(), &[0.0, 0.0]);
    assert_eq!(q.variance(), &[1.0, 1.0]);
}

#[test]
fn zero_row_elbo_with_zero_heads() {
    let model = zero_head_model(Variant::Nbvae, 2, 2);
    let batch = Batch {
        y: array![[0.0, 0.0]],
        x: None,
    };
    let e = model.elbo(&batch, 1.0, &array![[0.7, -1.2]]).unwrap();
    assert!((e.elbo - (-1.386_294_361_119_890_6)).abs() < 1e-12, "{e:?}");
    assert_eq!(e.kl, 0.0);
}

#[test]
fn beta_zero_is_plain_loglik() {
    for variant in Variant::ALL {
        let (model, batch, noise) = tiny_elbo_case(variant, 11);
        let e = model.elbo(&batch, 0.0, &noise).unwrap();
        assert_eq!(e.elbo, e.loglik, "{variant}");
        let e1 = model.elbo(&batch, 1.0, &noise).unwrap();
        assert!((e1.elbo - (e1.loglik - e1.kl)).abs() < 1e-12);
    }
}

#[test]
fn determinism_under_seed() {
    let mut config = ModelConfig::new(Variant::NbvaeC, 10, 3);
    config.feature_dim = Some(4);
    config.seed = 5;
    assert_eq!(
        Model::new(config.clone()).unwrap(),
        Model::new(config.clone()).unwrap()
    );
    config.seed = 6;
    let other = Model::new(config.clone()).unwrap();
    config.seed = 5;
    assert_ne!(Model::new(config).unwrap(), other);
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        for seed in 0..5 {
            let (model, batch, noise) = tiny_elbo_case(variant, seed);
            let err =
                check_elbo_gradients(&model, &batch, 0.6, &noise, LatentSource::Encoder).unwrap();
            assert!(err < 1e-4, "{variant} seed {seed}: {err}");
        }
    }
}

#[test]
fn feature_prior_kl_gradient_reaches_psi() {
    let (model, batch, _) = tiny_elbo_case(Variant::NbvaeC, 3);
    let q = LatentGaussian::new(vec![0.3, -0.2], vec![0.5, 1.7]).unwrap();
    let x = batch.x.as_ref().unwrap().row(0).to_vec();
    let kl_of = |m: &Model| kl_general(&q, &m.feature_encode(&x).unwrap()).unwrap();

    // Graph gradient of the same quantity.
    let mut g = Graph::new();
    let xt = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
    let (mu_p, lv_p) = model.feature_graph(&mut g, &xt).unwrap();
    let mu_q = g.constant(Array2::from_shape_vec((1, 2), q.mean().to_vec()).unwrap());
    let lv_q = g.constant(
        Array2::from_shape_vec((1, 2), q.variance().iter().map(|v| v.ln()).collect()).unwrap(),
    );
    let kl = crate::distributions::kl_general_rows(&mut g, mu_q, lv_q, mu_p, lv_p).unwrap();
    let loss = g.sum(kl, Axis::All);
    assert!((g.scalar(loss) - kl_of(&model)).abs() < 1e-12);
    g.backward(loss).unwrap();
    let grads = g.param_gradients(&model.params.store);

    let mut probe = model.clone();
    let mut touched = 0;
    for (id, p) in model.params.store.iter() {
        if !p.name.starts_with("feature") {
            continue;
        }
        touched += 1;
        let fd = finite_difference(&p.value, |v| {
            probe.params.store.get_mut(id).value.assign(v);
            kl_of(&probe)
        });
        probe.params.store.get_mut(id).value.assign(&p.value);
        assert!(max_rel_error(grads.get(id), &fd) < 1e-4, "{}", p.name);
    }
    assert!(touched > 0);
}

#[test]
fn feature_encoder_requires_nbvae_c() {
    let model = Model::new(ModelConfig::new(Variant::NbvaeB, 4, 2)).unwrap();
    assert!(matches!(
        model.feature_encode(&[1.0]),
        Err(ModelError::Contract(_))
    ));
    let batch = Batch {
        y: array![[1.0, 0.0, 1.0, 0.0]],
        x: None,
    };
    let err = model.elbo_with_source(&batch, 1.0, &array![[0.0, 0.0]], LatentSource::FeaturePrior);
    assert!(matches!(err, Err(ModelError::Contract(_))));
}

#[test]
fn zero_feature_heads_give_standard_prior() {
    let model = zero_head_model(Variant::NbvaeC, 4, 2);
    let p = model.feature_encode(&[0.2, -1.0, 3.0]).unwrap();
    assert_eq!(p.mean(), &[0.0, 0.0]);
    assert_eq!(p.variance(), &[1.0, 1.0]);
}

/// Copies every parameter of `from` whose name also exists in `to`.
fn copy_shared(from: &Model, to: &mut Model) {
    for (_, p) in from.params.store.iter() {
        if let Some(id) = to.params.store.find(&p.name) {
            to.params.store.get_mut(id).value.assign(&p.value);
        }
    }
}

#[test]
fn nbvae_c_with_standard_prior_matches_nbvae_b() {
    for seed in 0..4 {
        let (mut c, batch, noise) = tiny_elbo_case(Variant::NbvaeC, seed);
        c.params.zero_feature_heads();
        let mut config = c.config.clone();
        config.variant = Variant::NbvaeB;
        config.feature_dim = None;
        let mut b = Model::new(config).unwrap();
        copy_shared(&c, &mut b);
        let eb = b
            .elbo(
                &Batch {
                    y: batch.y.clone(),
                    x: None,
                },
                0.8,
                &noise,
            )
            .unwrap();
        let ec = c.elbo(&batch, 0.8, &noise).unwrap();
        assert!((eb.elbo - ec.elbo).abs() < 1e-12, "{eb:?} vs {ec:?}");
    }
}

#[test]
fn ablated_feature_encoder_is_standard_normal() {
    let (c, batch, noise) = tiny_elbo_case(Variant::NbvaeC, 9);
    let mut config = c.config.clone();
    config.ablate_feature_encoder = true;
    let mut ablated = Model::new(config).unwrap();
    copy_shared(&c, &mut ablated);
    let p = ablated.feature_encode(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(p.mean(), &[0.0, 0.0]);
    assert_eq!(p.variance(), &[1.0, 1.0]);
    assert!(ablated.elbo(&batch, 1.0, &noise).unwrap().elbo.is_finite());
    assert!(!ablated.params.frozen(&ablated.config).is_empty());
    assert!(c.params.frozen(&c.config).is_empty());
}

#[test]
fn nbvae_dm_ignores_the_p_head() {
    let (mut model, batch, noise) = tiny_elbo_case(Variant::NbvaeDm, 2);
    let before = model.elbo(&batch, 1.0, &noise).unwrap();
    let id = model.params.store.find("decoder.p.bias").unwrap();
    model.params.store.get_mut(id).value.fill(3.0);
    let after = model.elbo(&batch, 1.0, &noise).unwrap();
    assert_eq!(before, after);
}

#[test]
fn binary_variants_reject_counts() {
    for variant in [Variant::NbvaeB, Variant::NbvaeC] {
        let (model, mut batch, noise) = tiny_elbo_case(variant, 0);
        batch.y[[0, 0]] = 2.0;
        let err = model.elbo(&batch, 1.0, &noise);
        assert!(
            matches!(
                err,
                Err(ModelError::Dist(_)) | Err(ModelError::Diff(_)) | Err(ModelError::Contract(_))
            ),
            "{err:?}"
        );
        assert!(err.is_err());
    }
}

#[test]
fn elbo_lower_bounds_importance_sampled_evidence() {
    // V = 3, K = 1: the mean ELBO must not exceed log p(y), which is estimated
    // by importance sampling with the posterior as proposal.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut config = ModelConfig::new(Variant::Nbvae, 3, 1);
    config.encoder_layers = vec![4];
    config.decoder_layers = vec![4];
    config.seed = 1;
    let mut model = Model::new(config).unwrap();
    for (_, p) in model.params.store.iter_mut() {
        p.value
            .mapv_inplace(|w| w + 0.4 * rng.sample::<f64, _>(StandardNormal));
    }
    let y = [2.0, 0.0, 5.0];
    let batch = Batch {
        y: array![[2.0, 0.0, 5.0]],
        x: None,
    };
    let q = model.encode(&y).unwrap();
    let (m, s) = (q.mean()[0], q.variance()[0].sqrt());
    let samples = 200_000;
    let mut log_w = Vec::with_capacity(samples);
    let mut elbo_sum = 0.0;
    for _ in 0..samples {
        let e: f64 = rng.sample(StandardNormal);
        let z = m + s * e;
        let Decoded::NegBinomial { r, p } = model.decode(&[z]).unwrap() else {
            unreachable!()
        };
        let ll = nb_logpmf(&y, &r, &p).unwrap();
        let log_prior = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_q = -0.5 * e * e - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_w.push(ll + log_prior - log_q);
        if log_w.len() <= 20_000 {
            elbo_sum += model.elbo(&batch, 1.0, &array![[e]]).unwrap().elbo;
        }
    }
    let mx = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_evidence =
        mx + (log_w.iter().map(|w| (w - mx).exp()).sum::<f64>() / samples as f64).ln();
    let elbo = elbo_sum / 20_000.0;
    assert!(
        elbo <= log_evidence + 1e-3,
        "elbo {elbo} > log p(y) {log_evidence}"
    );
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::new(Variant::NbvaeC, 5, 2);
    assert!(matches!(Model::new(c.clone()), Err(ModelError::Config(_))));
    c.feature_dim = Some(3);
    assert!(Model::new(c.clone()).is_ok());
    c.variant = Variant::Nbvae;
    assert!(matches!(Model::new(c.clone()), Err(ModelError::Config(_))));
    c.feature_dim = None;
    c.encoder_layers = vec![0];
    assert!(matches!(Model::new(c), Err(ModelError::Config(_))));
    assert_eq!("nbvae_dm".parse::<Variant>().unwrap(), Variant::NbvaeDm);
    assert!("nbvae_x".parse::<Variant>().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, batch, noise) = tiny_elbo_case(Variant::NbvaeC, 4);
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, model);
    assert_eq!(
        back.elbo(&batch, 1.0, &noise).unwrap(),
        model.elbo(&batch, 1.0, &noise).unwrap()
    );
    assert_eq!(read_checkpoint_config(dir.path()).unwrap(), model.config);
    let d1 = checkpoint_digest(dir.path()).unwrap();
    save_checkpoint(&back, dir.path()).unwrap();
    assert_eq!(d1, checkpoint_digest(dir.path()).unwrap());
    assert_eq!(d1.len(), 64);
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _, _) = tiny_elbo_case(Variant::Nbvae, 4);
    save_checkpoint(&model, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"input_dim\": 4", "\"input_dim\": 5")).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(CheckpointError::Mismatch(_))
    ));

    std::fs::write(&path, text.clone()).unwrap();
    let payload = dir.path().join(PAYLOAD_FILE);
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&payload, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(CheckpointError::Mismatch(_))
    ));

    std::fs::write(&path, "{\"format\": 1}").unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(CheckpointError::Manifest { .. })
    ));
}
