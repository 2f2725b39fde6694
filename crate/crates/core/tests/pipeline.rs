use nbvae::evaluation::{fold_in, label_precision, perplexity};
use nbvae::models::{load_checkpoint, save_checkpoint, Modality, Model, ModelConfig, Variant};
use nbvae::sparse_data::{
    load_binary, load_bow, load_multilabel, save_bow, save_multilabel, BinaryMatrix,
};
use nbvae::synthetic::{
    implicit_feedback, nb_mixture_corpus, planted_multilabel, ImplicitSpec, MultilabelSpec,
    NbMixtureSpec,
};
use nbvae::training::{train, TrainConfig, TrainData, Validation};

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 50,
        max_epochs: 3,
        anneal_steps: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn count_corpus_survives_disk_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = nb_mixture_corpus(
        NbMixtureSpec {
            n_docs: 200,
            ..NbMixtureSpec::default()
        },
        3,
    );
    let path = dir.path().join("docs.txt");
    save_bow(&corpus, &path).unwrap();
    let loaded = load_bow(&path).unwrap();
    assert_eq!(loaded, corpus);

    let mut config = ModelConfig::new(Variant::Nbvae, loaded.n_cols(), 4);
    config.encoder_layers = vec![16];
    config.decoder_layers = vec![16];
    let model = Model::new(config).unwrap();
    let data = TrainData {
        modality: Modality::Counts,
        y: &loaded,
        x: None,
    };
    let outcome = train(
        model,
        &quick_config(),
        data,
        Some(Validation::Elbo(&loaded)),
    )
    .unwrap();
    assert_eq!(outcome.history.len() as u64, outcome.state.global_step);

    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&outcome.state.model, &ckpt).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();
    let before = perplexity(&outcome.state.model, &loaded, 0.2, 1).unwrap();
    let after = perplexity(&restored, &loaded, 0.2, 1).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
    assert!(before.is_finite() && before > 1.0);
}

#[test]
fn binary_matrix_round_trips_and_folds_in() {
    let dir = tempfile::tempdir().unwrap();
    let data = implicit_feedback(
        ImplicitSpec {
            n_users: 150,
            n_items: 60,
            ..ImplicitSpec::default()
        },
        5,
    );
    let path = dir.path().join("clicks.txt");
    save_bow(data.as_counts(), &path).unwrap();
    let loaded: BinaryMatrix = load_binary(&path).unwrap();
    assert_eq!(loaded, data);

    let mut config = ModelConfig::new(Variant::NbvaeB, loaded.n_cols(), 4);
    config.encoder_layers = vec![16];
    config.decoder_layers = vec![16];
    let model = Model::new(config).unwrap();
    let train_data = TrainData {
        modality: Modality::Binary,
        y: loaded.as_counts(),
        x: None,
    };
    let outcome = train(
        model,
        &quick_config(),
        train_data,
        Some(Validation::Ndcg {
            data: &loaded,
            fraction: 0.2,
            seed: 9,
            r: 10,
        }),
    )
    .unwrap();
    assert!(outcome
        .history
        .iter()
        .any(|h| h.validation_metric.is_some()));
    let m = fold_in(&outcome.state.model, &loaded, 0.2, 9, &[5, 10]).unwrap();
    assert!(m.rows > 0);
    assert!(m
        .ndcg
        .iter()
        .chain(&m.recall)
        .all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn multilabel_set_round_trips_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MultilabelSpec {
        n_samples: 300,
        ..MultilabelSpec::default()
    };
    let (features, labels) = planted_multilabel(spec, 2);
    let path = dir.path().join("ml.txt");
    save_multilabel(&features, &labels, &path).unwrap();
    let (f2, l2) = load_multilabel(&path).unwrap();
    assert_eq!(l2, labels);
    assert_eq!(f2.n_dims(), features.n_dims());
    for j in 0..features.n_rows() {
        assert_eq!(f2.row(j).0, features.row(j).0);
    }

    let mut config = ModelConfig::new(Variant::NbvaeC, labels.n_cols(), 4);
    config.feature_dim = Some(features.n_dims());
    config.encoder_layers = vec![16];
    config.decoder_layers = vec![16];
    let model = Model::new(config).unwrap();
    let train_data = TrainData {
        modality: Modality::Multilabel,
        y: labels.as_counts(),
        x: Some(&features),
    };
    let outcome = train(
        model,
        &quick_config(),
        train_data,
        Some(Validation::PrecisionAt1 {
            features: &features,
            labels: &labels,
        }),
    )
    .unwrap();
    let p = label_precision(&outcome.state.model, &features, &labels, &[1, 3, 5]).unwrap();
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
}
