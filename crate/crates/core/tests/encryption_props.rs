use fededs::data::{generate_synthetic, Dataset};
use fededs::encryption::{
    fed_encrypted_data_generate, generate_encrypted_dataset, pretrain_local, privacy_report,
    train_encryptor, EncryptionConfig,
};
use fededs::nn::{
    argmax, forward_plain, forward_stochastic, loss, Activation, EncryptorParams, HardBatch,
    LayerSizes, LossSpec, OptimizerState, SegmentedParams, StochasticLayer,
};
use fededs::{Error, Tensor};

fn sizes(input_dim: usize, classes: usize) -> LayerSizes {
    LayerSizes {
        input_dim,
        hidden_dims: vec![12],
        feature_dim: 8,
        num_classes: classes,
    }
}

fn accuracy(d: &Dataset, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let hits = d
        .inputs
        .iter()
        .zip(&d.labels)
        .filter(|(x, &y)| argmax(f(x).data()) == y)
        .count();
    hits as f64 / d.len() as f64
}

fn config(e_c: usize, e_g: usize) -> EncryptionConfig {
    EncryptionConfig {
        pretrain_epochs: e_c,
        encryptor_epochs: e_g,
        pretrain_optimizer: OptimizerState::momentum_sgd(0.05, 0.9, 1e-4).unwrap(),
        encryptor_optimizer: OptimizerState::adaptive(0.01, 0.0).unwrap(),
        encryptor_hidden: 16,
        encryptor_residual_gain: 0.01,
        encryptor_seed: 77,
    }
}

#[test]
fn pretraining_separates_two_blobs_and_keeps_the_layer_frozen() {
    let d = generate_synthetic(2, 60, 4, 0.2, 3).unwrap();
    let layer = StochasticLayer::generate(8, 5, 0.5);
    let mut p = SegmentedParams::init(sizes(4, 2), Activation::Tanh, 1)
        .unwrap()
        .with_stochastic(layer.clone())
        .unwrap();
    let mut opt = OptimizerState::momentum_sgd(0.05, 0.9, 1e-4).unwrap();
    pretrain_local(&mut p, &d, 60, &mut opt).unwrap();
    assert!(accuracy(&d, |x| forward_plain(&p, x).unwrap()) >= 0.95);
    assert_eq!(p.stochastic, layer);
}

#[test]
fn saturated_model_barely_moves() {
    let inputs = vec![Tensor::from_vec(vec![0.5, -0.5, 0.1, 0.0]); 8];
    let d = Dataset::new(inputs, vec![1; 8], 2).unwrap();
    let mut p = SegmentedParams::init(sizes(4, 2), Activation::Tanh, 2).unwrap();
    p.classifier.weight.fill(0.0);
    p.classifier.bias = Tensor::from_vec(vec![-40.0, 40.0]);
    let before = p.clone();
    let mut opt = OptimizerState::momentum_sgd(0.01, 0.9, 0.0).unwrap();
    pretrain_local(&mut p, &d, 5, &mut opt).unwrap();
    let moved: f64 = p
        .trainable()
        .iter()
        .zip(before.trainable())
        .map(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    assert!(moved < 1e-6, "{moved}");
}

#[test]
fn near_identity_encryptor_without_perturbation_matches_plain_loss() {
    let d = generate_synthetic(3, 10, 4, 0.3, 4).unwrap();
    let p = SegmentedParams::init(sizes(4, 3), Activation::Tanh, 3).unwrap();
    let enc = EncryptorParams::near_identity(4, 16, 1e-6, 9);
    let idx: Vec<usize> = (0..d.len()).collect();
    let batch = HardBatch {
        inputs: &d.inputs,
        labels: &d.labels,
        indices: &idx,
    };
    let plain = loss(&LossSpec::PlainCe { params: &p, batch }).unwrap();
    let encrypted = loss(&LossSpec::EncryptorCe {
        encryptor: &enc,
        frozen: &p,
        stochastic: &p.stochastic,
        batch,
    })
    .unwrap();
    assert!((plain - encrypted).abs() < 1e-5, "{plain} vs {encrypted}");
}

#[test]
fn encryptor_training_helps_the_stochastic_path_and_freezes_the_model() {
    let d = generate_synthetic(3, 40, 6, 0.3, 6).unwrap();
    let mut p = SegmentedParams::init(sizes(6, 3), Activation::Tanh, 4)
        .unwrap()
        .with_stochastic(StochasticLayer::generate(8, 12, 0.5))
        .unwrap();
    let mut opt = OptimizerState::momentum_sgd(0.05, 0.9, 1e-4).unwrap();
    pretrain_local(&mut p, &d, 40, &mut opt).unwrap();
    let frozen = p.clone();
    let mut enc = EncryptorParams::near_identity(6, 16, 0.01, 3);
    let mut eopt = OptimizerState::adaptive(0.01, 0.0).unwrap();
    let losses = train_encryptor(&mut enc, &p, &d, 30, &mut eopt).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    assert_eq!(p, frozen);

    let raw = accuracy(&d, |x| forward_stochastic(&p, &p.stochastic, x).unwrap());
    let encrypted = accuracy(&d, |x| {
        forward_stochastic(&p, &p.stochastic, &enc.apply(x).unwrap()).unwrap()
    });
    assert!(encrypted >= raw, "{encrypted} < {raw}");

    let data = generate_encrypted_dataset(&enc, &p, &d, 2).unwrap();
    assert_eq!(data.len(), d.len());
    assert_eq!(data.stochastic_seed, 12);
    for s in &data.soft_labels {
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(data, generate_encrypted_dataset(&enc, &p, &d, 2).unwrap());
    assert_eq!(p, frozen);
}

#[test]
fn full_generation_restores_global_and_equals_manual_chain() {
    let d = generate_synthetic(3, 20, 5, 0.3, 8).unwrap();
    let global = SegmentedParams::init(sizes(5, 3), Activation::Tanh, 5).unwrap();
    let layer = StochasticLayer::generate(8, 21, 0.5);
    let cfg = config(10, 5);
    let out = fed_encrypted_data_generate(1, &global, &layer, &d, &cfg).unwrap();
    assert_eq!(out.local.trainable(), global.trainable());
    assert_eq!(out.local.stochastic, layer);

    let mut manual = global.clone().with_stochastic(layer.clone()).unwrap();
    let mut opt = cfg.pretrain_optimizer.reset();
    pretrain_local(&mut manual, &d, 10, &mut opt).unwrap();
    let mut enc = EncryptorParams::near_identity(5, 16, 0.01, 77);
    let mut eopt = cfg.encryptor_optimizer.reset();
    train_encryptor(&mut enc, &manual, &d, 5, &mut eopt).unwrap();
    assert_eq!(enc, out.encryptor);
    assert_eq!(
        generate_encrypted_dataset(&enc, &manual, &d, 1).unwrap(),
        out.encrypted
    );

    let report = privacy_report(&out.encryptor, &out.pretrained, &d).unwrap();
    assert!(report.mean_input_norm > 0.0);
    assert!((0.0..=1.0).contains(&report.encrypted_accuracy));

    assert!(matches!(
        fed_encrypted_data_generate(1, &global, &layer, &d, &config(0, 5)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        fed_encrypted_data_generate(1, &global, &layer, &d, &config(5, 0)),
        Err(Error::Config(_))
    ));
}
