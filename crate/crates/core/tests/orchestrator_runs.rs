use fededs::aggregation::{fedavg_aggregate, fednova_norm, weights_for};
use fededs::data::Dataset;
use fededs::format::encoded_len;
use fededs::nn::OptimizerState;
use fededs::orchestrator::{
    initial_global, metrics_to_csv, prepare, run, run_fededs, run_fednova_eds, run_prepared,
    Method, SimConfig,
};
use fededs::schedules::{epochs_at, lambdas_at};
use fededs::transfer::{local_train, shuffle_seed, steps_per_epoch, LocalTraining};
use fededs::Error;

fn small() -> SimConfig {
    SimConfig {
        num_clients: 3,
        rounds: 5,
        samples_per_class: 20,
        num_classes: 3,
        input_dim: 4,
        hidden_dims: vec![6],
        feature_dim: 5,
        e_c: 5,
        e_g: 3,
        encryptor_hidden: 6,
        batch_size: 8,
        alpha: 0.5,
        ..SimConfig::default()
    }
}

#[test]
fn serial_and_parallel_runs_write_identical_metrics() {
    for method in [Method::FedAvg, Method::FedProx, Method::FedNova] {
        let mut cfg = small();
        cfg.method = method;
        cfg.parallel = false;
        let serial = run(&cfg).unwrap();
        cfg.parallel = true;
        let parallel = run(&cfg).unwrap();
        assert_eq!(
            metrics_to_csv(&serial.metrics),
            metrics_to_csv(&parallel.metrics)
        );
        assert_eq!(serial.global, parallel.global);
        assert_eq!(serial.metrics, parallel.metrics);
    }
}

#[test]
fn local_only_pipeline_reproduces_hand_rolled_fedavg_bitwise() {
    let mut cfg = small();
    cfg.force_local_only = true;
    cfg.e_max = 2;
    cfg.e_min = 2;
    cfg.local_epochs = 2;
    let prepared = prepare(&cfg).unwrap();
    let eds = run_prepared(&cfg, &prepared).unwrap();
    let plain = run_prepared(
        &SimConfig {
            with_eds: false,
            ..cfg.clone()
        },
        &prepared,
    )
    .unwrap();

    let mut global = initial_global(&cfg, &prepared.sizes).unwrap();
    let counts: Vec<usize> = prepared.shards.iter().map(Dataset::len).collect();
    let weights = weights_for(cfg.aggregate_weighting, &counts).unwrap();
    for t in 1..=cfg.rounds {
        let updates: Vec<_> = (0..cfg.num_clients)
            .map(|c| {
                let mut p = global.clone();
                let mut opt =
                    OptimizerState::momentum_sgd(cfg.learning_rate, cfg.rho, cfg.weight_decay)
                        .unwrap();
                let setup = LocalTraining {
                    local: &prepared.shards[c],
                    epochs: 2,
                    batch_size: cfg.batch_size,
                    shuffle_seed: shuffle_seed(cfg.base_seed, c, t),
                    lambda_c: 1.0,
                    lambda_dis: 0.0,
                    mu: 0.0,
                };
                local_train(&mut p, &global, &setup, None, &mut opt).unwrap();
                p.trainable()
            })
            .collect();
        global
            .set_trainable(&fedavg_aggregate(&updates, &weights).unwrap())
            .unwrap();
        let acc = fededs::orchestrator::evaluate_top1(&global, &prepared.holdout).unwrap();
        assert_eq!(eds.metrics[t - 1].accuracy, acc);
        assert_eq!(plain.metrics[t - 1].accuracy, acc);
    }
    assert_eq!(eds.global.trainable(), global.trainable());
    assert_eq!(plain.global.trainable(), global.trainable());
}

#[test]
fn baselines_ignore_encryption_only_fields() {
    let mut cfg = small();
    cfg.with_eds = false;
    let a = run(&cfg).unwrap();
    cfg.e_c = 99;
    cfg.e_g = 1;
    cfg.e_max = 9;
    cfg.lambda_m = 0.1;
    cfg.stochastic_scale = 2.0;
    cfg.encryptor_hidden = 3;
    let b = run(&cfg).unwrap();
    assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
    assert_eq!(a.global, b.global);
}

#[test]
fn fednova_without_momentum_on_identical_shards_matches_uniform_fedavg() {
    let mut cfg = small();
    cfg.rho = 0.0;
    cfg.aggregate_weighting = fededs::aggregation::Weighting::Uniform;
    let mut prepared = prepare(&cfg).unwrap();
    let shard = prepared.shards[0].clone();
    prepared.shards = vec![shard; cfg.num_clients];
    let avg = run_fededs(&cfg, &prepared).unwrap();
    let nova_cfg = SimConfig {
        method: Method::FedNova,
        ..cfg
    };
    let nova = run_fednova_eds(&nova_cfg, &prepared).unwrap();
    for (a, n) in avg.metrics.iter().zip(&nova.metrics) {
        assert!((a.accuracy - n.accuracy).abs() < 1e-9);
    }
    for (a, n) in avg.global.trainable().iter().zip(nova.global.trainable()) {
        for (x, y) in a.data().iter().zip(n.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    assert!(run_fededs(&nova_cfg, &prepared).is_err());
    assert!(run_fednova_eds(
        &SimConfig {
            method: Method::FedAvg,
            ..nova_cfg
        },
        &prepared
    )
    .is_err());
}

#[test]
fn rounds_record_schedules_norms_and_monotone_costs() {
    let mut cfg = small();
    cfg.method = Method::FedNova;
    let prepared = prepare(&cfg).unwrap();
    let out = run_prepared(&cfg, &prepared).unwrap();
    assert_eq!(out.metrics.len(), cfg.rounds);
    let epochs = cfg.epoch_schedule().unwrap();
    let lambdas = cfg.lambda_schedule().unwrap();
    for (i, m) in out.metrics.iter().enumerate() {
        let t = i + 1;
        assert_eq!(m.round, t);
        assert_eq!(m.e_t, epochs_at(&epochs, t));
        assert_eq!((m.lambda_c, m.lambda_dis), lambdas_at(&lambdas, t));
        assert!((0.0..=1.0).contains(&m.accuracy));
        for (c, &a) in m.a_norms.iter().enumerate() {
            let steps = m.e_t * steps_per_epoch(prepared.shards[c].len(), cfg.batch_size);
            assert_eq!(a, fednova_norm(steps, cfg.rho).unwrap());
        }
        assert_eq!(
            m.sampled_peers.iter().all(Option::is_some),
            m.lambda_dis > 0.0
        );
        if i > 0 {
            let prev = &out.metrics[i - 1];
            assert!(m.cum_seconds >= prev.cum_seconds);
            assert!(m.cum_server_bytes >= prev.cum_server_bytes);
            assert!(m.cum_peer_bytes >= prev.cum_peer_bytes);
        }
    }
}

#[test]
fn peer_bytes_follow_broadcast_accounting() {
    let cfg = small();
    let out = run(&cfg).unwrap();
    let k = cfg.num_clients as u64;
    let want: u64 = out
        .encrypted
        .iter()
        .zip(&out.layers)
        .map(|(d, l)| (k - 1) * (encoded_len(d).unwrap() + encoded_len(l).unwrap()))
        .sum();
    for m in &out.metrics {
        assert_eq!(m.cum_peer_bytes, want);
    }
    let layers: std::collections::HashSet<u64> = out.layers.iter().map(|l| l.seed()).collect();
    assert_eq!(layers.len(), cfg.num_clients);
}

#[test]
fn baseline_time_is_rounds_times_server_latency() {
    let cfg = SimConfig {
        with_eds: false,
        ..small()
    };
    let out = run(&cfg).unwrap();
    for m in &out.metrics {
        assert_eq!(m.cum_seconds, m.round as f64 * cfg.server_rtt);
        assert_eq!(m.cum_peer_bytes, 0);
    }
}

#[test]
fn halving_rounds_with_sharing_saves_simulated_time() {
    let cfg = SimConfig {
        rounds: 4,
        ..small()
    };
    let eds = run(&cfg).unwrap();
    let base = run(&SimConfig {
        with_eds: false,
        ..cfg.clone()
    })
    .unwrap();
    assert!(eds.metrics[1].cum_seconds < base.metrics[3].cum_seconds);
}

#[test]
fn failures_name_round_and_client() {
    let cfg = small();
    let mut prepared = prepare(&cfg).unwrap();
    prepared.shards[1] = prepared.shards[1].subset(&[]);
    match run_prepared(&cfg, &prepared) {
        Err(Error::Client {
            round: 0,
            client: 1,
            ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let plain = SimConfig {
        with_eds: false,
        ..cfg
    };
    match run_prepared(&plain, &prepared) {
        Err(Error::Client {
            round: 1,
            client: 1,
            ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idx_data_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40usize;
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, n as u8, 0, 0, 0, 3, 0, 0, 0, 3];
    let mut lbl = vec![0, 0, 8, 1, 0, 0, 0, n as u8];
    for i in 0..n {
        let class = i % 2;
        img.extend((0..9).map(|p| {
            if (p % 2 == 0) == (class == 0) {
                230
            } else {
                20
            }
        }));
        lbl.push(class as u8);
    }
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lbl).unwrap();
    let mut cfg = small();
    cfg.idx_images = Some(ip);
    cfg.idx_labels = Some(lp);
    cfg.num_clients = 2;
    cfg.rounds = 2;
    let out = run(&cfg).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert_eq!(out.global.sizes.input_dim, 9);
}
