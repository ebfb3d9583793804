//! End-to-end acceptance suite: one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use fededs::aggregation::{
    convergence_bound, fedavg_aggregate, fednova_norm, weights_for, ConvergenceBoundInputs,
    Weighting,
};
use fededs::data::Dataset;
use fededs::encryption::{fed_encrypted_data_generate, privacy_report};
use fededs::nn::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use fededs::nn::{OptimizerState, StochasticLayer};
use fededs::orchestrator::{
    centralized_accuracy, encryption_config, evaluate_top1, initial_global, metrics_to_csv,
    prepare, rounds_to_target, run_prepared, stochastic_seed, write_metrics_csv, Method, SimConfig,
};
use fededs::schedules::{epochs_at, lambdas_at, EpochScheduleConfig, LambdaScheduleConfig};
use fededs::transfer::{local_train, shuffle_seed, LocalTraining};

const SEEDS: [u64; 3] = [0, 1, 2];
const CEILING_EPOCHS: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// The desk-scale task: 5-class blobs in 16 dimensions, 1000 train / 250
/// holdout, K = 5, Dirichlet 0.1, one hidden layer, T = 60.
fn desk(seed: u64) -> SimConfig {
    SimConfig {
        base_seed: seed,
        ..SimConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

fn criterion_1() -> Outcome {
    let e = EpochScheduleConfig::new(5, 1, 1, 3).unwrap();
    let epochs: Vec<usize> = (1..=4).map(|t| epochs_at(&e, t)).collect();
    let l = LambdaScheduleConfig::new(3.0, 0.01).unwrap();
    let lam: Vec<(f64, f64)> = (1..=3).map(|t| lambdas_at(&l, t)).collect();
    let close =
        |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() <= 1e-6 && (a.1 - b.1).abs() <= 1e-6;
    let pass = epochs == [5, 3, 1, 1]
        && close(lam[0], (0.5, 0.5))
        && close(lam[1], (0.952574, 0.047426))
        && lam[2] == (1.0, 0.0);
    outcome(pass, format!("epochs {epochs:?}, lambdas {lam:?}"))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for tau in 1..=20 {
        for rho in [0.0f64, 0.5, 0.9, 0.99] {
            let brute: f64 = (1..=tau)
                .map(|j| (0..=tau - j).map(|i| rho.powi(i as i32)).sum::<f64>())
                .sum();
            worst = worst.max((fednova_norm(tau, rho).unwrap() - brute).abs());
        }
    }
    let at5 = fednova_norm(5, 0.9).unwrap();
    outcome(
        worst <= 1e-9,
        format!(
            "max |norm - brute force| = {worst:.2e} over 80 cases; tau=5, rho=0.9 -> {at5:.10}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let reports = run_suite(DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
    let worst = reports
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    let small = reports.iter().all(|r| r.num_params <= 500);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    outcome(
        failing.is_empty() && small,
        format!(
            "{} checks, worst relative error {worst:.2e}, failing {failing:?}",
            reports.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    // FedEDS pipeline with lambda_dis = 0, mu = 0 and a constant schedule.
    let cfg = SimConfig {
        force_local_only: true,
        e_max: 1,
        e_min: 1,
        local_epochs: 1,
        rounds: 20,
        ..desk(0)
    };
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
    // Communication totals differ by construction; the training trajectory must not.
    let trajectory =
        |m: &[fededs::orchestrator::RoundMetrics]| -> Vec<(f64, f64, usize, f64, f64)> {
            m.iter()
                .map(|r| (r.accuracy, r.mean_loss, r.e_t, r.lambda_c, r.lambda_dis))
                .collect()
        };
    let mut bitwise = trajectory(&eds.metrics) == trajectory(&plain.metrics)
        && eds.global.trainable() == plain.global.trainable();
    for t in 1..=cfg.rounds {
        let updates: Vec<_> = (0..cfg.num_clients)
            .map(|c| {
                let mut p = global.clone();
                let mut opt =
                    OptimizerState::momentum_sgd(cfg.learning_rate, cfg.rho, cfg.weight_decay)
                        .unwrap();
                let setup = LocalTraining {
                    local: &prepared.shards[c],
                    epochs: 1,
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
        bitwise &=
            evaluate_top1(&global, &prepared.holdout).unwrap() == eds.metrics[t - 1].accuracy;
    }
    bitwise &= global.trainable() == eds.global.trainable();

    // FedNova with rho = 0 and equal step counts against uniform FedAvg.
    let cfg = SimConfig {
        rho: 0.0,
        aggregate_weighting: Weighting::Uniform,
        rounds: 10,
        ..desk(0)
    };
    let mut prepared = prepare(&cfg).unwrap();
    let shard = prepared.shards[0].clone();
    prepared.shards = vec![shard; cfg.num_clients];
    let avg = run_prepared(&cfg, &prepared).unwrap();
    let nova = run_prepared(
        &SimConfig {
            method: Method::FedNova,
            ..cfg
        },
        &prepared,
    )
    .unwrap();
    let mut gap = 0.0f64;
    for (a, b) in avg.global.trainable().iter().zip(nova.global.trainable()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            gap = gap.max((x - y).abs());
        }
    }
    for (a, b) in avg.metrics.iter().zip(&nova.metrics) {
        gap = gap.max((a.accuracy - b.accuracy).abs());
    }
    outcome(
        bitwise && gap <= 1e-9,
        format!("FedAvg reduction bitwise: {bitwise}; FedNova vs uniform FedAvg max gap {gap:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut eds_rounds = Vec::new();
    let mut base_rounds = Vec::new();
    let mut notes = Vec::new();
    for seed in SEEDS {
        let cfg = desk(seed);
        let prepared = prepare(&cfg).unwrap();
        let ceiling = centralized_accuracy(&cfg, &prepared, CEILING_EPOCHS).unwrap();
        let target = 0.85 * ceiling;
        let eds = run_prepared(&cfg, &prepared).unwrap();
        let base = run_prepared(
            &SimConfig {
                with_eds: false,
                ..cfg
            },
            &prepared,
        )
        .unwrap();
        let r_eds = rounds_to_target(&eds.metrics, target);
        let r_base = rounds_to_target(&base.metrics, target);
        let as_num = |r: Option<usize>| r.map_or(f64::INFINITY, |r| r as f64);
        eds_rounds.push(as_num(r_eds));
        base_rounds.push(as_num(r_base));
        notes.push(format!(
            "seed {seed}: target {target:.3} eds {r_eds:?} base {r_base:?}"
        ));
    }
    let (e, b) = (median(eds_rounds), median(base_rounds));
    let ratio = e / b;
    outcome(
        ratio <= 0.8,
        format!(
            "median rounds {e} vs {b}, ratio {ratio:.3} (bound 0.8); {}",
            notes.join("; ")
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for alpha in [0.1, 0.5] {
        for method in [Method::FedAvg, Method::FedProx, Method::FedNova] {
            let mut eds = Vec::new();
            let mut base = Vec::new();
            for seed in SEEDS {
                let cfg = SimConfig {
                    alpha,
                    method,
                    ..desk(seed)
                };
                let prepared = prepare(&cfg).unwrap();
                let final_acc = |c: &SimConfig| {
                    run_prepared(c, &prepared)
                        .unwrap()
                        .metrics
                        .last()
                        .unwrap()
                        .accuracy
                };
                eds.push(final_acc(&cfg));
                base.push(final_acc(&SimConfig {
                    with_eds: false,
                    ..cfg
                }));
            }
            let (e, b) = (median(eds), median(base));
            let ok = e >= b - 0.005 && (alpha != 0.1 || e > b);
            pass &= ok;
            notes.push(format!(
                "a={alpha} {}: {e:.3} vs {b:.3}{}",
                method.name(),
                if ok { "" } else { " !" }
            ));
        }
    }
    outcome(pass, notes.join("; "))
}

fn criterion_7() -> Outcome {
    let cfg = desk(0);
    let prepared = prepare(&cfg).unwrap();
    let global = initial_global(&cfg, &prepared.sizes).unwrap();
    let (mut dist, mut norm, mut enc_hits, mut plain_hits, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, shard) in prepared.shards.iter().enumerate() {
        let layer = StochasticLayer::generate(
            cfg.feature_dim,
            stochastic_seed(cfg.base_seed, k),
            cfg.stochastic_scale,
        );
        let out = fed_encrypted_data_generate(
            k,
            &global,
            &layer,
            shard,
            &encryption_config(&cfg, k).unwrap(),
        )
        .unwrap();
        let r = privacy_report(&out.encryptor, &out.pretrained, shard).unwrap();
        let m = shard.len() as f64;
        dist += r.mean_distortion * m;
        norm += r.mean_input_norm * m;
        enc_hits += r.encrypted_accuracy * m;
        plain_hits += r.plain_accuracy * m;
        n += m;
    }
    let (dist, norm, enc, plain) = (dist / n, norm / n, enc_hits / n, plain_hits / n);
    outcome(
        dist >= 0.5 * norm && enc >= plain - 0.05,
        format!(
            "mean |g(x)-x| {dist:.3} vs 0.5*mean |x| {:.3}; encrypted-path acc {enc:.3} vs plain {plain:.3}",
            0.5 * norm
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for parallel in [false, true] {
        let cfg = SimConfig {
            parallel,
            ..desk(0)
        };
        let out = fededs::orchestrator::run(&cfg).unwrap();
        let path = dir.path().join(format!("metrics-{parallel}.csv"));
        write_metrics_csv(&path, &out.metrics).unwrap();
        files.push(std::fs::read(&path).unwrap());
        assert_eq!(
            files.last().unwrap(),
            metrics_to_csv(&out.metrics).as_bytes()
        );
    }
    outcome(
        files[0] == files[1],
        format!(
            "serial and concurrent metrics files: {} bytes, identical {}",
            files[0].len(),
            files[0] == files[1]
        ),
    )
}

fn criterion_9() -> Outcome {
    let base = ConvergenceBoundInputs {
        smoothness: 1.0,
        sigma2: 0.0,
        beta2: 1.0,
        kappa2: 0.0,
        eta: 0.1,
        e_min: 1,
        rounds: 100,
        loss_gap: 1.0,
        weights: vec![0.2; 5],
    };
    let b = convergence_bound(&base).unwrap();
    let b2 = convergence_bound(&ConvergenceBoundInputs {
        rounds: 200,
        ..base.clone()
    })
    .unwrap();
    let rejected = convergence_bound(&ConvergenceBoundInputs { eta: 0.6, ..base }).is_err();
    outcome(
        (b - 0.4).abs() < 1e-12 && (b2 - b / 2.0).abs() < 1e-12 && rejected,
        format!("bound {b}, at 2T {b2}, eta*L > 1/(2 E_min) rejected: {rejected}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("schedule exactness", criterion_1, Duration::from_secs(1)),
        (
            "FedNova oracle equivalence",
            criterion_2,
            Duration::from_secs(1),
        ),
        ("gradient correctness", criterion_3, Duration::from_secs(30)),
        ("baseline reduction", criterion_4, Duration::from_secs(60)),
        ("directional speedup", criterion_5, Duration::from_secs(300)),
        ("accuracy uplift", criterion_6, Duration::from_secs(900)),
        ("privacy/utility", criterion_7, Duration::from_secs(120)),
        ("determinism", criterion_8, Duration::from_secs(600)),
        (
            "convergence bound calculator",
            criterion_9,
            Duration::from_secs(1),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed < *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {} {name}: {} ({:.1}s, budget {}s) {}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            out.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
