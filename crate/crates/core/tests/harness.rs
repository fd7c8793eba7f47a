mod common;

use common::*;
use fsbo::bo::RunHistory;
use fsbo::harness::stats::{derive_seed, mean, median, ranks, sample_std, spearman};
use fsbo::harness::{
    run_benchmark, sine_demo, BenchmarkSpec, DatasetSource, Method, QuadraticFamily, SineDemoConfig, SineTask,
};
use fsbo::meta_train::TrainConfig;
use fsbo::metadata::LoadedDataset;
use fsbo::space::Config;
use fsbo::warmstart::EaConfig;
use rand::Rng;

#[test]
fn normalized_regret_examples() {
    let mut h = RunHistory::new(Some((0.1, 0.5)));
    h.push(Config::new(), 0.5);
    h.push(Config::new(), 0.3);
    h.push(Config::new(), 0.4);
    h.push(Config::new(), 0.1);
    assert_eq!(h.normalized_regret(1), Some(1.0));
    assert!((h.normalized_regret(2).unwrap() - 0.5).abs() < 1e-15);
    assert!((h.normalized_regret(3).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(h.normalized_regret(4), Some(0.0));
    assert_eq!(h.normalized_regret(9), Some(0.0));
    assert_eq!(h.normalized_regret(0), None);
    assert_eq!(RunHistory::new(Some((1.0, 1.0))).normalized_regret(1), None);
}

#[test]
fn seeds_are_stable_and_distinct() {
    assert_eq!(derive_seed(3, "cell", &[1, 2]), derive_seed(3, "cell", &[1, 2]));
    let mut seen = std::collections::HashSet::new();
    for base in 0..4 {
        for tag in ["cell", "train", "ea"] {
            for i in 0..5 {
                assert!(seen.insert(derive_seed(base, tag, &[i, 0])));
            }
        }
    }
    assert_ne!(derive_seed(0, "cell", &[1, 2]), derive_seed(0, "cell", &[2, 1]));
}

#[test]
fn summary_statistics() {
    let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    assert_eq!(mean(&xs), 5.0);
    assert!((sample_std(&xs) - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
    assert_eq!(median(&xs), 4.5);
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(ranks(&[10.0, 30.0, 20.0, 20.0]), vec![1.0, 4.0, 2.5, 2.5]);
}

/// Spearman's rho as the Pearson correlation of average ranks, with ranks
/// found by counting.
fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let below = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn spearman_matches_rank_pearson() {
    let mut r = rng(1);
    for _ in 0..50 {
        let n = r.random_range(3..40);
        let a: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 5.0).round()).collect();
        let b: Vec<f64> = a.iter().map(|x| x * 2.0 + r.random_range(-3.0..3.0)).collect();
        assert!((spearman(&a, &b) - spearman_oracle(&a, &b)).abs() < 1e-12);
    }
    let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let b: Vec<f64> = a.iter().map(|x| x.powi(3)).collect();
    assert!((spearman(&a, &b) - 1.0).abs() < 1e-15);
}

#[test]
fn sine_family_facts() {
    let t = SineTask {
        amplitude: 1.0,
        phase: 0.0,
    };
    assert!((t.value(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
    assert!((t.value(std::f64::consts::FRAC_PI_2 - std::f64::consts::TAU) - 1.0).abs() < 1e-14);
    assert_eq!(t.loss(0.3), -t.value(0.3));
    let mut r = rng(2);
    let tasks: Vec<SineTask> = (0..10_000).map(|_| SineTask::sample(&mut r)).collect();
    assert!(tasks
        .iter()
        .all(|t| (0.1..5.0).contains(&t.amplitude) && (0.0..std::f64::consts::TAU).contains(&t.phase)));
    for x in [-5.0, -2.0, 0.0, 1.3, 5.0] {
        let m = tasks.iter().map(|t| t.value(x)).sum::<f64>() / tasks.len() as f64;
        assert!(m.abs() < 0.05, "mean {m} at {x}");
    }
    let table = t.table("t", 50, &fsbo::harness::sine_space()).unwrap();
    assert_eq!(table.len(), 50);
    assert_eq!(table.records()[0].y, t.loss(-5.0));
    assert_eq!(table.records()[49].y, t.loss(5.0));
}

#[test]
fn quadratic_family_shape() {
    let fam = QuadraticFamily::default();
    let d = fam.generate().unwrap();
    assert_eq!(d.tasks().len(), 12);
    assert!(d.tasks().iter().all(|t| t.len() == 200 && t.f_max() > t.f_min()));
    assert_eq!(fam.generate().unwrap().fingerprint(), d.fingerprint());
    let other = QuadraticFamily { seed: 1, ..fam };
    assert_ne!(other.generate().unwrap().fingerprint(), d.fingerprint());
}

fn tiny_spec(methods: Vec<Method>) -> BenchmarkSpec {
    BenchmarkSpec {
        dataset: DatasetSource::Synthetic {
            synthetic: QuadraticFamily {
                tasks: 2,
                points: 20,
                dim: 2,
                ..QuadraticFamily::default()
            },
        },
        methods,
        repeats: 1,
        budget: 8,
        report_trials: vec![3, 5, 8],
        lhs_size: 3,
        train: TrainConfig {
            outer_iterations: 20,
            batch_size: 8,
            hidden: vec![8],
            ..TrainConfig::default()
        },
        warm_start: EaConfig {
            set_size: 2,
            population_size: 10,
            steps: 100,
            ..EaConfig::default()
        },
        fine_tune_steps: 10,
        ..BenchmarkSpec::default()
    }
}

fn loaded(spec: &BenchmarkSpec) -> LoadedDataset {
    spec.load_dataset().unwrap()
}

#[test]
fn random_only_report_shape() {
    let spec = tiny_spec(vec![Method::Random]);
    let report = run_benchmark(&spec, &loaded(&spec), None).unwrap();
    for trial in [3, 5, 8] {
        assert_eq!(report.rows.iter().filter(|r| r.trial == trial).count(), 2);
    }
    assert_eq!(report.summary.len(), 3);
    assert!(report.summary.iter().all(|s| s.n == 2 && s.failures == 0));
    let m: Vec<f64> = [3, 5, 8]
        .iter()
        .map(|&t| report.mean_regret(Method::Random, t).unwrap())
        .collect();
    assert!(m.windows(2).all(|w| w[1] <= w[0]));
    assert!(report.regret_violations().is_empty());
}

#[test]
fn full_benchmark_is_deterministic_and_cached() {
    let spec = tiny_spec(vec![Method::Random, Method::GpLhs, Method::GpWs, Method::Fsbo]);
    let data = loaded(&spec);
    let cache = tempfile::tempdir().unwrap();
    let a = run_benchmark(&spec, &data, Some(cache.path())).unwrap();
    let cached: Vec<_> = std::fs::read_dir(cache.path()).unwrap().collect();
    assert_eq!(cached.len(), 2);
    let b = run_benchmark(&spec, &data, Some(cache.path())).unwrap();
    let c = run_benchmark(&spec, &data, None).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows, c.rows);
    assert_eq!(a.summary, c.summary);
    assert_eq!(a.rows.len(), 4 * 2 * 3);
    assert!(a.regret_violations().is_empty());
    assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.regret)));
    for method in spec.methods.iter().copied() {
        let m: Vec<f64> = [3, 5, 8].iter().map(|&t| a.mean_regret(method, t).unwrap()).collect();
        assert!(m.windows(2).all(|w| w[1] <= w[0]), "{method}");
    }

    let out = tempfile::tempdir().unwrap();
    a.save(out.path()).unwrap();
    a.save_metadata(&spec, out.path().join("benchmark.json")).unwrap();
    let report = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "method,task_id,repeat,trial,regret");
    assert_eq!(report.lines().count(), 1 + 24);
    let summary = std::fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "method,trial,mean_regret,std_regret,n,failures"
    );
    assert_eq!(std::fs::read_dir(out.path().join("runs")).unwrap().count(), 8);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("benchmark.json")).unwrap()).unwrap();
    assert_eq!(meta["splits"].as_array().unwrap().len(), 2);
}

#[test]
fn different_seeds_change_the_report() {
    let spec = tiny_spec(vec![Method::Random]);
    let data = loaded(&spec);
    let a = run_benchmark(&spec, &data, None).unwrap();
    let b = run_benchmark(&BenchmarkSpec { base_seed: 5, ..spec }, &data, None).unwrap();
    assert_ne!(a.rows, b.rows);
}

#[test]
fn invalid_specs_are_rejected() {
    let base = tiny_spec(vec![Method::Random]);
    let data = loaded(&base);
    let bad = [
        BenchmarkSpec {
            repeats: 0,
            ..base.clone()
        },
        BenchmarkSpec {
            report_trials: vec![9],
            ..base.clone()
        },
        BenchmarkSpec {
            methods: vec![],
            ..base.clone()
        },
        BenchmarkSpec {
            lhs_size: 20,
            ..base.clone()
        },
    ];
    for spec in bad {
        assert!(run_benchmark(&spec, &data, None).is_err());
    }
}

#[test]
fn small_sine_demo_writes_traces() {
    let cfg = SineDemoConfig {
        source_tasks: 4,
        targets: 2,
        trials: 3,
        train: TrainConfig {
            outer_iterations: 30,
            hidden: vec![8, 8],
            ..SineDemoConfig::default().train
        },
        ..SineDemoConfig::default()
    };
    let demo = sine_demo(&cfg).unwrap();
    assert_eq!(demo.sources.len(), 4);
    assert_eq!(demo.targets.len(), 2);
    for t in &demo.targets {
        assert_eq!(t.fsbo.len(), 5);
        assert_eq!(t.random.len(), 5);
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.fsbo.trials[..2], t.random.trials[..2]);
        let regret = t.fsbo_regret();
        assert!(regret.iter().all(|&r| r >= 0.0));
        assert!(regret.windows(2).all(|w| w[1] <= w[0]));
        for s in &t.steps {
            assert_eq!(s.x.len(), s.ei.len());
            assert!(s.ei.iter().all(|&e| e >= 0.0));
        }
    }
    let again = sine_demo(&cfg).unwrap();
    assert_eq!(again.targets, demo.targets);

    let dir = tempfile::tempdir().unwrap();
    demo.save(dir.path()).unwrap();
    for f in [
        "sources.csv",
        "targets.csv",
        "training_loss.csv",
        "target_00_steps.csv",
        "target_01_trials.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(sine_demo(&SineDemoConfig { source_tasks: 1, ..cfg }).is_err());
}
