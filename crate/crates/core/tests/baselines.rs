mod common;

use common::*;
use fsbo::baselines::{fit_vanilla_gp, matern52, random_search_space, random_search_table};
use fsbo::bo::{FnObjective, StopReason};
use fsbo::dkgp::{gp, BaseKernel, KernelParams};
use fsbo::metadata::{Record, TabularOracle, Task};
use fsbo::space::{Config, ParamSpec, Scale, SearchSpace, Value};
use nalgebra::DMatrix;
use rand::Rng;

fn line() -> SearchSpace {
    SearchSpace::new(vec![ParamSpec::continuous("x", 0.0, 1.0, Scale::Linear)]).unwrap()
}

fn x_of(c: &Config) -> f64 {
    match c.get("x") {
        Some(Value::Real(v)) => *v,
        _ => panic!("missing x"),
    }
}

fn lengthscales(kp: &KernelParams) -> Vec<f64> {
    match &kp.base {
        BaseKernel::Matern52 { log_lengthscales } => log_lengthscales.iter().map(|l| l.exp()).collect(),
        _ => panic!("not a Matérn kernel"),
    }
}

#[test]
fn matern_values() {
    assert_eq!(matern52(0.0, 1.3), 1.3);
    assert!(matern52(200.0, 1.0) < 1e-100);
    // 40-digit decimal evaluations of (1 + √5 r + 5r²/3) e^(-√5 r).
    assert!((matern52(1.0, 1.0) - 0.523_994_108_831_820_310_6).abs() < 1e-15);
    assert!((matern52(0.37, 1.7) - 1.527_768_197_982_712_003).abs() < 1e-14);
    let mut prev = matern52(0.0, 1.0);
    for i in 1..100 {
        let v = matern52(0.05 * i as f64, 1.0);
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn matern_gram_is_positive_definite() {
    let mut r = rng(1);
    for _ in 0..20 {
        let d = r.random_range(1..5);
        let n = r.random_range(2..15);
        let mut kp = KernelParams::matern52(d, true);
        if let BaseKernel::Matern52 { log_lengthscales } = &mut kp.base {
            for l in log_lengthscales.iter_mut() {
                *l = r.random_range(-2.0..2.0);
            }
        }
        kp.log_signal_variance = r.random_range(-1.0..1.0);
        kp.log_noise_variance = -18.0;
        let x = random_points(&mut r, n, d);
        let f = gp::gram_factor(&kp, &x).unwrap();
        let k = &f.k_n;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(k[(i, j)], k[(j, i)]);
            }
        }
        let eig = k.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
    }
}

#[test]
fn constant_labels_give_flat_posterior() {
    let x = DMatrix::from_column_slice(5, 1, &[0.1, 0.1, 0.4, 0.7, 0.9]);
    let y = [2.5; 5];
    let fit = fit_vanilla_gp(&x, &y, &mut rng(2));
    let q = DMatrix::from_column_slice(4, 1, &[0.0, 0.25, 0.5, 1.0]);
    let p = fit.posterior(&x, &y, &q).unwrap();
    for m in p.mean {
        assert!((m - 2.5).abs() < 1e-6);
    }
}

#[test]
fn fit_improves_on_defaults_and_is_deterministic() {
    let mut r = rng(3);
    for _ in 0..10 {
        let d = r.random_range(1..4);
        let n = r.random_range(3..12);
        let x = random_points(&mut r, n, d);
        let y = random_labels(&mut r, n);
        let a = fit_vanilla_gp(&x, &y, &mut rng(9));
        let b = fit_vanilla_gp(&x, &y, &mut rng(9));
        assert_eq!(a, b);
        assert!(!a.fallback);
        let z: Vec<f64> = y.iter().map(|v| (v - a.y_mean) / a.y_std).collect();
        let at_init = gp::nll_from_features(&KernelParams::matern52(d, true), &x, &z).unwrap();
        assert!(a.nll <= at_init);
        let at_fit = gp::nll_from_features(&a.kernel, &x, &z).unwrap();
        assert!((at_fit - a.nll).abs() <= 1e-9 * (1.0 + a.nll.abs()));
    }
}

/// Draws `f ~ GP(0, Matérn(ℓ))` at `x` through a dense Cholesky factor
/// built from the closed form, independent of the library kernel code.
fn matern_draw<R: Rng>(r: &mut R, x: &[f64], lengthscale: f64) -> Vec<f64> {
    let n = x.len();
    let s5 = 5f64.sqrt();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d = (x[i] - x[j]).abs() / lengthscale;
        (1.0 + s5 * d + 5.0 * d * d / 3.0) * (-s5 * d).exp() + if i == j { 1e-8 } else { 0.0 }
    });
    let l = k.cholesky().unwrap().l();
    let z: Vec<f64> = (0..n).map(|_| r.sample(rand_distr::StandardNormal)).collect();
    (0..n).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()).collect()
}

#[test]
fn recovers_lengthscale_of_matern_draws() {
    let truth = 0.3;
    let mut r = rng(4);
    let mut estimates: Vec<f64> = (0..20)
        .map(|_| {
            let xs: Vec<f64> = (0..6).map(|_| r.random()).collect();
            let y = matern_draw(&mut r, &xs, truth);
            let x = DMatrix::from_column_slice(6, 1, &xs);
            lengthscales(&fit_vanilla_gp(&x, &y, &mut r).kernel)[0]
        })
        .collect();
    estimates.sort_by(f64::total_cmp);
    let median = 0.5 * (estimates[9] + estimates[10]);
    assert!(median > truth / 3.0 && median < truth * 3.0, "median {median}");
}

fn table(n: usize) -> (SearchSpace, Task) {
    let space = line();
    let records = (0..n)
        .map(|i| Record {
            config: Config::new().with_real("x", i as f64 / n as f64),
            y: ((i * 7919) % n) as f64,
        })
        .collect();
    let task = Task::new("perm", records, &space).unwrap();
    (space, task)
}

#[test]
fn exhausting_the_table_reaches_zero_regret() {
    let (space, task) = table(12);
    let oracle = TabularOracle::new(&space, &task);
    let h = random_search_table(&oracle, &task, 20, &mut rng(5)).unwrap();
    assert_eq!(h.len(), 12);
    assert_eq!(h.stop, StopReason::Exhausted);
    let regret = h.regret_curve().unwrap();
    assert_eq!(*regret.last().unwrap(), 0.0);
    assert!(regret.windows(2).all(|w| w[1] <= w[0]));
    let mut seen: Vec<f64> = h.trials.iter().map(|t| x_of(&t.config)).collect();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    assert_eq!(seen.len(), 12);
}

#[test]
fn expected_trials_to_find_best_row() {
    let n = 15;
    let (space, task) = table(n);
    let oracle = TabularOracle::new(&space, &task);
    let seeds = 10_000;
    let mut total = 0usize;
    for s in 0..seeds {
        let h = random_search_table(&oracle, &task, n, &mut rng(1000 + s)).unwrap();
        total += h.trials.iter().position(|t| t.objective == task.f_min()).unwrap() + 1;
    }
    let mean = total as f64 / seeds as f64;
    let expect = (n as f64 + 1.0) / 2.0;
    assert!((mean - expect).abs() / expect < 0.05, "{mean}");
}

#[test]
fn space_search_is_valid_and_monotone() {
    let space = SearchSpace::builtin("svm").unwrap();
    let objective = FnObjective {
        f: |c: &Config| Ok(c.to_json().len() as f64),
        bounds: Some((0.0, 1000.0)),
    };
    let h = random_search_space(&objective, &space, 40, &mut rng(6)).unwrap();
    assert_eq!(h.len(), 40);
    assert!(h.trials.iter().all(|t| space.validate(&t.config).is_empty()));
    assert!(h.trials.windows(2).all(|w| w[1].incumbent <= w[0].incumbent));
    assert!(random_search_space(&objective, &space, 0, &mut rng(6)).is_err());
}
