//! Generated task families for benchmarking and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metadata::{MetaDataset, Record, Task};
use crate::space::{Config, ParamSpec, Scale, SearchSpace};

/// Quadratic bowls sharing a common optimum region on a fixed random design.
///
/// Task `t` is `o_t + s_t Σ_d w_td (x_d - c_td)² + ε`, where the centers
/// `c_t` scatter around a shared center, the curvatures `w_td` around shared
/// per-dimension curvatures, the scale `s_t` is log-uniform over two decades
/// and the offset `o_t` uniform in `[-1, 1]`. Every task is evaluated on the
/// same `points` configurations in `[0, 1]^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticFamily {
    pub tasks: usize,
    pub points: usize,
    pub dim: usize,
    /// Standard deviation of the task centers around the shared center.
    pub center_spread: f64,
    /// Observation noise relative to the task scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for QuadraticFamily {
    fn default() -> Self {
        QuadraticFamily {
            tasks: 12,
            points: 200,
            dim: 3,
            center_spread: 0.05,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl QuadraticFamily {
    pub fn space(&self) -> SearchSpace {
        SearchSpace::new(
            (0..self.dim)
                .map(|d| ParamSpec::continuous(&format!("x{}", d + 1), 0.0, 1.0, Scale::Linear))
                .collect(),
        )
        .expect("valid generated space")
    }

    pub fn generate(&self) -> Result<MetaDataset> {
        let space = self.space();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let design: Vec<Vec<f64>> = (0..self.points)
            .map(|_| (0..self.dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let shared_center: Vec<f64> = (0..self.dim).map(|_| rng.random_range(0.25..0.75)).collect();
        let shared_curvature: Vec<f64> = (0..self.dim).map(|_| rng.random_range(0.5..3.0)).collect();
        let spread = Normal::new(0.0, self.center_spread).expect("finite spread");
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut tasks = Vec::with_capacity(self.tasks);
        for t in 0..self.tasks {
            let center: Vec<f64> = shared_center
                .iter()
                .map(|c| (c + spread.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            let curvature: Vec<f64> = shared_curvature
                .iter()
                .map(|w| w * rng.random_range(0.5..1.5))
                .collect();
            let scale = 10f64.powf(rng.random_range(-1.0..1.0));
            let offset = rng.random_range(-1.0..1.0);
            let records = design
                .iter()
                .map(|x| {
                    let bowl: f64 = (0..self.dim).map(|d| curvature[d] * (x[d] - center[d]).powi(2)).sum();
                    let y = offset + scale * (bowl + self.noise * unit.sample(&mut rng));
                    let config = (0..self.dim).fold(Config::new(), |c, d| c.with_real(&format!("x{}", d + 1), x[d]));
                    Record { config, y }
                })
                .collect();
            tasks.push(Task::new(format!("quad-{t:02}"), records, &space)?);
        }
        MetaDataset::new(space, tasks)
    }
}

/// One-dimensional space of the sine family, `x ∈ [-5, 5]`.
pub fn sine_space() -> SearchSpace {
    SearchSpace::new(vec![ParamSpec::continuous("x", -5.0, 5.0, Scale::Linear)]).expect("valid space")
}

/// `a sin(x + b)` with `a ~ U(0.1, 5)`, `b ~ U(0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SineTask {
            amplitude: rng.random_range(0.1..5.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    /// Loss of the maximization problem.
    pub fn loss(&self, x: f64) -> f64 {
        -self.value(x)
    }

    /// Table of `n` evenly spaced points on `[-5, 5]`, stored as losses.
    pub fn table(&self, id: &str, n: usize, space: &SearchSpace) -> Result<Task> {
        let records = (0..n)
            .map(|i| {
                let x = -5.0 + 10.0 * i as f64 / (n - 1) as f64;
                Record {
                    config: Config::new().with_real("x", x),
                    y: self.loss(x),
                }
            })
            .collect();
        Task::new(id, records, space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_family_shape() {
        let ds = QuadraticFamily::default().generate().unwrap();
        assert_eq!(ds.tasks().len(), 12);
        assert!(ds.tasks().iter().all(|t| t.len() == 200));
        let a = &ds.tasks()[0];
        let b = &ds.tasks()[5];
        assert_eq!(a.encoded(), b.encoded());
    }

    #[test]
    fn quadratic_family_reproducible() {
        let f = QuadraticFamily {
            tasks: 3,
            points: 20,
            ..QuadraticFamily::default()
        };
        assert_eq!(f.generate().unwrap().fingerprint(), f.generate().unwrap().fingerprint());
    }

    #[test]
    fn sine_maximum() {
        let t = SineTask {
            amplitude: 1.0,
            phase: 0.0,
        };
        assert!((t.value(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
        assert!((t.value(std::f64::consts::FRAC_PI_2 - std::f64::consts::TAU) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sine_prior_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &x in &[-4.0, -1.3, 0.0, 2.2, 5.0] {
            let m = (0..10_000).map(|_| SineTask::sample(&mut rng).value(x)).sum::<f64>() / 1e4;
            assert!(m.abs() < 0.05, "mean at {x}: {m}");
        }
    }
}
