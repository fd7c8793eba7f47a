//! Stationary base kernels on feature-map outputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKernelKind {
    SquaredExponential,
    Matern52,
    SpectralMixture,
}

/// Base kernel shape parameters. Lengthscale vectors of length 1 are
/// isotropic, otherwise one entry per feature dimension (ARD).
#[derive(Clone, Debug, PartialEq)]
pub enum BaseKernel {
    SquaredExponential {
        log_lengthscales: Vec<f64>,
    },
    Matern52 {
        log_lengthscales: Vec<f64>,
    },
    /// Q components over D feature dimensions. Component weights are the
    /// softmax of `log_weights`, so the mixture integrates to the signal
    /// variance at zero distance. `means` and `log_variances` are `Q × D`,
    /// row-major.
    SpectralMixture {
        log_weights: Vec<f64>,
        means: Vec<f64>,
        log_variances: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
    pub base: BaseKernel,
}

impl KernelParams {
    /// Unit signal variance, unit lengthscales, noise variance `1e-2`.
    pub fn squared_exponential(dim: usize, ard: bool) -> Self {
        KernelParams {
            log_signal_variance: 0.0,
            log_noise_variance: 1e-2f64.ln(),
            base: BaseKernel::SquaredExponential {
                log_lengthscales: vec![0.0; if ard { dim } else { 1 }],
            },
        }
    }

    pub fn matern52(dim: usize, ard: bool) -> Self {
        KernelParams {
            log_signal_variance: 0.0,
            log_noise_variance: 1e-2f64.ln(),
            base: BaseKernel::Matern52 {
                log_lengthscales: vec![0.0; if ard { dim } else { 1 }],
            },
        }
    }

    /// Equal weights; component `q` starts at frequency `q / (2 pi Q)` in
    /// every dimension with the bandwidth of a unit lengthscale.
    pub fn spectral_mixture(dim: usize, components: usize) -> Self {
        let q = components.max(1);
        let unit_var = (1.0 / (4.0 * PI * PI)).ln();
        let means = (0..q)
            .flat_map(|c| std::iter::repeat_n(c as f64 / (2.0 * PI * q as f64), dim))
            .collect();
        KernelParams {
            log_signal_variance: 0.0,
            log_noise_variance: 1e-2f64.ln(),
            base: BaseKernel::SpectralMixture {
                log_weights: vec![0.0; q],
                means,
                log_variances: vec![unit_var; q * dim],
            },
        }
    }

    pub fn kind(&self) -> BaseKernelKind {
        match self.base {
            BaseKernel::SquaredExponential { .. } => BaseKernelKind::SquaredExponential,
            BaseKernel::Matern52 { .. } => BaseKernelKind::Matern52,
            BaseKernel::SpectralMixture { .. } => BaseKernelKind::SpectralMixture,
        }
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// Flat order: signal, noise, then the base parameters.
    pub fn n_params(&self) -> usize {
        2 + match &self.base {
            BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
                log_lengthscales.len()
            }
            BaseKernel::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => log_weights.len() + means.len() + log_variances.len(),
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.push(self.log_signal_variance);
        out.push(self.log_noise_variance);
        match &self.base {
            BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
                out.extend_from_slice(log_lengthscales)
            }
            BaseKernel::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                out.extend_from_slice(log_weights);
                out.extend_from_slice(means);
                out.extend_from_slice(log_variances);
            }
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        self.log_signal_variance = src[0];
        self.log_noise_variance = src[1];
        let mut k = 2;
        let mut fill = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&src[k..k + n]);
            k += n;
        };
        match &mut self.base {
            BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
                fill(log_lengthscales)
            }
            BaseKernel::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                fill(log_weights);
                fill(means);
                fill(log_variances);
            }
        }
        k
    }

    pub fn is_finite(&self) -> bool {
        let mut v = Vec::with_capacity(self.n_params());
        self.write_params(&mut v);
        v.iter().all(|x| x.is_finite())
            && self.signal_variance().is_finite()
            && self.signal_variance() > 0.0
            && self.noise_variance().is_finite()
            && self.noise_variance() > 0.0
    }

    /// Feature dimension the base kernel expects, if it fixes one.
    pub fn feature_dim(&self) -> Option<usize> {
        match &self.base {
            BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
                (log_lengthscales.len() > 1).then_some(log_lengthscales.len())
            }
            BaseKernel::SpectralMixture { log_weights, means, .. } => Some(means.len() / log_weights.len()),
        }
    }

    /// `k(a, b)` including the signal variance.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.prepare().eval(a, b)
    }

    /// Parameter transforms computed once for many kernel evaluations.
    pub fn prepare(&self) -> PreparedKernel {
        let sf2 = self.signal_variance();
        let shape = match &self.base {
            BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
                Shape::Stationary {
                    matern: matches!(self.base, BaseKernel::Matern52 { .. }),
                    inv_l2: log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect(),
                }
            }
            BaseKernel::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => Shape::Mixture {
                weights: softmax(log_weights),
                means: means.clone(),
                variances: log_variances.iter().map(|v| v.exp()).collect(),
            },
        };
        PreparedKernel { sf2, shape }
    }

    #[cfg(test)]
    pub(crate) fn accumulate_grad(
        &self,
        a: &[f64],
        b: &[f64],
        weight: f64,
        grad: &mut [f64],
        grad_a: &mut [f64],
        grad_b: &mut [f64],
    ) -> f64 {
        self.prepare()
            .accumulate_grad(a, b, weight, grad, grad_a, grad_b, &mut Vec::new())
    }
}

enum Shape {
    Stationary {
        matern: bool,
        inv_l2: Vec<f64>,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
    },
}

pub struct PreparedKernel {
    sf2: f64,
    shape: Shape,
}

const TWO_PI_SQ: f64 = 2.0 * PI * PI;

impl PreparedKernel {
    fn sq_dist(inv_l2: &[f64], a: &[f64], b: &[f64]) -> f64 {
        if inv_l2.len() == 1 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * inv_l2[0]
        } else {
            a.iter()
                .zip(b)
                .zip(inv_l2)
                .map(|((x, y), w)| (x - y) * (x - y) * w)
                .sum()
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.shape {
            Shape::Stationary { matern: false, inv_l2 } => self.sf2 * (-0.5 * Self::sq_dist(inv_l2, a, b)).exp(),
            Shape::Stationary { matern: true, inv_l2 } => self.sf2 * matern52_unit(Self::sq_dist(inv_l2, a, b).sqrt()),
            Shape::Mixture {
                weights,
                means,
                variances,
            } => {
                let d = a.len();
                let mut k = 0.0;
                for (q, wq) in weights.iter().enumerate() {
                    let mut quad = 0.0;
                    let mut cosines = 1.0;
                    for i in 0..d {
                        let tau = a[i] - b[i];
                        quad += tau * tau * variances[q * d + i];
                        cosines *= (2.0 * PI * tau * means[q * d + i]).cos();
                    }
                    k += wq * (-TWO_PI_SQ * quad).exp() * cosines;
                }
                self.sf2 * k
            }
        }
    }

    /// Accumulate `weight * dk(a,b)/dparam` into `grad` (kernel flat order,
    /// noise slot untouched), `weight * dk/da` into `grad_a` and `weight *
    /// dk/db` into `grad_b`. Returns `k(a, b)`. `scratch` is reused between calls.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn accumulate_grad(
        &self,
        a: &[f64],
        b: &[f64],
        weight: f64,
        grad: &mut [f64],
        grad_a: &mut [f64],
        grad_b: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> f64 {
        let sf2 = self.sf2;
        let d = a.len();
        match &self.shape {
            Shape::Stationary { matern, inv_l2 } => {
                let s = Self::sq_dist(inv_l2, a, b);
                let (k, dk_ds) = if *matern {
                    let r = s.sqrt();
                    let e = (-SQRT5 * r).exp();
                    (
                        sf2 * (1.0 + SQRT5 * r + 5.0 * s / 3.0) * e,
                        sf2 * (-5.0 / 6.0) * (1.0 + SQRT5 * r) * e,
                    )
                } else {
                    let k = sf2 * (-0.5 * s).exp();
                    (k, -0.5 * k)
                };
                grad[0] += weight * k;
                let iso = inv_l2.len() == 1;
                let c = weight * dk_ds;
                for i in 0..d {
                    let w = if iso { inv_l2[0] } else { inv_l2[i] };
                    let tau = a[i] - b[i];
                    grad[2 + if iso { 0 } else { i }] -= c * 2.0 * tau * tau * w;
                    let g = c * 2.0 * tau * w;
                    grad_a[i] += g;
                    grad_b[i] -= g;
                }
                k
            }
            Shape::Mixture {
                weights,
                means,
                variances,
            } => {
                // term_q = E_q * prod_i cos_i, E_q = exp(-2 pi^2 sum_i tau_i^2 v_i)
                let q_n = weights.len();
                scratch.clear();
                scratch.resize(4 * d + 2 + q_n, 0.0);
                let (cos, rest) = scratch.split_at_mut(d);
                let (sin, rest) = rest.split_at_mut(d);
                let (prefix, rest) = rest.split_at_mut(d + 1);
                let (suffix, terms) = rest.split_at_mut(d + 1);
                let off_mu = 2 + q_n;
                let off_lv = off_mu + q_n * d;
                for q in 0..q_n {
                    let mut quad = 0.0;
                    for i in 0..d {
                        let tau = a[i] - b[i];
                        quad += tau * tau * variances[q * d + i];
                        let (sn, cs) = (2.0 * PI * tau * means[q * d + i]).sin_cos();
                        sin[i] = sn;
                        cos[i] = cs;
                    }
                    let e = (-TWO_PI_SQ * quad).exp();
                    prefix[0] = 1.0;
                    for i in 0..d {
                        prefix[i + 1] = prefix[i] * cos[i];
                    }
                    suffix[d] = 1.0;
                    for i in (0..d).rev() {
                        suffix[i] = suffix[i + 1] * cos[i];
                    }
                    let term = e * prefix[d];
                    terms[q] = term;
                    let scale = weight * sf2 * weights[q];
                    for i in 0..d {
                        let tau = a[i] - b[i];
                        let v = variances[q * d + i];
                        let mu = means[q * d + i];
                        let others = e * prefix[i] * suffix[i + 1];
                        let g = scale * (-2.0 * TWO_PI_SQ * tau * v * term - others * sin[i] * 2.0 * PI * mu);
                        grad_a[i] += g;
                        grad_b[i] -= g;
                        grad[off_mu + q * d + i] -= scale * others * sin[i] * 2.0 * PI * tau;
                        grad[off_lv + q * d + i] -= scale * TWO_PI_SQ * tau * tau * v * term;
                    }
                }
                let mix: f64 = weights.iter().zip(terms.iter()).map(|(a, b)| a * b).sum();
                let k = sf2 * mix;
                grad[0] += weight * k;
                for q in 0..q_n {
                    grad[2 + q] += weight * sf2 * weights[q] * (terms[q] - mix);
                }
                k
            }
        }
    }
}

/// Matérn 5/2 correlation at scaled distance `r`.
pub fn matern52_unit(r: f64) -> f64 {
    (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * (-SQRT5 * r).exp()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn randomize(kp: &mut KernelParams, rng: &mut impl Rng) {
        let mut p = Vec::new();
        kp.write_params(&mut p);
        for v in p.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        kp.read_params(&p);
    }

    /// Central differences of `eval` against `accumulate_grad`, per parameter
    /// and per input coordinate.
    fn check_grad(kp: &KernelParams, a: &[f64], b: &[f64]) {
        let n = kp.n_params();
        let mut grad = vec![0.0; n];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        let k = kp.accumulate_grad(a, b, 1.0, &mut grad, &mut ga, &mut gb);
        assert!((k - kp.eval(a, b)).abs() < 1e-14);
        let h = 1e-6;
        let mut p = Vec::new();
        kp.write_params(&mut p);
        for i in 0..n {
            if i == 1 {
                continue;
            }
            let mut kp2 = kp.clone();
            let mut pp = p.clone();
            pp[i] += h;
            kp2.read_params(&pp);
            let up = kp2.eval(a, b);
            pp[i] -= 2.0 * h;
            kp2.read_params(&pp);
            let dn = kp2.eval(a, b);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", grad[i]);
        }
        for i in 0..a.len() {
            let mut ap = a.to_vec();
            ap[i] += h;
            let up = kp.eval(&ap, b);
            ap[i] -= 2.0 * h;
            let dn = kp.eval(&ap, b);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-7, "input {i}: fd {fd} vs {}", ga[i]);
            assert!((ga[i] + gb[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for d in [1, 3] {
            for mut kp in [
                KernelParams::squared_exponential(d, true),
                KernelParams::squared_exponential(d, false),
                KernelParams::matern52(d, true),
                KernelParams::matern52(d, false),
                KernelParams::spectral_mixture(d, 3),
            ] {
                randomize(&mut kp, &mut rng);
                for _ in 0..5 {
                    let a = random_point(&mut rng, d);
                    let b = random_point(&mut rng, d);
                    check_grad(&kp, &a, &b);
                }
            }
        }
    }

    #[test]
    fn zero_distance_is_signal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mut kp in [
            KernelParams::squared_exponential(4, true),
            KernelParams::matern52(4, true),
            KernelParams::spectral_mixture(4, 2),
        ] {
            randomize(&mut kp, &mut rng);
            let a = random_point(&mut rng, 4);
            assert!((kp.eval(&a, &a) - kp.signal_variance()).abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_single_component_at_zero_frequency_is_squared_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let se = KernelParams {
            log_signal_variance: 0.3,
            log_noise_variance: -4.0,
            base: BaseKernel::SquaredExponential {
                log_lengthscales: ls.clone(),
            },
        };
        let sm = KernelParams {
            log_signal_variance: 0.3,
            log_noise_variance: -4.0,
            base: BaseKernel::SpectralMixture {
                log_weights: vec![0.0],
                means: vec![0.0; d],
                // v = 1 / (4 pi^2 l^2)
                log_variances: ls.iter().map(|l| -(4.0 * PI * PI).ln() - 2.0 * l).collect(),
            },
        };
        for _ in 0..20 {
            let a = random_point(&mut rng, d);
            let b = random_point(&mut rng, d);
            assert!((se.eval(&a, &b) - sm.eval(&a, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn matern_reference_values() {
        assert_eq!(matern52_unit(0.0), 1.0);
        // (1 + sqrt5 + 5/3) e^{-sqrt5}; reference value from 30-digit arithmetic
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        assert!((matern52_unit(1.0) - expected).abs() < 1e-15);
        assert!((matern52_unit(1.0) - 0.523_994_108_831_820_3).abs() < 1e-15);
        assert!(matern52_unit(50.0) < 1e-40);
    }
}
