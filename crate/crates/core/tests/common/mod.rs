//! Independent reference implementations shared by the integration tests.
//! Everything here is written with explicit loops and dense inverses so it
//! shares no code path with the library beyond parameter storage.
#![allow(dead_code)]

use std::f64::consts::PI;

use fsbo::dkgp::{BaseKernel, BaseKernelKind, DeepKernelSurrogate, KernelParams, SurrogateArch};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

pub fn random_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Surrogate with randomly initialized network and perturbed kernel parameters.
pub fn random_surrogate<R: Rng>(
    rng: &mut R,
    input_dim: usize,
    hidden: &[usize],
    kind: BaseKernelKind,
    ard: bool,
) -> DeepKernelSurrogate {
    let arch = SurrogateArch {
        input_dim,
        hidden: hidden.to_vec(),
        kernel: kind,
        ard,
        mixture_components: 2,
    };
    let mut s = DeepKernelSurrogate::new(&arch, rng);
    let kp = &mut s.kernel;
    kp.log_signal_variance = rng.random_range(-0.5..0.5);
    kp.log_noise_variance = rng.random_range(-4.0..-1.5);
    match &mut kp.base {
        BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
            for l in log_lengthscales.iter_mut() {
                *l = rng.random_range(-0.7..0.7);
            }
        }
        BaseKernel::SpectralMixture {
            log_weights,
            means,
            log_variances,
        } => {
            for w in log_weights.iter_mut() {
                *w = rng.random_range(-0.5..0.5);
            }
            for m in means.iter_mut() {
                *m = rng.random_range(0.0..0.5);
            }
            for v in log_variances.iter_mut() {
                *v = rng.random_range(-3.0..-1.0);
            }
        }
    }
    s
}

/// Forward pass with explicit loops.
pub fn oracle_features(s: &DeepKernelSurrogate, x: &[f64]) -> Vec<f64> {
    let layers = s.mlp.layers();
    let mut h = x.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let mut out = vec![0.0; layer.weight.nrows()];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                acc += layer.weight[(o, i)] * hi;
            }
            *slot = if li + 1 < layers.len() { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

pub fn oracle_kernel(kp: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let sf2 = kp.log_signal_variance.exp();
    let ls = |l: &[f64], i: usize| if l.len() == 1 { l[0].exp() } else { l[i].exp() };
    match &kp.base {
        BaseKernel::SquaredExponential { log_lengthscales } => {
            let mut r2 = 0.0;
            for i in 0..a.len() {
                let t = (a[i] - b[i]) / ls(log_lengthscales, i);
                r2 += t * t;
            }
            sf2 * (-0.5 * r2).exp()
        }
        BaseKernel::Matern52 { log_lengthscales } => {
            let mut r2 = 0.0;
            for i in 0..a.len() {
                let t = (a[i] - b[i]) / ls(log_lengthscales, i);
                r2 += t * t;
            }
            let r = r2.sqrt();
            let s5 = 5f64.sqrt();
            sf2 * (1.0 + s5 * r + 5.0 * r2 / 3.0) * (-s5 * r).exp()
        }
        BaseKernel::SpectralMixture {
            log_weights,
            means,
            log_variances,
        } => {
            let d = a.len();
            let z: f64 = log_weights.iter().map(|w| w.exp()).sum();
            let mut k = 0.0;
            for (q, lw) in log_weights.iter().enumerate() {
                let mut prod = 1.0;
                for i in 0..d {
                    let tau = a[i] - b[i];
                    let v = log_variances[q * d + i].exp();
                    prod *= (-2.0 * PI * PI * tau * tau * v).exp() * (2.0 * PI * tau * means[q * d + i]).cos();
                }
                k += lw.exp() / z * prod;
            }
            sf2 * k
        }
    }
}

fn feature_rows(s: &DeepKernelSurrogate, x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            oracle_features(s, &row)
        })
        .collect()
}

/// `k(X, X) + (σ_n² + 1e-6 σ_f²) I`, the Gram matrix at the first jitter level.
pub fn oracle_gram(s: &DeepKernelSurrogate, x: &DMatrix<f64>) -> DMatrix<f64> {
    let z = feature_rows(s, x);
    let n = z.len();
    let sf2 = s.kernel.log_signal_variance.exp();
    let sn2 = s.kernel.log_noise_variance.exp();
    DMatrix::from_fn(n, n, |i, j| {
        oracle_kernel(&s.kernel, &z[i], &z[j]) + if i == j { sn2 + 1e-6 * sf2 } else { 0.0 }
    })
}

/// Posterior mean and latent variance through an explicit LU inverse.
pub fn oracle_posterior(
    s: &DeepKernelSurrogate,
    xo: &DMatrix<f64>,
    y: &[f64],
    xq: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let k_inv = oracle_gram(s, xo).try_inverse().expect("invertible");
    let zo = feature_rows(s, xo);
    let zq = feature_rows(s, xq);
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for q in &zq {
        let ks: Vec<f64> = zo.iter().map(|o| oracle_kernel(&s.kernel, o, q)).collect();
        let mut m = 0.0;
        let mut quad = 0.0;
        for i in 0..zo.len() {
            for j in 0..zo.len() {
                m += ks[i] * k_inv[(i, j)] * y[j];
                quad += ks[i] * k_inv[(i, j)] * ks[j];
            }
        }
        mean.push(m);
        var.push(oracle_kernel(&s.kernel, q, q) - quad);
    }
    (mean, var)
}

/// `½ yᵀK⁻¹y + ½ log|K| + (n/2) log 2π` with an LU determinant and inverse.
pub fn oracle_nll(s: &DeepKernelSurrogate, x: &DMatrix<f64>, y: &[f64]) -> f64 {
    let k = oracle_gram(s, x);
    let n = y.len();
    let det = k.clone().lu().determinant();
    let k_inv = k.try_inverse().expect("invertible");
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += y[i] * k_inv[(i, j)] * y[j];
        }
    }
    0.5 * quad + 0.5 * det.ln() + 0.5 * n as f64 * (2.0 * PI).ln()
}

/// Central differences of the library NLL in every flat parameter.
pub fn fd_gradient(s: &DeepKernelSurrogate, x: &DMatrix<f64>, y: &[f64], h: f64) -> Vec<f64> {
    let base = s.params();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let mut up = s.clone();
            up.set_params(&p);
            p[i] = base[i] - h;
            let mut down = s.clone();
            down.set_params(&p);
            (up.nll(x, y).unwrap() - down.nll(x, y).unwrap()) / (2.0 * h)
        })
        .collect()
}

/// Relative error with the denominator floored at 1e-3, so that entries
/// whose true gradient is (near) zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}
