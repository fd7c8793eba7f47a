//! Exact GP algebra on precomputed features: Gram construction with jitter
//! escalation, posterior prediction, negative log marginal likelihood and its
//! adjoints. Every solve goes through the Cholesky factor.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::kernel::KernelParams;
use crate::error::{Error, Result};

/// Jitter levels relative to the signal variance, tried in order.
pub const JITTER_LEVELS: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: Vec<f64>,
    /// Latent (noise-free) variance, floored at zero.
    pub variance: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl PosteriorPrediction {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

pub struct GramFactor {
    pub k_n: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal.
    pub jitter: f64,
}

/// Features of `n` points as `n × D`; returns columns laid out per point.
fn point_major(z: &DMatrix<f64>) -> (Vec<f64>, usize) {
    let d = z.ncols();
    (z.transpose().as_slice().to_vec(), d)
}

/// Symmetric `k(Z, Z)`: upper triangle evaluated, then mirrored.
pub fn kernel_matrix(kp: &KernelParams, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let (pts, d) = point_major(z);
    let p = |i: usize| &pts[i * d..(i + 1) * d];
    let pk = kp.prepare();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = pk.eval(p(i), p(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `k(Z_a, Z_b)` of shape `n_a × n_b`.
pub fn cross_kernel(kp: &KernelParams, za: &DMatrix<f64>, zb: &DMatrix<f64>) -> DMatrix<f64> {
    let (pa, d) = point_major(za);
    let (pb, _) = point_major(zb);
    let pk = kp.prepare();
    DMatrix::from_fn(za.nrows(), zb.nrows(), |i, j| {
        pk.eval(&pa[i * d..(i + 1) * d], &pb[j * d..(j + 1) * d])
    })
}

/// `K_n = k(Z, Z) + (noise + jitter) I`, factorized. Jitter starts at
/// `1e-6` times the signal variance and grows tenfold up to `1e-2`.
pub fn gram_factor(kp: &KernelParams, z: &DMatrix<f64>) -> Result<GramFactor> {
    if z.nrows() == 0 {
        return Err(Error::InvalidArgument("Gram matrix of zero points".into()));
    }
    if !kp.is_finite() {
        return Err(Error::Numerical("non-finite kernel parameters".into()));
    }
    let k = kernel_matrix(kp, z);
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite kernel matrix".into()));
    }
    let sf2 = kp.signal_variance();
    let noise = kp.noise_variance();
    for rel in JITTER_LEVELS {
        let jitter = rel * sf2;
        let mut k_n = k.clone();
        for i in 0..k_n.nrows() {
            k_n[(i, i)] += noise + jitter;
        }
        if let Some(chol) = Cholesky::new(k_n.clone()) {
            return Ok(GramFactor { k_n, chol, jitter });
        }
    }
    Err(Error::Numerical(format!(
        "Cholesky failed on {0}x{0} Gram matrix at maximum jitter",
        z.nrows()
    )))
}

pub fn posterior_from_features(
    kp: &KernelParams,
    z_obs: &DMatrix<f64>,
    y: &[f64],
    z_query: &DMatrix<f64>,
    full_covariance: bool,
) -> Result<PosteriorPrediction> {
    let m = z_query.nrows();
    let (pq, d) = point_major(z_query);
    let pk = kp.prepare();
    let prior_diag: Vec<f64> = (0..m)
        .map(|i| {
            let p = &pq[i * d..(i + 1) * d];
            pk.eval(p, p)
        })
        .collect();
    if z_obs.nrows() == 0 {
        return Ok(PosteriorPrediction {
            mean: vec![0.0; m],
            variance: prior_diag,
            covariance: full_covariance.then(|| kernel_matrix(kp, z_query)),
        });
    }
    if y.len() != z_obs.nrows() {
        return Err(Error::Dimension {
            expected: z_obs.nrows(),
            got: y.len(),
        });
    }
    let factor = gram_factor(kp, z_obs)?;
    let k_star = cross_kernel(kp, z_obs, z_query);
    let alpha = factor.chol.solve(&DVector::from_column_slice(y));
    let mean = k_star.tr_mul(&alpha);
    let v = factor
        .chol
        .l_dirty()
        .solve_lower_triangular(&k_star)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let variance = (0..m)
        .map(|j| (prior_diag[j] - v.column(j).norm_squared()).max(0.0))
        .collect();
    let covariance = full_covariance.then(|| kernel_matrix(kp, z_query) - v.tr_mul(&v));
    let mean: Vec<f64> = mean.iter().copied().collect();
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite posterior mean".into()));
    }
    Ok(PosteriorPrediction {
        mean,
        variance,
        covariance,
    })
}

/// `½ yᵀK_n⁻¹y + ½ log|K_n| + (n/2) log 2π`.
pub fn nll_from_features(kp: &KernelParams, z: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    if y.len() != z.nrows() {
        return Err(Error::Dimension {
            expected: z.nrows(),
            got: y.len(),
        });
    }
    let factor = gram_factor(kp, z)?;
    let y = DVector::from_column_slice(y);
    let alpha = factor.chol.solve(&y);
    let value = nll_value(&factor, &y, &alpha);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical("non-finite marginal likelihood".into()))
    }
}

fn nll_value(factor: &GramFactor, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det: f64 = factor.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    0.5 * y.dot(alpha) + 0.5 * log_det + 0.5 * n * (2.0 * PI).ln()
}

/// Value, kernel-parameter gradient (kernel flat order) and feature
/// gradient (`n × D`) of the negative log marginal likelihood.
pub fn nll_grad_from_features(kp: &KernelParams, z: &DMatrix<f64>, y: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
    let n = z.nrows();
    if y.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: y.len(),
        });
    }
    let factor = gram_factor(kp, z)?;
    let yv = DVector::from_column_slice(y);
    let alpha = factor.chol.solve(&yv);
    let value = nll_value(&factor, &yv, &alpha);
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite marginal likelihood".into()));
    }
    // dnll/dK_n = ½ (K_n⁻¹ − ααᵀ)
    let mut g = factor.chol.inverse();
    g.ger(-1.0, &alpha, &alpha, 1.0);
    g *= 0.5;

    let mut grad = vec![0.0; kp.n_params()];
    let trace = g.trace();
    grad[1] = kp.noise_variance() * trace;
    // jitter is proportional to the signal variance
    grad[0] += factor.jitter * trace;

    let (pts, d) = point_major(z);
    let mut gz = vec![0.0; n * d];
    let mut ga = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let pk = kp.prepare();
    let mut scratch = Vec::new();
    for i in 0..n {
        for j in i..n {
            let w = if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] };
            ga.fill(0.0);
            gb.fill(0.0);
            pk.accumulate_grad(
                &pts[i * d..(i + 1) * d],
                &pts[j * d..(j + 1) * d],
                w,
                &mut grad,
                &mut ga,
                &mut gb,
                &mut scratch,
            );
            for k in 0..d {
                gz[i * d + k] += ga[k];
                gz[j * d + k] += gb[k];
            }
        }
    }
    let dz = DMatrix::from_row_slice(n, d, &gz);
    Ok((value, grad, dz))
}
