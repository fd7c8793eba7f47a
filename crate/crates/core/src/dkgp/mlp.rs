use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// One affine layer, `out = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Feature map: rectifier after every layer except the last, which is linear.
/// With no layers the map is the identity on `input_dim` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    /// Input of every layer, `n × in`.
    inputs: Vec<DMatrix<f64>>,
}

impl MlpParams {
    /// Fan-in scaled uniform weights `U(-1/sqrt(in), 1/sqrt(in))`, same for biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let bound = 1.0 / (fan_in as f64).sqrt();
            layers.push(Layer {
                weight: DMatrix::from_fn(w, fan_in, |_, _| rng.random_range(-bound..bound)),
                bias: DVector::from_fn(w, |_, _| rng.random_range(-bound..bound)),
            });
            fan_in = w;
        }
        MlpParams { input_dim, layers }
    }

    pub fn identity(input_dim: usize) -> Self {
        MlpParams {
            input_dim,
            layers: Vec::new(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let input_dim = layers
            .first()
            .map(Layer::input_dim)
            .ok_or_else(|| Error::InvalidArgument("use MlpParams::identity for an empty network".into()))?;
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension {
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Dimension {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(MlpParams { input_dim, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::output_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::output_dim).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat order: per layer, weight row-major then bias.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            for r in 0..l.weight.nrows() {
                out.extend(l.weight.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
    }

    /// Inverse of [`write_params`](Self::write_params); returns the number consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let (rows, cols) = l.weight.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weight[(r, c)] = src[k];
                    k += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = src[k];
                k += 1;
            }
        }
        k
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// Forward pass of a single input.
    pub fn feature_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.forward(&m)?.row(0).iter().copied().collect())
    }

    /// Forward pass of `n × input_dim` rows.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.forward_cached(x).map(|(z, _)| z)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            let mut a = &h * l.weight.transpose();
            for mut row in a.row_iter_mut() {
                row += l.bias.transpose();
            }
            if i < last {
                a.apply(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, a));
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Backpropagate `d_out` (`n × output_dim`) to parameter gradients in
    /// [`write_params`](Self::write_params) order.
    pub fn backward(&self, cache: &ForwardCache, d_out: DMatrix<f64>) -> Vec<f64> {
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let dw = delta.transpose() * input;
            let db = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            grads.push((dw, db));
            if i > 0 {
                let mut d_in = &delta * &l.weight;
                // input of layer i is the rectified output of layer i-1
                d_in.zip_apply(input, |d, h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = d_in;
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.n_params());
        for (dw, db) in grads {
            for r in 0..dw.nrows() {
                out.extend(dw.row(r).iter());
            }
            out.extend(db.iter());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_maps_to_zero() {
        let mut mlp = MlpParams::init(3, &[4, 2], &mut ChaCha8Rng::seed_from_u64(0));
        let n = mlp.n_params();
        mlp.read_params(&vec![0.0; n]);
        assert_eq!(mlp.feature_map(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mlp = MlpParams::from_layers(vec![Layer {
            weight: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        }])
        .unwrap();
        assert_eq!(mlp.feature_map(&[0.5, 1.0, 2.0]).unwrap(), vec![0.5, 1.0, 2.0]);
        assert_eq!(
            MlpParams::identity(2).feature_map(&[-1.0, 4.0]).unwrap(),
            vec![-1.0, 4.0]
        );
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = MlpParams::init(2, &[3, 3], &mut rng);
        let x = [0.7, -0.2];
        // independent loop-based evaluation
        let l0 = &mlp.layers()[0];
        let l1 = &mlp.layers()[1];
        let mut h = [0.0; 3];
        for r in 0..3 {
            let mut s = l0.bias[r];
            for c in 0..2 {
                s += l0.weight[(r, c)] * x[c];
            }
            h[r] = if s > 0.0 { s } else { 0.0 };
        }
        let mut z = [0.0; 3];
        for r in 0..3 {
            let mut s = l1.bias[r];
            for c in 0..3 {
                s += l1.weight[(r, c)] * h[c];
            }
            z[r] = s;
        }
        let got = mlp.feature_map(&x).unwrap();
        for (a, b) in got.iter().zip(z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mlp = MlpParams::init(2, &[3], &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(mlp.feature_map(&[1.0]), Err(Error::Dimension { .. })));
        let bad = MlpParams::from_layers(vec![
            Layer {
                weight: DMatrix::zeros(3, 2),
                bias: DVector::zeros(3),
            },
            Layer {
                weight: DMatrix::zeros(2, 4),
                bias: DVector::zeros(2),
            },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpParams::init(4, &[5, 3], &mut rng);
        let mut flat = Vec::new();
        mlp.write_params(&mut flat);
        assert_eq!(flat.len(), mlp.n_params());
        let mut other = MlpParams::init(4, &[5, 3], &mut rng);
        assert_eq!(other.read_params(&flat), flat.len());
        assert_eq!(other, mlp);
    }
}
