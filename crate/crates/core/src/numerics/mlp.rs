//! Fully connected tanh network with hand-derived gradients.
//!
//! Parameters are vectorized layer-major: for each layer, the weight matrix
//! (row-major, `out × in`) followed by its bias. Every checkpoint, optimizer
//! state and parameter-delta statistic relies on this order.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{dot, gemm, Matrix, Operand, Vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vector,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Multilayer perceptron: `tanh` between layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward_batch_cached`] for the backward pass.
///
/// `activations[0]` is the input batch and `activations[i + 1]` the output of
/// layer `i` (post-`tanh` for hidden layers).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape {
                    context: "Mlp::new bias",
                    expected: layer.out_dim(),
                    found: layer.bias.len(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::Shape {
                        context: "Mlp::new layer chaining",
                        expected: layer.out_dim(),
                        found: next.in_dim(),
                    });
                }
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases. `sizes` lists every width
    /// including input and output, e.g. `[18, 128, 128, 2]`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Architecture(format!(
                "need input and output widths, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn flatten(&self) -> Vector {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape {
                context: "Mlp::set_params",
                expected: self.num_params(),
                found: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weight.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    fn is_hidden(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vector> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape {
                context: "Mlp::forward input",
                expected: self.in_dim(),
                found: input.len(),
            });
        }
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y: Vector = (0..layer.out_dim())
                .map(|r| dot(layer.weight.row(r), &x) + layer.bias[r])
                .collect();
            if self.is_hidden(i) {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        Ok(x)
    }

    /// Gradient of `⟨output, output_grad⟩` with respect to every parameter
    /// (flattened order) and to the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Vector, Vector)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let g = Matrix::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let cache = self.forward_batch_cached(&x)?;
        let (param_grad, input_grad) = self.backward_batch(&cache, &g)?;
        Ok((param_grad, input_grad.into_vec()))
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        let mut cache = self.forward_batch_cached(input)?;
        Ok(cache.activations.pop().expect("non-empty"))
    }

    /// Batched forward over the rows of `input`, keeping activations.
    pub fn forward_batch_cached(&self, input: &Matrix) -> Result<ForwardCache> {
        if input.cols() != self.in_dim() {
            return Err(Error::Shape {
                context: "Mlp::forward_batch input",
                expected: self.in_dim(),
                found: input.cols(),
            });
        }
        let batch = input.rows();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().expect("non-empty");
            let mut out = Matrix::zeros(batch, layer.out_dim());
            for r in 0..batch {
                out.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(
                batch,
                layer.in_dim(),
                layer.out_dim(),
                Operand::plain(prev),
                Operand::transposed(&layer.weight),
                1.0,
                &mut out,
            );
            if self.is_hidden(i) {
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Batched backward pass. `output_grad` holds one row per batch item;
    /// parameter gradients are summed over the batch.
    pub fn backward_batch(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(Vector, Matrix)> {
        let batch = cache.activations[0].rows();
        if output_grad.shape() != (batch, self.out_dim()) {
            return Err(Error::Shape {
                context: "Mlp::backward_batch output_grad",
                expected: batch * self.out_dim(),
                found: output_grad.rows() * output_grad.cols(),
            });
        }
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::Architecture("forward cache from a different network".into()));
        }

        let mut param_grad = vec![0.0; self.num_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.num_params();
        }

        // Gradient with respect to the current layer's pre-activation.
        let mut delta = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.activations[i];
            let (n_out, n_in) = (layer.out_dim(), layer.in_dim());

            let mut w_grad = Matrix::zeros(n_out, n_in);
            gemm(
                n_out,
                batch,
                n_in,
                Operand::transposed(&delta),
                Operand::plain(input),
                0.0,
                &mut w_grad,
            );
            let start = offsets[i];
            param_grad[start..start + n_out * n_in].copy_from_slice(w_grad.as_slice());
            let bias_grad = &mut param_grad[start + n_out * n_in..start + n_out * n_in + n_out];
            for r in 0..batch {
                for (g, d) in bias_grad.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }

            let mut input_grad = Matrix::zeros(batch, n_in);
            gemm(
                batch,
                n_out,
                n_in,
                Operand::plain(&delta),
                Operand::plain(&layer.weight),
                0.0,
                &mut input_grad,
            );
            if i > 0 {
                // input to layer i is tanh output of layer i-1
                for (g, h) in input_grad.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *g *= 1.0 - h * h;
                }
            }
            delta = input_grad;
        }
        Ok((param_grad, delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(weight: Matrix, bias: Vector) -> Mlp {
        Mlp::new(vec![Layer { weight, bias }]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = linear(Matrix::identity(2), vec![0.0, 0.0]);
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_propagate_bias_chain() {
        let b1 = vec![0.3, -0.7, 1.2];
        let b2 = vec![0.5, 2.0];
        let net = Mlp::new(vec![
            Layer {
                weight: Matrix::zeros(3, 2),
                bias: b1,
            },
            Layer {
                weight: Matrix::zeros(2, 3),
                bias: b2.clone(),
            },
        ])
        .unwrap();
        assert_eq!(net.forward(&[4.0, -1.0]).unwrap(), b2);
    }

    #[test]
    fn rejects_bad_chaining_and_input() {
        let bad = Mlp::new(vec![
            Layer {
                weight: Matrix::zeros(3, 2),
                bias: vec![0.0; 3],
            },
            Layer {
                weight: Matrix::zeros(2, 4),
                bias: vec![0.0; 2],
            },
        ]);
        assert!(matches!(bad, Err(Error::Shape { .. })));
        let net = linear(Matrix::identity(2), vec![0.0; 2]);
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(&[2, 16, 2], &mut rng).unwrap();
        let (pg, ig) = net.backward(&[0.4, -0.2], &[0.0, 0.0]).unwrap();
        assert!(pg.iter().all(|&g| g == 0.0));
        assert!(ig.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let w = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let net = linear(w.clone(), vec![1.0, -1.0]);
        let x = [2.0, -3.0, 0.5];
        let g = [0.7, -1.1];
        let (pg, ig) = net.backward(&x, &g).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((pg[i * 3 + j] - x[j] * g[i]).abs() < 1e-15);
            }
            assert_eq!(pg[6 + i], g[i]);
        }
        for j in 0..3 {
            let expect = w.get(0, j) * g[0] + w.get(1, j) * g[1];
            assert!((ig[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_set_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::random(&[3, 5, 4, 2], &mut rng).unwrap();
        let flat = net.flatten();
        assert_eq!(flat.len(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        let mut other = Mlp::random(&[3, 5, 4, 2], &mut rng).unwrap();
        other.set_params(&flat).unwrap();
        assert_eq!(other, net);
        assert!(other.set_params(&flat[1..]).is_err());
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::random(&[4, 8, 8, 3], &mut rng).unwrap();
        let rows: Vec<Vector> = (0..5)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let batch = net.forward_batch(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let single = net.forward(row).unwrap();
            for (a, b) in single.iter().zip(batch.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
