use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Rng, Tensor};

/// Fully connected layer `y = W x + b`, `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// ReLU hidden layers followed by a linear scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &width in hidden {
            layers.push(Dense {
                weight: Tensor::randn(&[width, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
                bias: Tensor::zeros(&[width]),
            });
            fan_in = width;
        }
        layers.push(Dense {
            weight: Tensor::randn(&[1, fan_in], (1.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[1]),
        });
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(f64, MlpTrace)> {
        if input.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "deep part expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = (0..layer.weight.rows())
                .map(|r| dot(layer.weight.row(r), &x) + layer.bias.data()[r])
                .collect();
            inputs.push(std::mem::take(&mut x));
            if l == last {
                return Ok((z[0], MlpTrace { inputs, pre }));
            }
            x = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
        }
        unreachable!("the output layer always returns")
    }

    /// Returns layer gradients (`[W₀, b₀, W₁, b₁, …]`) and the gradient of the input.
    pub fn backward(&self, trace: &MlpTrace, d_out: f64) -> (Vec<Tensor>, Vec<f64>) {
        let mut grads: Vec<Tensor> = Vec::with_capacity(2 * self.layers.len());
        let mut upstream = vec![d_out];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[l];
            let mut dw = Tensor::zeros(layer.weight.shape());
            let mut d_x = vec![0.0; x.len()];
            for (r, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, x, dw.row_mut(r));
                axpy(g, layer.weight.row(r), &mut d_x);
            }
            grads.push(Tensor::vector(upstream.clone()));
            grads.push(dw);
            if l > 0 {
                let z = &trace.pre[l - 1];
                upstream = d_x
                    .iter()
                    .zip(z)
                    .map(|(&g, &zz)| if zz > 0.0 { g } else { 0.0 })
                    .collect();
            } else {
                upstream = d_x;
            }
        }
        grads.reverse();
        (grads, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let mut mlp = Mlp::new(5, &[4, 3], &mut rng);
            for t in mlp.tensors_mut() {
                let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
                t.add_assign(&noise).unwrap();
            }
            let x = Tensor::randn(&[5], 1.0, &mut rng);
            let (_, trace) = mlp.forward(x.data()).unwrap();
            let (grads, d_x) = mlp.backward(&trace, 1.0);

            let num = finite_diff_grad(|t| mlp.forward(t.data()).unwrap().0, &x, 1e-5).unwrap();
            for (a, n) in d_x.iter().zip(num.data()) {
                assert!(relative_error(*a, *n) <= 1e-4);
            }
            for (k, g) in grads.iter().enumerate() {
                let base = mlp.tensors()[k].clone();
                let num = finite_diff_grad(
                    |t| {
                        let mut m = mlp.clone();
                        *m.tensors_mut()[k] = t.clone();
                        m.forward(x.data()).unwrap().0
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                for (a, n) in g.data().iter().zip(num.data()) {
                    assert!(relative_error(*a, *n) <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut rng = Rng::new(2);
        let mlp = Mlp::new(3, &[2], &mut rng);
        assert!(mlp.forward(&[1.0, 2.0]).is_err());
    }
}
