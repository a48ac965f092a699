use ndarray::{Array1, Array2, Zip};

use super::mlp::{Gradients, MlpNetwork};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    weights: Array2<f64>,
    biases: Array1<f64>,
}

/// First-order optimizer. Adam moments are allocated lazily on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first: Vec<Moments>,
    second: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn apply(&mut self, net: &mut MlpNetwork, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::Dimension {
                expected: net.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (l, g) in net.layers.iter().zip(&grads.layers) {
            if l.weights.dim() != g.weights.dim() || l.biases.len() != g.biases.len() {
                return Err(Error::Dimension {
                    expected: l.num_params(),
                    got: g.weights.len() + g.biases.len(),
                });
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    l.weights.scaled_add(-lr, &g.weights);
                    l.biases.scaled_add(-lr, &g.biases);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    let zeros = |net: &MlpNetwork| {
                        net.layers
                            .iter()
                            .map(|l| Moments {
                                weights: Array2::zeros(l.weights.raw_dim()),
                                biases: Array1::zeros(l.biases.raw_dim()),
                            })
                            .collect::<Vec<_>>()
                    };
                    self.first = zeros(net);
                    self.second = zeros(net);
                }
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                };
                for (((l, g), m), v) in net
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    Zip::from(&mut l.weights)
                        .and(&g.weights)
                        .and(&mut m.weights)
                        .and(&mut v.weights)
                        .for_each(|p, &g, m, v| update(p, g, m, v));
                    Zip::from(&mut l.biases)
                        .and(&g.biases)
                        .and(&mut m.biases)
                        .and(&mut v.biases)
                        .for_each(|p, &g, m, v| update(p, g, m, v));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpConfig;

    fn scalar_net() -> MlpNetwork {
        let mut net = MlpNetwork::new(MlpConfig::new(1, vec![1], 1)).unwrap();
        for l in &mut net.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        net
    }

    fn unit_grads(net: &MlpNetwork, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(net);
        for l in &mut g.layers {
            l.weights.fill(value);
            l.biases.fill(value);
        }
        g
    }

    #[test]
    fn sgd_step() {
        let mut net = scalar_net();
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let g = unit_grads(&net, 1.0);
        opt.apply(&mut net, &g).unwrap();
        assert!(net.params_flat().iter().all(|&p| (p + 0.1).abs() < 1e-15));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut net = MlpNetwork::new(MlpConfig::new(2, vec![3], 2).with_seed(4)).unwrap();
        let before = net.params_flat();
        let mut opt = Optimizer::sgd(0.5).unwrap();
        let g = Gradients::zeros_like(&net);
        opt.apply(&mut net, &g).unwrap();
        assert_eq!(before, net.params_flat());
    }

    #[test]
    fn adam_first_step() {
        // m̂ = g, v̂ = g² after bias correction, so the step is lr·g/(|g| + ε).
        let mut net = scalar_net();
        let mut opt = Optimizer::adam(1e-3).unwrap();
        let g = unit_grads(&net, 1.0);
        opt.apply(&mut net, &g).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        for p in net.params_flat() {
            assert!((p - expected).abs() < 1e-15, "{p}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut net = scalar_net();
        let other = MlpNetwork::new(MlpConfig::new(2, vec![3], 1)).unwrap();
        let mut opt = Optimizer::adam(1e-3).unwrap();
        assert!(opt.apply(&mut net, &Gradients::zeros_like(&other)).is_err());
    }

    #[test]
    fn non_positive_learning_rate_rejected() {
        assert!(Optimizer::sgd(0.0).is_err());
        assert!(Optimizer::adam(-1.0).is_err());
    }
}
