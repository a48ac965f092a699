use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};

use super::RandomState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Topology and regularization of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Probability of keeping a hidden unit. `1.0` disables dropout.
    pub dropout_keep_prob: f64,
    /// L2 coefficient added as `λ·w` to every weight gradient (biases are not decayed).
    pub weight_decay: f64,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
            dropout_keep_prob: 1.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_keep_prob(mut self, keep: f64) -> Self {
        self.dropout_keep_prob = keep;
        self
    }

    pub fn with_weight_decay(mut self, lambda: f64) -> Self {
        self.weight_decay = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(
                "input and output dimensions must be positive".into(),
            ));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability {} outside (0, 1]",
                self.dropout_keep_prob
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.output_dim))
        {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_keep_prob < 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Row-major `out × in`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((fan_out, fan_in)),
            biases: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    fn affine(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weights.t());
        z += &self.biases;
        z
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout masks applied, activations cached for `backward`.
    Train,
    /// Deterministic evaluation: no masks.
    Eval,
    /// Evaluation with dropout masks, as used by Monte Carlo dropout.
    StochasticEval,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    activation: Array2<f64>,
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    hidden: Vec<LayerCache>,
    last_hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

/// Gradients of a scalar loss with respect to every parameter, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.raw_dim()),
                })
                .collect(),
        }
    }

    /// Flattened in the same order as [`MlpNetwork::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.biases.iter().copied());
        }
        out
    }
}

/// Feed-forward network with tanh hidden layers and a linear output layer.
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    config: MlpConfig,
    pub layers: Vec<DenseLayer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for MlpNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

impl MlpNetwork {
    /// Glorot-uniform weights, zero biases. Depends only on `(seed, layer dims)`.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomState::seed_from_u64(config.seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.random_range(-limit..limit)
                });
                DenseLayer {
                    weights,
                    biases: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpNetwork {
            config,
            layers,
            cache: None,
        })
    }

    /// Assemble a network from explicit layers, checking shapes against `config`.
    pub fn from_layers(config: MlpConfig, layers: Vec<DenseLayer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::Dimension {
                expected: dims.len(),
                got: layers.len(),
            });
        }
        for ((fan_in, fan_out), layer) in dims.iter().zip(&layers) {
            if layer.weights.dim() != (*fan_out, *fan_in) {
                return Err(Error::Dimension {
                    expected: fan_out * fan_in,
                    got: layer.weights.len(),
                });
            }
            if layer.biases.len() != *fan_out {
                return Err(Error::Dimension {
                    expected: *fan_out,
                    got: layer.biases.len(),
                });
            }
        }
        Ok(MlpNetwork {
            config,
            layers,
            cache: None,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.biases.iter().copied());
        }
        out
    }

    /// Mutable reference to the `idx`-th parameter in [`Self::params_flat`] order.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if idx < nw {
                let cols = l.weights.ncols();
                return &mut l.weights[[idx / cols, idx % cols]];
            }
            idx -= nw;
            if idx < l.biases.len() {
                return &mut l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.biases.iter().all(|b| b.is_finite())
        })
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward a single input vector.
    pub fn forward(
        &self,
        x: &[f64],
        mode: ForwardMode,
        rng: Option<&mut RandomState>,
    ) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let out = self.forward_batch(view, mode, rng)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Deterministic evaluation of a single input.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, ForwardMode::Eval, None)
    }

    /// Forward a batch of inputs (one row per sample) without caching.
    ///
    /// `Train` and `StochasticEval` need an rng whenever dropout is enabled.
    pub fn forward_batch(
        &self,
        x: ArrayView2<f64>,
        mode: ForwardMode,
        rng: Option<&mut RandomState>,
    ) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        self.propagate(x, mode, rng, None)
    }

    /// Training forward pass; caches activations for the next [`Self::backward`].
    pub fn forward_train(
        &mut self,
        x: ArrayView2<f64>,
        rng: Option<&mut RandomState>,
    ) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut cache = ForwardCache {
            hidden: Vec::with_capacity(self.layers.len() - 1),
            last_hidden: Array2::zeros((0, 0)),
        };
        let out = self.propagate(x, ForwardMode::Train, rng, Some(&mut cache))?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn propagate(
        &self,
        x: ArrayView2<f64>,
        mode: ForwardMode,
        mut rng: Option<&mut RandomState>,
        mut cache: Option<&mut ForwardCache>,
    ) -> Result<Array2<f64>> {
        let keep = self.config.dropout_keep_prob;
        let masked = keep < 1.0 && mode != ForwardMode::Eval;
        if masked && rng.is_none() {
            return Err(Error::Argument("dropout requires a random state".into()));
        }
        let (hidden, output) = self.layers.split_at(self.layers.len() - 1);
        let mut h = x.to_owned();
        for layer in hidden {
            let mut a = layer.affine(&h.view());
            a.mapv_inplace(f64::tanh);
            let mask = if masked {
                let rng = rng.as_deref_mut().expect("checked above");
                let scale = 1.0 / keep;
                Some(Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                }))
            } else {
                None
            };
            let next = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            if let Some(c) = cache.as_deref_mut() {
                c.hidden.push(LayerCache {
                    input: h,
                    activation: a,
                    mask,
                });
            }
            h = next;
        }
        let out = output[0].affine(&h.view());
        if let Some(c) = cache {
            c.last_hidden = h;
        }
        Ok(out)
    }

    /// Backpropagate `grad_output` (dLoss/dOutput for the cached batch, one row per sample).
    ///
    /// Consumes the cache left by [`Self::forward_train`]. Weight decay `λ·w` is added to each
    /// weight gradient.
    pub fn backward(&mut self, grad_output: ArrayView2<f64>) -> Result<Gradients> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::State("backward called without a cached training forward pass".into())
        })?;
        if grad_output.ncols() != self.config.output_dim
            || grad_output.nrows() != cache.last_hidden.nrows()
        {
            return Err(Error::Dimension {
                expected: self.config.output_dim,
                got: grad_output.ncols(),
            });
        }
        let lambda = self.config.weight_decay;
        let n_layers = self.layers.len();
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(n_layers);

        let out_layer = &self.layers[n_layers - 1];
        grads.push(LayerGrad {
            weights: grad_output.t().dot(&cache.last_hidden),
            biases: grad_output.sum_axis(Axis(0)),
        });
        let mut delta = grad_output.dot(&out_layer.weights);

        for (layer, lc) in self.layers[..n_layers - 1].iter().zip(&cache.hidden).rev() {
            if let Some(m) = &lc.mask {
                delta *= m;
            }
            Zip::from(&mut delta)
                .and(&lc.activation)
                .for_each(|d, &a| *d *= 1.0 - a * a);
            grads.push(LayerGrad {
                weights: delta.t().dot(&lc.input),
                biases: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&layer.weights);
        }
        grads.reverse();

        if lambda > 0.0 {
            for (g, l) in grads.iter_mut().zip(&self.layers) {
                g.weights.scaled_add(lambda, &l.weights);
            }
        }
        Ok(Gradients { layers: grads })
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config(seed: u64) -> MlpConfig {
        MlpConfig::new(3, vec![5, 4], 2).with_seed(seed)
    }

    #[test]
    fn parameter_count_matches_topology() {
        let net = MlpNetwork::new(MlpConfig::new(2, vec![256, 256], 60).with_seed(7)).unwrap();
        assert_eq!(
            net.num_params(),
            2 * 256 + 256 + 256 * 256 + 256 + 256 * 60 + 60
        );
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpNetwork::new(small_config(11)).unwrap();
        let b = MlpNetwork::new(small_config(11)).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        let c = MlpNetwork::new(small_config(12)).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(
            MlpNetwork::new(MlpConfig::new(2, vec![], 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            MlpNetwork::new(MlpConfig::new(0, vec![4], 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            MlpNetwork::new(MlpConfig::new(2, vec![4, 0], 1)),
            Err(Error::Config(_))
        ));
        assert!(MlpNetwork::new(MlpConfig::new(2, vec![4], 1).with_keep_prob(0.0)).is_err());
        assert!(MlpNetwork::new(MlpConfig::new(2, vec![4], 1).with_weight_decay(-1.0)).is_err());
    }

    #[test]
    fn zero_weights_propagate_biases_through_tanh() {
        let mut net = MlpNetwork::new(MlpConfig::new(2, vec![3], 1)).unwrap();
        for l in &mut net.layers {
            l.weights.fill(0.0);
        }
        net.layers[0].biases = array![0.5, -1.0, 2.0];
        net.layers[1].biases = array![0.25];
        net.layers[1].weights = array![[1.0, 1.0, 1.0]];
        let out = net.eval(&[3.0, -7.0]).unwrap();
        let expected = 0.5f64.tanh() + (-1.0f64).tanh() + 2.0f64.tanh() + 0.25;
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn keep_prob_one_train_equals_eval() {
        let net = MlpNetwork::new(small_config(3)).unwrap();
        let mut rng = RandomState::seed_from_u64(1);
        let x = [0.1, -0.4, 0.9];
        let train = net.forward(&x, ForwardMode::Train, Some(&mut rng)).unwrap();
        let eval = net.eval(&x).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn stochastic_eval_is_seed_deterministic() {
        let net = MlpNetwork::new(small_config(3).with_keep_prob(0.8)).unwrap();
        let x = [0.1, -0.4, 0.9];
        let a = net
            .forward(
                &x,
                ForwardMode::StochasticEval,
                Some(&mut RandomState::seed_from_u64(9)),
            )
            .unwrap();
        let b = net
            .forward(
                &x,
                ForwardMode::StochasticEval,
                Some(&mut RandomState::seed_from_u64(9)),
            )
            .unwrap();
        assert_eq!(a, b);
        // eval with dropout configured stays a pure function of (net, x)
        assert_eq!(net.eval(&x).unwrap(), net.eval(&x).unwrap());
        assert!(net.forward(&x, ForwardMode::StochasticEval, None).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = MlpNetwork::new(small_config(0)).unwrap();
        assert!(matches!(
            net.eval(&[1.0, 2.0]),
            Err(Error::Dimension {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut net = MlpNetwork::new(small_config(0)).unwrap();
        let g = Array2::zeros((1, 2));
        assert!(matches!(net.backward(g.view()), Err(Error::State(_))));
    }

    #[test]
    fn output_weight_gradient_of_linear_readout_equals_input() {
        // loss = output[0]; the gradient of output-layer weight (0, j) is the j-th hidden activation.
        let mut net = MlpNetwork::new(small_config(5)).unwrap();
        let x = array![[0.3, -0.2, 0.7]];
        net.forward_train(x.view(), None).unwrap();
        let mut go = Array2::zeros((1, 2));
        go[[0, 0]] = 1.0;
        let grads = net.backward(go.view()).unwrap();
        let mut h = x.clone();
        for l in &net.layers[..2] {
            h = (h.dot(&l.weights.t()) + &l.biases).mapv(f64::tanh);
        }
        for j in 0..4 {
            assert!((grads.layers[2].weights[[0, j]] - h[[0, j]]).abs() < 1e-15);
            assert_eq!(grads.layers[2].weights[[1, j]], 0.0);
        }
    }

    #[test]
    fn weight_decay_adds_lambda_w() {
        let x = array![[0.3, -0.2, 0.7], [1.0, 0.5, -0.5]];
        let go = array![[0.4, -1.0], [0.2, 0.3]];
        let mut plain = MlpNetwork::new(small_config(8)).unwrap();
        let mut decayed = MlpNetwork::new(small_config(8).with_weight_decay(0.3)).unwrap();
        plain.forward_train(x.view(), None).unwrap();
        decayed.forward_train(x.view(), None).unwrap();
        let g0 = plain.backward(go.view()).unwrap();
        let g1 = decayed.backward(go.view()).unwrap();
        for ((a, b), l) in g0.layers.iter().zip(&g1.layers).zip(&plain.layers) {
            let diff = &b.weights - &a.weights - &l.weights * 0.3;
            assert!(diff.iter().all(|d| d.abs() < 1e-14));
            assert_eq!(a.biases, b.biases);
        }
    }

    /// `Σ c ⊙ f(x)` under a fixed dropout mask.
    fn readout(net: &mut MlpNetwork, x: &Array2<f64>, c: &Array2<f64>, mask_seed: u64) -> f64 {
        let mut rng = RandomState::seed_from_u64(mask_seed);
        let out = net.forward_train(x.view(), Some(&mut rng)).unwrap();
        net.clear_cache();
        (&out * c).sum()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_central_differences(
            dims in proptest::collection::vec(1usize..=8, 4),
            seed in 0u64..1000,
            keep in proptest::prop_oneof![proptest::strategy::Just(1.0), 0.6f64..0.95],
            decay in proptest::prop_oneof![proptest::strategy::Just(0.0), 0.0f64..0.1],
        ) {
            let cfg = MlpConfig::new(dims[0], vec![dims[1], dims[2]], dims[3])
                .with_seed(seed)
                .with_keep_prob(keep)
                .with_weight_decay(decay);
            let mut net = MlpNetwork::new(cfg).unwrap();
            let mut rng = RandomState::seed_from_u64(seed + 1);
            let x = Array2::from_shape_simple_fn((3, dims[0]), || rng.random_range(-1.0..1.0));
            let c = Array2::from_shape_simple_fn((3, dims[3]), || rng.random_range(-1.0..1.0));
            let mut mask_rng = RandomState::seed_from_u64(seed + 2);
            net.forward_train(x.view(), Some(&mut mask_rng)).unwrap();
            let analytic = net.backward(c.view()).unwrap().flat();
            let h = 1e-5;
            let n = net.num_params();
            for _ in 0..100 {
                let i = rng.random_range(0..n);
                let w0 = *net.param_mut(i);
                *net.param_mut(i) = w0 + h;
                let up = readout(&mut net, &x, &c, seed + 2);
                *net.param_mut(i) = w0 - h;
                let down = readout(&mut net, &x, &c, seed + 2);
                *net.param_mut(i) = w0;
                let decay_term = if i_is_weight(&net, i) { decay * w0 } else { 0.0 };
                let numeric = (up - down) / (2.0 * h) + decay_term;
                let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
                proptest::prop_assert!(err < 1e-4, "param {i}: {} vs {numeric}", analytic[i]);
            }
        }
    }

    fn i_is_weight(net: &MlpNetwork, mut idx: usize) -> bool {
        for l in &net.layers {
            if idx < l.weights.len() {
                return true;
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return false;
            }
            idx -= l.biases.len();
        }
        unreachable!()
    }

    #[test]
    fn parameters_stay_finite_over_many_updates() {
        let mut net = MlpNetwork::new(
            MlpConfig::new(3, vec![8, 8], 2)
                .with_seed(1)
                .with_keep_prob(0.8),
        )
        .unwrap();
        let mut opt = crate::nn::Optimizer::adam(1e-2).unwrap();
        let mut rng = RandomState::seed_from_u64(2);
        for _ in 0..10_000 {
            let x = Array2::from_shape_simple_fn((8, 3), || rng.random_range(-1.0..1.0));
            let t = Array2::from_shape_simple_fn((8, 2), || rng.random_range(-5.0..5.0));
            let out = net.forward_train(x.view(), Some(&mut rng)).unwrap();
            let grad = (&out - &t) * (2.0 / 8.0);
            let g = net.backward(grad.view()).unwrap();
            opt.apply(&mut net, &g).unwrap();
        }
        assert!(net.is_finite());
        assert_eq!(opt.step_count(), 10_000);
    }
}
