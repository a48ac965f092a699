use ndarray::{Array2, ArrayView2};

use super::head::{head_transform, nll_loss, GmmParams, MdnConfig};
use crate::data::{TargetScaling, TrainingSet};
use crate::error::{Error, Result};
use crate::nn::{ForwardMode, MlpConfig, MlpNetwork, RandomState};
use crate::train::{fit, BatchLoss, LossTrace, TrainSchedule};

/// MAP prediction: parameters of the mixture component with the largest weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mixture_index: usize,
}

impl MapPrediction {
    pub fn from_gmm(g: &GmmParams) -> Self {
        let j = g.map_index();
        MapPrediction {
            mean: g.means.row(j).to_vec(),
            variance: g.variances.row(j).to_vec(),
            mixture_index: j,
        }
    }
}

/// An MLP whose raw output parameterizes a diagonal Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnNetwork {
    pub mlp: MlpNetwork,
    pub head: MdnConfig,
}

struct Nll<'a>(&'a MdnConfig);

impl BatchLoss for Nll<'_> {
    fn loss_and_grad(
        &self,
        raw: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>)> {
        let out = nll_loss(raw, targets, self.0)?;
        Ok((out.loss, out.grad))
    }
}

impl MdnNetwork {
    /// `mlp.output_dim` is overwritten with the head's raw dimension.
    pub fn new(mut mlp: MlpConfig, head: MdnConfig) -> Result<Self> {
        head.validate()?;
        mlp.output_dim = head.raw_dim();
        Ok(MdnNetwork {
            mlp: MlpNetwork::new(mlp)?,
            head,
        })
    }

    pub fn from_parts(mlp: MlpNetwork, head: MdnConfig) -> Result<Self> {
        head.validate()?;
        if mlp.output_dim() != head.raw_dim() {
            return Err(Error::Dimension {
                expected: head.raw_dim(),
                got: mlp.output_dim(),
            });
        }
        Ok(MdnNetwork { mlp, head })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim
    }

    pub fn num_mixtures(&self) -> usize {
        self.head.num_mixtures
    }

    /// Mixture for one input, one deterministic forward pass.
    pub fn gmm(&self, x: &[f64]) -> Result<GmmParams> {
        head_transform(&self.mlp.eval(x)?, &self.head)
    }

    /// Mixture under a dropout-masked pass (Monte Carlo dropout).
    pub fn gmm_stochastic(&self, x: &[f64], rng: &mut RandomState) -> Result<GmmParams> {
        head_transform(
            &self
                .mlp
                .forward(x, ForwardMode::StochasticEval, Some(rng))?,
            &self.head,
        )
    }

    pub fn gmm_batch(&self, inputs: ArrayView2<f64>) -> Result<Vec<GmmParams>> {
        let raw = self.mlp.forward_batch(inputs, ForwardMode::Eval, None)?;
        raw.rows()
            .into_iter()
            .map(|r| head_transform(&r.to_vec(), &self.head))
            .collect()
    }

    pub fn predict_map(&self, x: &[f64]) -> Result<MapPrediction> {
        Ok(MapPrediction::from_gmm(&self.gmm(x)?))
    }

    /// Mean NLL of `data` in evaluation mode.
    pub fn mean_nll(&self, data: &TrainingSet) -> Result<f64> {
        self.check_targets(data)?;
        let raw = self
            .mlp
            .forward_batch(data.inputs().view(), ForwardMode::Eval, None)?;
        Ok(nll_loss(raw.view(), data.targets().view(), &self.head)?.loss)
    }

    fn check_targets(&self, data: &TrainingSet) -> Result<()> {
        if data.target_dim() != self.head.output_dim {
            return Err(Error::Dimension {
                expected: self.head.output_dim,
                got: data.target_dim(),
            });
        }
        Ok(())
    }

    /// Rewrite the output layer and `sigma_max` so the mixture is expressed in unscaled target
    /// units: means `μ·s + shift`, variances `Σ·s²`, weights unchanged.
    pub fn fold_target_scaling(&mut self, scaling: &TargetScaling) -> Result<()> {
        let (k, d) = (self.head.num_mixtures, self.head.output_dim);
        if scaling.shift.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: scaling.shift.len(),
            });
        }
        let s = scaling.scale;
        let last = self.mlp.layers.last_mut().expect("at least one layer");
        for j in 0..k {
            for (c, m) in scaling.shift.iter().enumerate() {
                let r = k + j * d + c;
                last.weights.row_mut(r).mapv_inplace(|w| w * s);
                last.biases[r] = last.biases[r] * s + m;
            }
        }
        self.head.sigma_max *= s * s;
        Ok(())
    }

    /// Minibatch NLL training. Returns the mean training loss of every epoch.
    pub fn train(&mut self, data: &TrainingSet, schedule: &TrainSchedule) -> Result<LossTrace> {
        self.check_targets(data)?;
        let head = self.head;
        fit(&mut self.mlp, data, schedule, &Nll(&head))
    }
}
