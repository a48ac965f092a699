//! Trained model files: an MDN or a squared-loss regressor around an MLP block.
//!
//! ```text
//! model mdn
//! num_mixtures <K>
//! output_dim <d>
//! sigma_max <s>
//! nll_epsilon <ε>
//! mlp v1
//! ...
//! ```
//!
//! A regressor file is `model regnet` followed directly by the MLP block.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};

use crate::data::{TargetScaling, TrainingSet};
use crate::error::{Error, Result};
use crate::mdn::{MdnConfig, MdnNetwork};
use crate::nn::{read_mlp_from, write_mlp, MlpConfig, MlpNetwork, TokenLines};
use crate::train::{fit, BatchLoss, LossTrace, TrainSchedule};

/// Plain MLP regressor trained with mean squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct RegNet {
    pub mlp: MlpNetwork,
}

struct SquaredError;

impl BatchLoss for SquaredError {
    fn loss_and_grad(
        &self,
        raw: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>)> {
        if raw.dim() != targets.dim() {
            return Err(Error::Dimension {
                expected: raw.ncols(),
                got: targets.ncols(),
            });
        }
        let n = raw.nrows() as f64;
        let mut grad = Array2::zeros(raw.raw_dim());
        let mut loss = 0.0;
        Zip::from(&mut grad)
            .and(raw)
            .and(targets)
            .for_each(|g, &p, &t| {
                let e = p - t;
                loss += e * e;
                *g = 2.0 * e / n;
            });
        Ok((loss / n, grad))
    }
}

/// Mean over rows of the squared Euclidean error.
pub fn squared_error(pred: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    Ok(SquaredError.loss_and_grad(pred, targets)?.0)
}

impl RegNet {
    pub fn new(cfg: MlpConfig) -> Result<Self> {
        Ok(RegNet {
            mlp: MlpNetwork::new(cfg)?,
        })
    }

    /// Rewrite the output layer so predictions are `y·s + shift`.
    pub fn fold_target_scaling(&mut self, scaling: &TargetScaling) -> Result<()> {
        let last = self.mlp.layers.last_mut().expect("at least one layer");
        if scaling.shift.len() != last.biases.len() {
            return Err(Error::Dimension {
                expected: last.biases.len(),
                got: scaling.shift.len(),
            });
        }
        last.weights.mapv_inplace(|w| w * scaling.scale);
        for (b, m) in last.biases.iter_mut().zip(&scaling.shift) {
            *b = *b * scaling.scale + m;
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.eval(x)
    }

    pub fn mean_squared_error(&self, data: &TrainingSet) -> Result<f64> {
        let pred =
            self.mlp
                .forward_batch(data.inputs().view(), crate::nn::ForwardMode::Eval, None)?;
        squared_error(pred.view(), data.targets().view())
    }

    pub fn train(&mut self, data: &TrainingSet, schedule: &TrainSchedule) -> Result<LossTrace> {
        if data.target_dim() != self.mlp.output_dim() {
            return Err(Error::Dimension {
                expected: self.mlp.output_dim(),
                got: data.target_dim(),
            });
        }
        fit(&mut self.mlp, data, schedule, &SquaredError)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mdn(MdnNetwork),
    Reg(RegNet),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Mdn(_) => "mdn",
            Model::Reg(_) => "regnet",
        }
    }

    pub fn mlp(&self) -> &MlpNetwork {
        match self {
            Model::Mdn(n) => &n.mlp,
            Model::Reg(n) => &n.mlp,
        }
    }

    pub fn as_mdn(&self) -> Option<&MdnNetwork> {
        match self {
            Model::Mdn(n) => Some(n),
            Model::Reg(_) => None,
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        match self {
            Model::Mdn(net) => {
                writeln!(w, "model mdn")?;
                writeln!(w, "num_mixtures {}", net.head.num_mixtures)?;
                writeln!(w, "output_dim {}", net.head.output_dim)?;
                writeln!(w, "sigma_max {:e}", net.head.sigma_max)?;
                writeln!(w, "nll_epsilon {:e}", net.head.nll_epsilon)?;
                write_mlp(&net.mlp, w)
            }
            Model::Reg(net) => {
                writeln!(w, "model regnet")?;
                write_mlp(&net.mlp, w)
            }
        }
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = TokenLines::new(r);
        let kind: String = lines.expect_single("model")?;
        match kind.as_str() {
            "mdn" => {
                let head = MdnConfig {
                    num_mixtures: lines.expect_single("num_mixtures")?,
                    output_dim: lines.expect_single("output_dim")?,
                    sigma_max: lines.expect_single("sigma_max")?,
                    nll_epsilon: lines.expect_single("nll_epsilon")?,
                };
                head.validate()
                    .map_err(|e| Error::parse(lines.line_no(), e.to_string()))?;
                let mlp = read_mlp_from(&mut lines)?;
                Ok(Model::Mdn(MdnNetwork::from_parts(mlp, head)?))
            }
            "regnet" => Ok(Model::Reg(RegNet {
                mlp: read_mlp_from(&mut lines)?,
            })),
            other => Err(Error::parse(
                lines.line_no(),
                format!("unknown model kind `{other}`"),
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
