use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Paired inputs and targets, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

impl TrainingSet {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Argument(
                "training set must contain at least one sample".into(),
            ));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Dimension {
                expected: inputs.nrows(),
                got: targets.nrows(),
            });
        }
        if inputs.ncols() == 0 || targets.ncols() == 0 {
            return Err(Error::Argument(
                "inputs and targets need at least one column".into(),
            ));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument(
                "training set contains non-finite entries".into(),
            ));
        }
        Ok(TrainingSet { inputs, targets })
    }

    /// Build from row slices; every row must have the same width.
    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let to_array = |rows: &[Vec<f64>]| -> Result<Array2<f64>> {
            let width = rows.first().map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(rows.len() * width);
            for r in rows {
                if r.len() != width {
                    return Err(Error::Dimension {
                        expected: width,
                        got: r.len(),
                    });
                }
                flat.extend_from_slice(r);
            }
            Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("shape checked"))
        };
        Self::new(to_array(inputs)?, to_array(targets)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn sample(&self, i: usize) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        (self.inputs.row(i), self.targets.row(i))
    }

    /// Gather rows by index into a new set (used for minibatches and subsampling).
    pub fn select(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            inputs: self.inputs.select(ndarray::Axis(0), idx),
            targets: self.targets.select(ndarray::Axis(0), idx),
        }
    }
}

/// Per-column shift and one common scale: `y' = (y − shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScaling {
    pub shift: Vec<f64>,
    pub scale: f64,
}

impl TargetScaling {
    /// Column means, and the root of the mean column variance (1 if the targets are constant).
    pub fn fit(data: &TrainingSet) -> Self {
        let t = data.targets();
        let shift = t.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec();
        let var = t.var_axis(ndarray::Axis(0), 0.0).mean().unwrap_or(0.0);
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        TargetScaling { shift, scale }
    }

    pub fn apply(&self, data: &TrainingSet) -> Result<TrainingSet> {
        if self.shift.len() != data.target_dim() {
            return Err(Error::Dimension {
                expected: data.target_dim(),
                got: self.shift.len(),
            });
        }
        let mut targets = data.targets().clone();
        for mut row in targets.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.shift) {
                *v = (*v - m) / self.scale;
            }
        }
        TrainingSet::new(data.inputs().clone(), targets)
    }
}


#[cfg(test)]
mod scaling_tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scaled_targets_are_centered_with_unit_mean_variance() {
        let set = TrainingSet::new(
            array![[0.0], [1.0], [2.0], [3.0]],
            array![[1.0, 10.0], [3.0, 10.0], [1.0, 14.0], [3.0, 14.0]],
        )
        .unwrap();
        let s = TargetScaling::fit(&set);
        assert_eq!(s.shift, vec![2.0, 12.0]);
        // column variances 1 and 4
        assert!((s.scale - 2.5f64.sqrt()).abs() < 1e-15);
        let t = s.apply(&set).unwrap();
        let mean_var = t.targets().var_axis(ndarray::Axis(0), 0.0).mean().unwrap();
        assert!((mean_var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_targets_keep_unit_scale() {
        let set = TrainingSet::new(array![[0.0], [1.0]], array![[5.0], [5.0]]).unwrap();
        assert_eq!(
            TargetScaling::fit(&set),
            TargetScaling {
                shift: vec![5.0],
                scale: 1.0
            }
        );
    }
}
