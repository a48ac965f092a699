use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Mixture head configuration.
///
/// Raw head layout for `K` mixtures of dimension `d` (length `K·(1 + 2d)`):
/// `[π̂_1..π̂_K | μ̂_1 (d) .. μ̂_K (d) | Σ̂_1 (d) .. Σ̂_K (d)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdnConfig {
    pub num_mixtures: usize,
    pub output_dim: usize,
    /// Upper bound of every variance entry.
    pub sigma_max: f64,
    /// Added inside the log of the likelihood.
    pub nll_epsilon: f64,
}

impl MdnConfig {
    pub const DEFAULT_SIGMA_MAX: f64 = 5.0;
    pub const DEFAULT_NLL_EPSILON: f64 = 1e-6;

    pub fn new(num_mixtures: usize, output_dim: usize) -> Self {
        MdnConfig {
            num_mixtures,
            output_dim,
            sigma_max: Self::DEFAULT_SIGMA_MAX,
            nll_epsilon: Self::DEFAULT_NLL_EPSILON,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.num_mixtures * (1 + 2 * self.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_mixtures == 0 || self.output_dim == 0 {
            return Err(Error::Config(
                "mixture count and output dimension must be positive".into(),
            ));
        }
        if !(self.sigma_max > 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max {} must be positive",
                self.sigma_max
            )));
        }
        if !(self.nll_epsilon >= 0.0 && self.nll_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "nll epsilon {} must be nonnegative",
                self.nll_epsilon
            )));
        }
        Ok(())
    }

    fn mean_offset(&self) -> usize {
        self.num_mixtures
    }

    fn var_offset(&self) -> usize {
        self.num_mixtures * (1 + self.output_dim)
    }
}

/// Gaussian mixture with diagonal covariances: weights `K`, means and variances `K × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

impl GmmParams {
    /// Checked constructor: weights on the simplex (to 1e-12), positive variances.
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Argument(
                "mixture needs at least one component".into(),
            ));
        }
        if means.nrows() != k || variances.dim() != means.dim() {
            return Err(Error::Dimension {
                expected: k,
                got: means.nrows(),
            });
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(
                "mixture weights must lie on the simplex".into(),
            ));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite())
            || means.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Argument(
                "variances must be positive and means finite".into(),
            ));
        }
        Ok(GmmParams {
            weights,
            means,
            variances,
        })
    }

    pub fn num_mixtures(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn map_index(&self) -> usize {
        let mut best = 0;
        for (j, &w) in self.weights.iter().enumerate().skip(1) {
            if w > self.weights[best] {
                best = j;
            }
        }
        best
    }

    /// Log density of `y` under the mixture (without ε).
    pub fn log_density(&self, y: ArrayView1<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.num_mixtures())
            .map(|j| {
                self.weights[j].ln() + log_normal_diag(y, self.means.row(j), self.variances.row(j))
            })
            .collect();
        log_sum_exp(&terms)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Keeps variances strictly inside (0, σ_max) when the sigmoid saturates.
const SIGMOID_FLOOR: f64 = f64::EPSILON;
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON;

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_normal_diag(
    y: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    var: ArrayView1<f64>,
) -> f64 {
    let mut acc = 0.0;
    for ((&y, &m), &v) in y.iter().zip(mean.iter()).zip(var.iter()) {
        let r = y - m;
        acc += -0.5 * (2.0 * PI * v).ln() - r * r / (2.0 * v);
    }
    acc
}

/// Log-softmax with the maximum raw logit subtracted.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - max - log_norm).collect()
}

/// Map a raw head vector to mixture parameters: softmax weights, identity means,
/// `σ_max·sigmoid` variances.
pub fn head_transform(raw: &[f64], cfg: &MdnConfig) -> Result<GmmParams> {
    if raw.len() != cfg.raw_dim() {
        return Err(Error::Dimension {
            expected: cfg.raw_dim(),
            got: raw.len(),
        });
    }
    let (k, d) = (cfg.num_mixtures, cfg.output_dim);
    let weights = Array1::from(log_softmax(&raw[..k])).mapv(f64::exp);
    let means = Array2::from_shape_vec((k, d), raw[cfg.mean_offset()..cfg.var_offset()].to_vec())
        .expect("layout");
    let variances = Array2::from_shape_vec((k, d), raw[cfg.var_offset()..].to_vec())
        .expect("layout")
        .mapv(|r| cfg.sigma_max * sigmoid(r).clamp(SIGMOID_FLOOR, SIGMOID_CEIL));
    Ok(GmmParams {
        weights,
        means,
        variances,
    })
}

/// Mean negative log likelihood `−(1/N) Σ_i log(Σ_j π_j N(y_i | μ_j, Σ_j) + ε)` over a batch of raw
/// head outputs, with its gradient with respect to the raw outputs.
#[derive(Debug, Clone)]
pub struct NllOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

pub fn nll_loss(
    raw: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &MdnConfig,
) -> Result<NllOutput> {
    if raw.ncols() != cfg.raw_dim() {
        return Err(Error::Dimension {
            expected: cfg.raw_dim(),
            got: raw.ncols(),
        });
    }
    if targets.ncols() != cfg.output_dim || targets.nrows() != raw.nrows() {
        return Err(Error::Dimension {
            expected: cfg.output_dim,
            got: targets.ncols(),
        });
    }
    let n = raw.nrows();
    let (k, d) = (cfg.num_mixtures, cfg.output_dim);
    let (mo, vo) = (cfg.mean_offset(), cfg.var_offset());
    let log_eps = cfg.nll_epsilon.ln();
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::zeros(raw.raw_dim());
    let mut total = 0.0;
    let mut log_terms = vec![0.0; k];

    for i in 0..n {
        let row = raw.row(i);
        let row = row
            .as_slice()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| row.to_vec());
        let params = head_transform(&row, cfg)?;
        let y = targets.row(i);
        let log_pi = log_softmax(&row[..k]);
        for j in 0..k {
            log_terms[j] =
                log_pi[j] + log_normal_diag(y, params.means.row(j), params.variances.row(j));
        }
        // log(S + ε) as log-add-exp of log S and log ε
        let log_s = log_sum_exp(&log_terms);
        let log_total = if cfg.nll_epsilon > 0.0 {
            log_sum_exp(&[log_s, log_eps])
        } else {
            log_s
        };
        total -= log_total;

        // w_j = π_j N_j / (S + ε); W = Σ w_j
        let w: Vec<f64> = log_terms.iter().map(|t| (t - log_total).exp()).collect();
        let w_sum: f64 = w.iter().sum();
        let mut g = grad.row_mut(i);
        for j in 0..k {
            g[j] = (params.weights[j] * w_sum - w[j]) * inv_n;
            if w[j] == 0.0 {
                continue;
            }
            for c in 0..d {
                let var = params.variances[[j, c]];
                let r = y[c] - params.means[[j, c]];
                g[mo + j * d + c] = -w[j] * r / var * inv_n;
                let s = var / cfg.sigma_max;
                g[vo + j * d + c] = -w[j] * 0.5 * (r * r / var - 1.0) * (1.0 - s) * inv_n;
            }
        }
    }
    Ok(NllOutput {
        loss: total * inv_n,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn cfg(k: usize, d: usize) -> MdnConfig {
        MdnConfig::new(k, d)
    }

    #[test]
    fn raw_dim_layout() {
        assert_eq!(cfg(10, 1).raw_dim(), 30);
        assert_eq!(cfg(3, 2).raw_dim(), 15);
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let p = head_transform(&[0.0; 9], &cfg(3, 1)).unwrap();
        for w in p.weights.iter() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_raw_variance_is_half_sigma_max() {
        let p = head_transform(&[0.0, 1.5, 0.0], &cfg(1, 1)).unwrap();
        assert_eq!(p.variances[[0, 0]], 2.5);
        assert_eq!(p.means[[0, 0]], 1.5);
    }

    #[test]
    fn huge_logit_does_not_overflow() {
        let p = head_transform(&[1000.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg(2, 1)).unwrap();
        assert!(p.weights.iter().all(|w| w.is_finite()));
        assert!((p.weights[0] - 1.0).abs() < 1e-15);
        assert!(p.weights[1] < 1e-300);
    }

    #[test]
    fn map_index_breaks_ties_low() {
        let p = GmmParams::new(
            array![0.2, 0.7, 0.1],
            Array2::zeros((3, 1)),
            Array2::ones((3, 1)),
        )
        .unwrap();
        assert_eq!(p.map_index(), 1);
        let tie = GmmParams::new(
            array![0.4, 0.4, 0.2],
            Array2::zeros((3, 1)),
            Array2::ones((3, 1)),
        )
        .unwrap();
        assert_eq!(tie.map_index(), 0);
    }

    #[test]
    fn standard_normal_at_mode() {
        // K=1, d=1, μ = y, Σ = 1 (raw = logit(1/5)), ε = 0
        let mut c = cfg(1, 1);
        c.nll_epsilon = 0.0;
        let raw_var = (0.2f64 / 0.8).ln();
        let out = nll_loss(array![[0.0, 0.7, raw_var]].view(), array![[0.7]].view(), &c).unwrap();
        let expected = 0.5 * (2.0 * PI).ln();
        assert!((out.loss - expected).abs() < 1e-12, "{}", out.loss);
        assert!((expected - 0.9189385332).abs() < 1e-9);
    }

    #[test]
    fn epsilon_caps_loss() {
        // target far from every mixture: the density underflows and the loss saturates at −ln ε
        let c = cfg(2, 1);
        let raw = array![[0.0, 0.0, -50.0, 50.0, -10.0, -10.0]];
        let out = nll_loss(raw.view(), array![[1e6]].view(), &c).unwrap();
        assert!(out.loss <= -(1e-6f64).ln() + 1e-12);
        assert!((out.loss - 13.815510557964274).abs() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let c = cfg(2, 1);
        assert!(head_transform(&[0.0; 5], &c).is_err());
        assert!(nll_loss(
            Array2::zeros((2, 6)).view(),
            Array2::zeros((3, 1)).view(),
            &c
        )
        .is_err());
    }

    /// Central-difference oracle on the raw head outputs.
    #[test]
    fn nll_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = crate::nn::RandomState::seed_from_u64(17);
        for (k, d) in [(1, 1), (3, 2), (2, 3)] {
            let c = cfg(k, d);
            let n = 4;
            let raw =
                Array2::from_shape_simple_fn((n, c.raw_dim()), || rng.random_range(-1.5..1.5));
            let y = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
            let analytic = nll_loss(raw.view(), y.view(), &c).unwrap().grad;
            let h = 1e-5;
            for i in 0..n {
                for p in 0..c.raw_dim() {
                    let mut plus = raw.clone();
                    plus[[i, p]] += h;
                    let mut minus = raw.clone();
                    minus[[i, p]] -= h;
                    let fd = (nll_loss(plus.view(), y.view(), &c).unwrap().loss
                        - nll_loss(minus.view(), y.view(), &c).unwrap().loss)
                        / (2.0 * h);
                    let a = analytic[[i, p]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "k={k} d={d} i={i} p={p}: analytic {a} fd {fd}");
                }
            }
        }
    }

    #[test]
    fn nll_is_invariant_to_mixture_relabeling() {
        let c = cfg(3, 2);
        let raw = array![[
            0.3, -0.2, 1.0, 0.1, 0.2, -0.5, 0.4, 0.9, -0.9, 0.5, -1.0, 0.0, 0.3, -0.3, 0.8
        ]];
        // permutation (2, 0, 1) applied to each block
        let perm = [2usize, 0, 1];
        let mut permuted = raw.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted[[0, new]] = raw[[0, old]];
            for cdim in 0..2 {
                permuted[[0, 3 + new * 2 + cdim]] = raw[[0, 3 + old * 2 + cdim]];
                permuted[[0, 9 + new * 2 + cdim]] = raw[[0, 9 + old * 2 + cdim]];
            }
        }
        let y = array![[0.2, -0.4]];
        let a = nll_loss(raw.view(), y.view(), &c).unwrap().loss;
        let b = nll_loss(permuted.view(), y.view(), &c).unwrap().loss;
        assert!((a - b).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn head_output_is_valid_gmm(raw in proptest::collection::vec(-1e6f64..1e6, 15)) {
            let c = cfg(3, 2);
            let p = head_transform(&raw, &c).unwrap();
            prop_assert!((p.weights.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(p.weights.iter().all(|&w| w >= 0.0));
            prop_assert!(p.variances.iter().all(|&v| v > 0.0 && v < c.sigma_max));
            prop_assert!(GmmParams::new(p.weights.clone(), p.means.clone(), p.variances.clone()).is_ok());
        }

        #[test]
        fn softmax_shift_invariance(raw in proptest::collection::vec(-50f64..50.0, 4), shift in -1e3f64..1e3) {
            let c = cfg(4, 1);
            let mut full = raw.clone();
            full.extend([0.0; 8]);
            let mut shifted: Vec<f64> = raw.iter().map(|r| r + shift).collect();
            shifted.extend([0.0; 8]);
            let a = head_transform(&full, &c).unwrap();
            let b = head_transform(&shifted, &c).unwrap();
            for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
