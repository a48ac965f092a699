//! Closed-form moments of a Gaussian mixture and the Monte Carlo dropout comparator.
//!
//! For a mixture `p(y|x) = Σ_k π_k N(y; μ_k, Σ_k)` the predictive variance splits per output
//! dimension into
//!
//! * explained variance `Σ_k π_k (μ_k − Σ_j π_j μ_j)²`: spread of the component means, which
//!   tracks model ignorance;
//! * unexplained variance `Σ_k π_k Σ_k`: average component variance, which tracks noise.
//!
//! Neither needs sampling: one forward pass gives both.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdn::{GmmParams, MapPrediction, MdnNetwork};
use crate::nn::RandomState;

/// `Σ_j π_j μ_j`.
pub fn total_mean(g: &GmmParams) -> Vec<f64> {
    let mut m = vec![0.0; g.dim()];
    for (w, mu) in g.weights.iter().zip(g.means.rows()) {
        for (acc, &v) in m.iter_mut().zip(mu.iter()) {
            *acc += w * v;
        }
    }
    m
}

/// `Σ_k π_k (μ_k − Σ_j π_j μ_j)²` per output dimension.
pub fn explained_variance(g: &GmmParams) -> Vec<f64> {
    let m = total_mean(g);
    let mut out = vec![0.0; g.dim()];
    for (w, mu) in g.weights.iter().zip(g.means.rows()) {
        for ((acc, &v), &c) in out.iter_mut().zip(mu.iter()).zip(&m) {
            let r = v - c;
            *acc += w * r * r;
        }
    }
    out
}

/// `Σ_k π_k Σ_k` per output dimension.
pub fn unexplained_variance(g: &GmmParams) -> Vec<f64> {
    let mut out = vec![0.0; g.dim()];
    for (w, var) in g.weights.iter().zip(g.variances.rows()) {
        for (acc, &v) in out.iter_mut().zip(var.iter()) {
            *acc += w * v;
        }
    }
    out
}

/// Total variance accumulated component by component: `Σ_j π_j (Σ_j + (μ_j − m)²)`.
pub fn total_variance(g: &GmmParams) -> Vec<f64> {
    let m = total_mean(g);
    let mut out = vec![0.0; g.dim()];
    for ((w, mu), var) in g.weights.iter().zip(g.means.rows()).zip(g.variances.rows()) {
        for (c, acc) in out.iter_mut().enumerate() {
            let r = mu[c] - m[c];
            *acc += w * (var[c] + r * r);
        }
    }
    out
}

/// Variance decomposition for one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub total_mean: Vec<f64>,
    #[serde(rename = "total")]
    pub total_variance: Vec<f64>,
    pub explained: Vec<f64>,
    pub unexplained: Vec<f64>,
    pub map_index: usize,
}

impl UncertaintyReport {
    pub fn from_gmm(g: &GmmParams) -> Self {
        UncertaintyReport {
            total_mean: total_mean(g),
            total_variance: total_variance(g),
            explained: explained_variance(g),
            unexplained: unexplained_variance(g),
            map_index: g.map_index(),
        }
    }

    /// Explained variance summed over output dimensions.
    pub fn explained_sum(&self) -> f64 {
        self.explained.iter().sum()
    }

    pub fn unexplained_sum(&self) -> f64 {
        self.unexplained.iter().sum()
    }

    pub fn total_sum(&self) -> f64 {
        self.total_variance.iter().sum()
    }

    /// CSV header for reports of dimension `d`.
    pub fn csv_header(d: usize) -> Vec<String> {
        let mut cols = Vec::with_capacity(3 * d + 1);
        for name in ["total", "explained", "unexplained"] {
            cols.extend((0..d).map(|c| format!("{name}_{c}")));
        }
        cols.push("map_index".to_owned());
        cols
    }

    pub fn csv_record(&self) -> Vec<String> {
        self.total_variance
            .iter()
            .chain(&self.explained)
            .chain(&self.unexplained)
            .map(|v| format!("{v:e}"))
            .chain(std::iter::once(self.map_index.to_string()))
            .collect()
    }
}

/// Single deterministic forward pass, no sampling.
pub fn report(net: &MdnNetwork, x: &[f64]) -> Result<UncertaintyReport> {
    Ok(UncertaintyReport::from_gmm(&net.gmm(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDropoutReport {
    pub variance: Vec<f64>,
    pub num_samples: usize,
    pub sample_means: Vec<Vec<f64>>,
    pub sample_variances: Vec<Vec<f64>>,
}

impl McDropoutReport {
    /// `max(0, mean(μ̂²) − mean(μ̂)²)`, the sampled spread of the predicted means.
    pub fn mean_spread(&self) -> Vec<f64> {
        spread(&self.sample_means)
    }
}

fn spread(samples: &[Vec<f64>]) -> Vec<f64> {
    let t = samples.len() as f64;
    let d = samples.first().map_or(0, Vec::len);
    (0..d)
        .map(|c| {
            let m = samples.iter().map(|s| s[c]).sum::<f64>() / t;
            let m2 = samples.iter().map(|s| s[c] * s[c]).sum::<f64>() / t;
            (m2 - m * m).max(0.0)
        })
        .collect()
}

/// Predictive variance from `t` dropout-masked passes:
/// `max(0, (1/T)Σ μ̂_t² − ((1/T)Σ μ̂_t)²) + (1/T)Σ σ̂_t`, where `(μ̂_t, σ̂_t)` is the MAP component
/// of pass `t`.
pub fn mc_dropout_variance(
    net: &MdnNetwork,
    x: &[f64],
    t: usize,
    rng: &mut RandomState,
) -> Result<McDropoutReport> {
    if t < 2 {
        return Err(Error::Argument(format!(
            "Monte Carlo dropout needs at least 2 samples, got {t}"
        )));
    }
    let mut sample_means = Vec::with_capacity(t);
    let mut sample_variances = Vec::with_capacity(t);
    for _ in 0..t {
        let map = MapPrediction::from_gmm(&net.gmm_stochastic(x, rng)?);
        sample_means.push(map.mean);
        sample_variances.push(map.variance);
    }
    let d = net.output_dim();
    let spread = spread(&sample_means);
    let variance = (0..d)
        .map(|c| spread[c] + sample_variances.iter().map(|v| v[c]).sum::<f64>() / t as f64)
        .collect();
    Ok(McDropoutReport {
        variance,
        num_samples: t,
        sample_means,
        sample_variances,
    })
}

/// Mean wall-clock cost per call of [`report`] and of [`mc_dropout_variance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub samples: usize,
    pub calls: usize,
    pub single_pass_ms: f64,
    pub mc_dropout_ms: f64,
}

impl TimingReport {
    pub fn speedup(&self) -> f64 {
        self.mc_dropout_ms / self.single_pass_ms
    }
}

/// Times `calls` evaluations of each estimator, cycling through `inputs`.
pub fn time_estimators(
    net: &MdnNetwork,
    inputs: &[Vec<f64>],
    t: usize,
    calls: usize,
    rng: &mut RandomState,
) -> Result<TimingReport> {
    if t < 2 {
        return Err(Error::Argument(format!(
            "Monte Carlo dropout needs at least 2 samples, got {t}"
        )));
    }
    if calls == 0 || inputs.is_empty() {
        return Err(Error::Argument(
            "timing needs at least one call and one input".into(),
        ));
    }
    let start = Instant::now();
    for i in 0..calls {
        black_box(report(net, &inputs[i % inputs.len()])?);
    }
    let single = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for i in 0..calls {
        black_box(mc_dropout_variance(net, &inputs[i % inputs.len()], t, rng)?);
    }
    let mc = start.elapsed().as_secs_f64();
    let per_call = |s: f64| s * 1e3 / calls as f64;
    Ok(TimingReport {
        samples: t,
        calls,
        single_pass_ms: per_call(single),
        mc_dropout_ms: per_call(mc),
    })
}
