//! Two-dimensional regression scenarios with known uncertainty signatures.
//!
//! All scenarios live on the square `[-6, 6]²` and share the radial target
//! `f(x) = 5·cos((π/2)·‖x/2‖)·exp(−π‖x‖/20)`:
//!
//! * absence of data: no samples in the first quadrant (`x₁ > 0 ∧ x₂ > 0`);
//! * heavy noise: uniform noise added to targets whose inputs lie in the first quadrant;
//! * composition: each target is `f(x)` or `−f(x)` by a fair coin.

use std::f64::consts::PI;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::data::TrainingSet;
use crate::error::{Error, Result};
use crate::mdn::{MapPrediction, MdnNetwork};
use crate::nn::RandomState;
use crate::uncertainty::UncertaintyReport;

pub const DOMAIN_MIN: f64 = -6.0;
pub const DOMAIN_MAX: f64 = 6.0;

pub fn target_fn(x: [f64; 2]) -> f64 {
    let r = x[0].hypot(x[1]);
    5.0 * (PI / 2.0 * (r / 2.0)).cos() * (-PI * r / 20.0).exp()
}

fn in_first_quadrant(x: [f64; 2]) -> bool {
    x[0] > 0.0 && x[1] > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    AbsenceOfData,
    HeavyNoise,
    Composition,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::AbsenceOfData,
        ScenarioKind::HeavyNoise,
        ScenarioKind::Composition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::AbsenceOfData => "absence_of_data",
            ScenarioKind::HeavyNoise => "heavy_noise",
            ScenarioKind::Composition => "composition",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub num_points: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        ScenarioSpec {
            kind,
            num_points: 4000,
            noise_low: -2.0,
            noise_high: 2.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_points(mut self, n: usize) -> Self {
        self.num_points = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 {
            return Err(Error::Config("scenario needs at least one point".into()));
        }
        if self.kind == ScenarioKind::HeavyNoise && !(self.noise_low < self.noise_high) {
            return Err(Error::Config(format!(
                "noise bounds [{}, {}] must satisfy low < high",
                self.noise_low, self.noise_high
            )));
        }
        Ok(())
    }
}

pub fn generate(spec: &ScenarioSpec) -> Result<TrainingSet> {
    spec.validate()?;
    let mut rng = RandomState::seed_from_u64(spec.seed);
    let mut inputs = Array2::zeros((spec.num_points, 2));
    let mut targets = Array2::zeros((spec.num_points, 1));
    for i in 0..spec.num_points {
        let x = loop {
            let x = [
                rng.random_range(DOMAIN_MIN..=DOMAIN_MAX),
                rng.random_range(DOMAIN_MIN..=DOMAIN_MAX),
            ];
            if spec.kind != ScenarioKind::AbsenceOfData || !in_first_quadrant(x) {
                break x;
            }
        };
        let f = target_fn(x);
        let y = match spec.kind {
            ScenarioKind::AbsenceOfData => f,
            ScenarioKind::HeavyNoise if in_first_quadrant(x) => {
                f + rng.random_range(spec.noise_low..spec.noise_high)
            }
            ScenarioKind::HeavyNoise => f,
            ScenarioKind::Composition => {
                if rng.random_bool(0.5) {
                    f
                } else {
                    -f
                }
            }
        };
        inputs[[i, 0]] = x[0];
        inputs[[i, 1]] = x[1];
        targets[[i, 0]] = y;
    }
    TrainingSet::new(inputs, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub x: [f64; 2],
    pub map: MapPrediction,
    pub report: UncertaintyReport,
}

/// Uncertainty at the centres of a `resolution × resolution` grid over the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEval {
    pub resolution: usize,
    /// Row-major over (x₁ index, x₂ index).
    pub cells: Vec<GridCell>,
}

pub fn grid_centers(resolution: usize) -> Vec<[f64; 2]> {
    let step = (DOMAIN_MAX - DOMAIN_MIN) / resolution as f64;
    let c = |i: usize| DOMAIN_MIN + (i as f64 + 0.5) * step;
    (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| [c(i), c(j)]))
        .collect()
}

pub fn evaluate_grid(net: &MdnNetwork, resolution: usize) -> Result<GridEval> {
    if resolution == 0 {
        return Err(Error::Argument("grid resolution must be positive".into()));
    }
    let cells = grid_centers(resolution)
        .into_par_iter()
        .map(|x| {
            let g = net.gmm(&x)?;
            Ok(GridCell {
                x,
                map: MapPrediction::from_gmm(&g),
                report: UncertaintyReport::from_gmm(&g),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridEval { resolution, cells })
}

impl GridEval {
    /// `x1,x2,map_mean,total,explained,unexplained`; multi-output grids sum channels over
    /// dimensions and report the first MAP coordinate.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x1", "x2", "map_mean", "total", "explained", "unexplained"])?;
        for c in &self.cells {
            out.write_record([
                format!("{:e}", c.x[0]),
                format!("{:e}", c.x[1]),
                format!("{:e}", c.map.mean[0]),
                format!("{:e}", c.report.total_sum()),
                format!("{:e}", c.report.explained_sum()),
                format!("{:e}", c.report.unexplained_sum()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelMeans {
    pub total: f64,
    pub explained: f64,
    pub unexplained: f64,
    pub cells: usize,
}

/// Per-quadrant channel means, indexed `[Q1, Q2, Q3, Q4]` counter-clockwise from `x₁ > 0, x₂ > 0`.
/// Cells on an axis belong to no quadrant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrantStats {
    pub quadrants: [ChannelMeans; 4],
}

fn quadrant_of(x: [f64; 2]) -> Option<usize> {
    match (x[0].partial_cmp(&0.0)?, x[1].partial_cmp(&0.0)?) {
        (std::cmp::Ordering::Greater, std::cmp::Ordering::Greater) => Some(0),
        (std::cmp::Ordering::Less, std::cmp::Ordering::Greater) => Some(1),
        (std::cmp::Ordering::Less, std::cmp::Ordering::Less) => Some(2),
        (std::cmp::Ordering::Greater, std::cmp::Ordering::Less) => Some(3),
        _ => None,
    }
}

impl QuadrantStats {
    /// Mean over quadrants 2–4, weighting each cell equally.
    pub fn others(&self) -> ChannelMeans {
        let mut acc = ChannelMeans::default();
        for q in &self.quadrants[1..] {
            let n = q.cells as f64;
            acc.total += q.total * n;
            acc.explained += q.explained * n;
            acc.unexplained += q.unexplained * n;
            acc.cells += q.cells;
        }
        let n = acc.cells.max(1) as f64;
        acc.total /= n;
        acc.explained /= n;
        acc.unexplained /= n;
        acc
    }
}

pub fn quadrant_stats(grid: &GridEval) -> QuadrantStats {
    let mut q = [ChannelMeans::default(); 4];
    for c in &grid.cells {
        if let Some(i) = quadrant_of(c.x) {
            q[i].total += c.report.total_sum();
            q[i].explained += c.report.explained_sum();
            q[i].unexplained += c.report.unexplained_sum();
            q[i].cells += 1;
        }
    }
    for m in &mut q {
        let n = m.cells.max(1) as f64;
        m.total /= n;
        m.explained /= n;
        m.unexplained /= n;
    }
    QuadrantStats { quadrants: q }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample Pearson correlation; NaN when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionStats {
    pub median_explained: f64,
    pub median_unexplained: f64,
    /// Correlation of explained variance with the squared branch gap `(2f(x))²`.
    pub gap_correlation: f64,
}

pub fn composition_stats(grid: &GridEval) -> CompositionStats {
    let explained: Vec<f64> = grid
        .cells
        .iter()
        .map(|c| c.report.explained_sum())
        .collect();
    let unexplained: Vec<f64> = grid
        .cells
        .iter()
        .map(|c| c.report.unexplained_sum())
        .collect();
    let gap: Vec<f64> = grid
        .cells
        .iter()
        .map(|c| (2.0 * target_fn(c.x)).powi(2))
        .collect();
    CompositionStats {
        median_explained: median(&explained),
        median_unexplained: median(&unexplained),
        gap_correlation: pearson(&explained, &gap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdn::{GmmParams, MdnConfig};
    use crate::nn::MlpConfig;
    use ndarray::array;

    #[test]
    fn target_at_landmarks() {
        assert_eq!(target_fn([0.0, 0.0]), 5.0);
        assert!(target_fn([2.0, 0.0]).abs() < 1e-15);
        assert!(target_fn([0.0, -2.0]).abs() < 1e-15);
        // ‖(6,6)‖ = 6√2; evaluated independently with 50-digit arithmetic
        let expected = 1.223_982_280_186_814_4;
        assert!(
            (target_fn([6.0, 6.0]) - expected).abs() < 1e-13,
            "{}",
            target_fn([6.0, 6.0])
        );
    }

    #[test]
    fn absence_has_empty_first_quadrant() {
        let set = generate(
            &ScenarioSpec::new(ScenarioKind::AbsenceOfData)
                .with_seed(1)
                .with_points(2000),
        )
        .unwrap();
        for i in 0..set.len() {
            let (x, y) = set.sample(i);
            assert!(!(x[0] > 0.0 && x[1] > 0.0));
            assert_eq!(y[0], target_fn([x[0], x[1]]));
        }
    }

    #[test]
    fn heavy_noise_only_in_first_quadrant() {
        let set = generate(
            &ScenarioSpec::new(ScenarioKind::HeavyNoise)
                .with_seed(2)
                .with_points(2000),
        )
        .unwrap();
        let mut noisy = 0;
        for i in 0..set.len() {
            let (x, y) = set.sample(i);
            let f = target_fn([x[0], x[1]]);
            if x[0] > 0.0 && x[1] > 0.0 {
                assert!((y[0] - f).abs() <= 2.0);
                noisy += usize::from(y[0] != f);
            } else {
                assert_eq!(y[0], f);
            }
        }
        assert!(noisy > 300);
    }

    #[test]
    fn composition_flips_sign_only() {
        let set = generate(
            &ScenarioSpec::new(ScenarioKind::Composition)
                .with_seed(3)
                .with_points(2000),
        )
        .unwrap();
        let mut flipped = 0;
        for i in 0..set.len() {
            let (x, y) = set.sample(i);
            let f = target_fn([x[0], x[1]]);
            assert_eq!(y[0].abs(), f.abs());
            flipped += usize::from(y[0] != f);
        }
        assert!((800..1200).contains(&flipped), "{flipped}");
    }

    #[test]
    fn generation_is_seeded() {
        let spec = ScenarioSpec::new(ScenarioKind::Composition)
            .with_seed(9)
            .with_points(100);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let bad = ScenarioSpec {
            noise_low: 1.0,
            noise_high: 1.0,
            ..ScenarioSpec::new(ScenarioKind::HeavyNoise)
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn resolution_two_grid() {
        let mut centers = grid_centers(2);
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(
            centers,
            vec![[-3.0, -3.0], [-3.0, 3.0], [3.0, -3.0], [3.0, 3.0]]
        );
    }

    #[test]
    fn single_mixture_grid_has_no_explained_variance() {
        let net = MdnNetwork::new(
            MlpConfig::new(2, vec![8], 0).with_seed(1),
            MdnConfig::new(1, 1),
        )
        .unwrap();
        let grid = evaluate_grid(&net, 5).unwrap();
        assert_eq!(grid.cells.len(), 25);
        assert!(grid.cells.iter().all(|c| c.report.explained == vec![0.0]));
        assert_eq!(grid, evaluate_grid(&net, 5).unwrap());
    }

    #[test]
    fn constant_reports_give_equal_quadrants() {
        let g = GmmParams::new(
            array![0.5, 0.5],
            array![[-1.0], [1.0]],
            array![[0.5], [0.5]],
        )
        .unwrap();
        let cells = grid_centers(4)
            .into_iter()
            .map(|x| GridCell {
                x,
                map: MapPrediction::from_gmm(&g),
                report: UncertaintyReport::from_gmm(&g),
            })
            .collect();
        let stats = quadrant_stats(&GridEval {
            resolution: 4,
            cells,
        });
        for q in &stats.quadrants {
            assert_eq!(q.cells, 4);
            assert_eq!(*q, stats.quadrants[0]);
        }
        assert_eq!(stats.others().explained, 1.0);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let net = MdnNetwork::new(
            MlpConfig::new(2, vec![4], 0).with_seed(1),
            MdnConfig::new(2, 1),
        )
        .unwrap();
        let grid = evaluate_grid(&net, 3).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("x1,x2,map_mean,total,explained,unexplained"));
    }

    #[test]
    fn median_and_pearson() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // hand-computed: deviations (-1,0,1)·(-1,1,0) = 1, norms √2·√2
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }
}
