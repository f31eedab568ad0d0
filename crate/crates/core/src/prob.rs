//! Finite joint distributions, labeled samples, and the synthetic
//! fair-classification task.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::rng::Rng;

const SUM_TOL: f64 = 1e-12;

fn check_table(probs: &Array2<f64>, what: &str) -> Result<()> {
    let (rows, cols) = probs.dim();
    if rows == 0 || cols == 0 {
        return Err(validation(format!("{what}: alphabet sizes must be >= 1, got {rows}x{cols}")));
    }
    for ((z, y), &p) in probs.indexed_iter() {
        if !p.is_finite() || p < 0.0 {
            return Err(validation(format!("{what}: entry ({z},{y}) = {p} is not a probability")));
        }
    }
    Ok(())
}

fn rows_to_array(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(validation(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, k), flat).map_err(|e| validation(format!("{what}: {e}")))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Exact joint distribution p(z, y) over finite alphabets; rows index z,
/// columns index y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbsFile", into = "ProbsFile")]
pub struct DiscreteJoint {
    probs: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProbsFile {
    probs: Vec<Vec<f64>>,
}

impl TryFrom<ProbsFile> for DiscreteJoint {
    type Error = crate::Error;
    fn try_from(f: ProbsFile) -> Result<Self> {
        DiscreteJoint::new(rows_to_array(&f.probs, "joint")?)
    }
}

impl From<DiscreteJoint> for ProbsFile {
    fn from(j: DiscreteJoint) -> Self {
        ProbsFile {
            probs: array_to_rows(&j.probs),
        }
    }
}

impl DiscreteJoint {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        check_table(&probs, "joint")?;
        let total = probs.sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(validation(format!("joint: entries sum to {total}, expected 1")));
        }
        Ok(DiscreteJoint { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows, "joint")?)
    }

    /// Outer product of two marginals.
    pub fn product(p_z: &[f64], p_y: &[f64]) -> Result<Self> {
        let pz = ArrayView1::from(p_z);
        let py = ArrayView1::from(p_y);
        let probs = Array2::from_shape_fn((pz.len(), py.len()), |(z, y)| pz[z] * py[y]);
        Self::new(probs)
    }

    /// Random joint whose cells are Dirichlet(concentration) distributed.
    pub fn random(nz: usize, ny: usize, concentration: f64, rng: &mut Rng) -> Result<Self> {
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| validation(e.to_string()))?;
        let mut probs = Array2::from_shape_fn((nz, ny), |_| gamma.sample(rng));
        let total = probs.sum();
        if total <= 0.0 {
            probs.fill(1.0 / (nz * ny) as f64);
        } else {
            probs /= total;
        }
        // renormalise to absorb rounding in the division
        let total = probs.sum();
        probs /= total;
        Self::new(probs)
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn z_size(&self) -> usize {
        self.probs.nrows()
    }

    pub fn y_size(&self) -> usize {
        self.probs.ncols()
    }

    pub fn p_z(&self) -> Array1<f64> {
        self.probs.sum_axis(Axis(1))
    }

    pub fn p_y(&self) -> Array1<f64> {
        self.probs.sum_axis(Axis(0))
    }

    /// The true conditional p(y|z). Rows with p(z) = 0 are set to uniform.
    pub fn conditional(&self) -> ConditionalTable {
        let ny = self.y_size();
        let mut probs = self.probs.clone();
        for mut row in probs.outer_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            } else {
                row.fill(1.0 / ny as f64);
            }
        }
        ConditionalTable { probs }
    }
}

/// Conditional distribution q(y|z); each row is a distribution over y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbsFile", into = "ProbsFile")]
pub struct ConditionalTable {
    probs: Array2<f64>,
}

impl TryFrom<ProbsFile> for ConditionalTable {
    type Error = crate::Error;
    fn try_from(f: ProbsFile) -> Result<Self> {
        ConditionalTable::new(rows_to_array(&f.probs, "conditional")?)
    }
}

impl From<ConditionalTable> for ProbsFile {
    fn from(c: ConditionalTable) -> Self {
        ProbsFile {
            probs: array_to_rows(&c.probs),
        }
    }
}

impl ConditionalTable {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        check_table(&probs, "conditional")?;
        for (z, row) in probs.outer_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(validation(format!("conditional: row {z} sums to {s}, expected 1")));
            }
        }
        Ok(ConditionalTable { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows, "conditional")?)
    }

    pub fn uniform(nz: usize, ny: usize) -> Result<Self> {
        Self::new(Array2::from_elem((nz, ny), 1.0 / ny.max(1) as f64))
    }

    /// Each row drawn independently from Dirichlet(concentration).
    pub fn random(nz: usize, ny: usize, concentration: f64, rng: &mut Rng) -> Result<Self> {
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| validation(e.to_string()))?;
        let mut probs = Array2::zeros((nz, ny));
        for mut row in probs.outer_iter_mut() {
            loop {
                row.map_inplace(|v| *v = gamma.sample(rng));
                let s = row.sum();
                if s > 0.0 {
                    row /= s;
                    let s = row.sum();
                    row /= s;
                    break;
                }
            }
        }
        Self::new(probs)
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn z_size(&self) -> usize {
        self.probs.nrows()
    }

    pub fn y_size(&self) -> usize {
        self.probs.ncols()
    }
}

/// `n` samples of a representation `z` (one row each) with class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BatchFile", into = "BatchFile")]
pub struct LabeledBatch {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct BatchFile {
    n_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl TryFrom<BatchFile> for LabeledBatch {
    type Error = crate::Error;
    fn try_from(f: BatchFile) -> Result<Self> {
        LabeledBatch::new(rows_to_array(&f.features, "batch features")?, f.labels, f.n_classes)
    }
}

impl From<LabeledBatch> for BatchFile {
    fn from(b: LabeledBatch) -> Self {
        BatchFile {
            n_classes: b.n_classes,
            features: array_to_rows(&b.features),
            labels: b.labels,
        }
    }
}

impl LabeledBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(validation(format!("batch: need n >= 1 and d >= 1, got {n}x{d}")));
        }
        if labels.len() != n {
            return Err(validation(format!("batch: {} labels for {n} rows", labels.len())));
        }
        if n_classes == 0 {
            return Err(validation("batch: n_classes must be >= 1"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(validation(format!("batch: label {y} at row {i} out of range 0..{n_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(validation("batch: non-finite feature"));
        }
        Ok(LabeledBatch {
            features,
            labels,
            n_classes,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Empirical label frequencies.
    pub fn label_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1.0;
        }
        let n = self.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }

    /// Same features with different labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.n_classes)
    }
}

/// Draw `n` i.i.d. pairs from `joint`, one-hot encoding z.
pub fn sample_joint(joint: &DiscreteJoint, n: usize, rng: &mut Rng) -> Result<LabeledBatch> {
    if n == 0 {
        return Err(validation("sample_joint: n must be >= 1"));
    }
    // re-check in case the caller built the joint through deserialization of a
    // stale value; construction already validates
    DiscreteJoint::new(joint.probs.clone())?;
    let (nz, ny) = joint.probs.dim();
    let cells = WeightedIndex::new(joint.probs.iter().copied())
        .map_err(|e| validation(format!("sample_joint: {e}")))?;
    let mut features = Array2::zeros((n, nz));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = cells.sample(rng);
        features[[i, c / ny]] = 1.0;
        labels.push(c % ny);
    }
    LabeledBatch::new(features, labels, ny)
}

/// One row of the synthetic fair-classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSample {
    pub x: Vec<f64>,
    /// Target label, binary.
    pub l: usize,
    /// Protected attribute.
    pub y: usize,
}

/// Gaussian-mixture stand-in for a fairness dataset.
///
/// `x = m_l * e0 + leak * m_y * e1 + noise`, with `m_l = ±offset` for the
/// binary target and `m_y` evenly spaced on `[-offset, offset]` across the
/// attribute classes. Both labels are uniform and independent, so the target
/// direction carries no attribute information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub dim: usize,
    pub noise_std: f64,
    pub offset: f64,
    pub leak: f64,
    pub n_attr_classes: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            dim: 16,
            noise_std: 1.0,
            offset: 2.0,
            leak: 1.0,
            n_attr_classes: 2,
        }
    }
}

pub const N_TARGET_CLASSES: usize = 2;

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(validation("task.dim must be >= 2"));
        }
        if self.n_attr_classes < 2 {
            return Err(validation("task.n_attr_classes must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(validation(format!("task.leak must lie in [0, 1], got {}", self.leak)));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(validation("task.noise_std must be positive"));
        }
        if !self.offset.is_finite() {
            return Err(validation("task.offset must be finite"));
        }
        Ok(())
    }

    fn target_offset(&self, l: usize) -> f64 {
        if l == 0 {
            -self.offset
        } else {
            self.offset
        }
    }

    fn attr_offset(&self, y: usize) -> f64 {
        let k = self.n_attr_classes as f64;
        self.leak * self.offset * (2.0 * y as f64 / (k - 1.0) - 1.0)
    }

    pub fn generate(&self, n: usize, rng: &mut Rng) -> Result<TaskData> {
        self.validate()?;
        if n == 0 {
            return Err(validation("synthetic task: n must be >= 1"));
        }
        let mut x = Array2::zeros((n, self.dim));
        let mut targets = Vec::with_capacity(n);
        let mut attrs = Vec::with_capacity(n);
        for mut row in x.outer_iter_mut() {
            let l = rng.gen_range(0..N_TARGET_CLASSES);
            let y = rng.gen_range(0..self.n_attr_classes);
            for v in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v = self.noise_std * e;
            }
            row[0] += self.target_offset(l);
            row[1] += self.attr_offset(y);
            targets.push(l);
            attrs.push(y);
        }
        Ok(TaskData {
            x,
            targets,
            attrs,
            n_attr_classes: self.n_attr_classes,
        })
    }

    /// Accuracy of the Bayes-optimal attribute classifier on `x`.
    ///
    /// Only the second coordinate depends on `y`; the class means along it are
    /// equally spaced with gap `s`, so nearest-mean decoding is correct with
    /// probability `2Φ(s/2σ) - 1` for interior classes and `Φ(s/2σ)` for the
    /// two end classes.
    pub fn bayes_attr_accuracy(&self) -> f64 {
        let k = self.n_attr_classes as f64;
        let gap = 2.0 * self.leak * self.offset / (k - 1.0);
        let p = std_normal_cdf(gap / (2.0 * self.noise_std));
        (2.0 * p + (k - 2.0) * (2.0 * p - 1.0)) / k
    }

    /// Accuracy of the Bayes-optimal target classifier on `x`.
    pub fn bayes_target_accuracy(&self) -> f64 {
        std_normal_cdf(self.offset / self.noise_std)
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Column-oriented synthetic task samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub x: Array2<f64>,
    pub targets: Vec<usize>,
    pub attrs: Vec<usize>,
    pub n_attr_classes: usize,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = SyntheticTaskSample> + '_ {
        self.x
            .outer_iter()
            .zip(self.targets.iter().zip(&self.attrs))
            .map(|(x, (&l, &y))| SyntheticTaskSample { x: x.to_vec(), l, y })
    }

    pub fn select(&self, idx: &[usize]) -> TaskData {
        TaskData {
            x: self.x.select(Axis(0), idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            attrs: idx.iter().map(|&i| self.attrs[i]).collect(),
            n_attr_classes: self.n_attr_classes,
        }
    }

    /// Split off the first `round(frac * n)` rows; the remainder forms the
    /// second part. Rows are already i.i.d., so no shuffle is needed.
    pub fn split(&self, frac: f64) -> Result<(TaskData, TaskData)> {
        let n = self.len();
        let cut = (frac * n as f64).round() as usize;
        if cut == 0 || cut >= n {
            return Err(validation(format!("split fraction {frac} leaves an empty part of {n} rows")));
        }
        let first: Vec<usize> = (0..cut).collect();
        let second: Vec<usize> = (cut..n).collect();
        Ok((self.select(&first), self.select(&second)))
    }
}

/// Draw the synthetic task with default geometry (D = 16, unit noise,
/// offset 2) and the given attribute leak.
pub fn generate_synthetic_task(
    n: usize,
    leak: f64,
    n_attr_classes: usize,
    rng: &mut Rng,
) -> Result<Vec<SyntheticTaskSample>> {
    let task = SyntheticTask {
        leak,
        n_attr_classes,
        ..SyntheticTask::default()
    };
    Ok(task.generate(n, rng)?.samples().collect())
}
