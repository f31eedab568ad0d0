//! Offline-attacker evaluation, lambda sweeps and their tabular outputs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::estimators::{estimate_breakdown, EntropyWeighting, EstimatorKind, EstimatorSpec, FitConfig, DEFAULT_CLAMP_EPS};
use crate::nn::{accuracy, ce_step, sample_rows, AdamW, Head, MlpNet, NetConfig, OptimConfig};
use crate::prob::{LabeledBatch, SyntheticTask, TaskData};
use crate::rng::{streams, Rng};
use crate::train::{train, ModelBundle, TrainingConfig};

/// Probe retrained on frozen representations. Defaults: two dense layers
/// (128 hidden, LeakyReLU, dropout 0.1), 5000 steps of batch 128, averaged
/// over three probe seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub net: NetConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub probes: usize,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            net: NetConfig {
                hidden: 128,
                layers: 2,
                dropout: 0.1,
            },
            lr: 1e-3,
            steps: 5000,
            batch_size: 128,
            probes: 3,
        }
    }
}

impl AttackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate("attacker")?;
        OptimConfig::with_lr(self.lr).validate()?;
        if self.batch_size == 0 || self.probes == 0 {
            return Err(validation("attacker batch_size and probes must be >= 1"));
        }
        Ok(())
    }
}

/// Per-column mean and standard deviation of the training features.
fn standardizer(z: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let std = z.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

/// Train a fresh probe on `train` and report its accuracy on `test`.
/// Features are standardized with the training statistics first.
pub fn probe_accuracy(train: &LabeledBatch, test: &LabeledBatch, config: &AttackerConfig, rng: &mut Rng) -> Result<f64> {
    config.validate()?;
    if train.dim() != test.dim() || train.n_classes() != test.n_classes() {
        return Err(validation("probe train and test sets differ in shape"));
    }
    let (mean, std) = standardizer(train.features());
    let zt = (&train.features() - &mean) / &std;
    let ze = (&test.features() - &mean) / &std;
    let mut net = config
        .net
        .build(train.dim(), train.n_classes(), Head::Logits, &mut rng.fork(1))?;
    let mut opt = AdamW::new(&net, OptimConfig::with_lr(config.lr));
    let mut batch_rng = rng.fork(2);
    let mut dropout_rng = rng.fork(3);
    let m = config.batch_size;
    for _ in 0..config.steps {
        let idx = sample_rows(train.len(), m, &mut batch_rng);
        let x = zt.select(Axis(0), &idx);
        let y: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
        ce_step(&mut net, &mut opt, x.view(), &y, &mut dropout_rng)?;
    }
    Ok(accuracy(net.predict(ze.view())?.view(), test.labels()))
}

/// Attribute accuracy of a probe trained on the frozen encoder's outputs.
pub fn offline_attacker(
    encoder: &MlpNet,
    train: &TaskData,
    test: &TaskData,
    config: &AttackerConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let (tr, te) = encoded_attr_batches(encoder, train, test)?;
    probe_accuracy(&tr, &te, config, rng)
}

fn encoded_attr_batches(encoder: &MlpNet, train: &TaskData, test: &TaskData) -> Result<(LabeledBatch, LabeledBatch)> {
    let tr = LabeledBatch::new(encoder.predict(train.x.view())?, train.attrs.clone(), train.n_attr_classes)?;
    let te = LabeledBatch::new(encoder.predict(test.x.view())?, test.attrs.clone(), test.n_attr_classes)?;
    Ok((tr, te))
}

/// Mean and population standard deviation of the per-probe accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackerReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn attacker_report(
    encoder: &MlpNet,
    train: &TaskData,
    test: &TaskData,
    config: &AttackerConfig,
    rng: &Rng,
) -> Result<AttackerReport> {
    let (tr, te) = encoded_attr_batches(encoder, train, test)?;
    let accuracies = (0..config.probes)
        .map(|p| probe_accuracy(&tr, &te, config, &mut rng.fork(p as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&accuracies);
    Ok(AttackerReport { accuracies, mean, std })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 20_000,
            n_test: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub estimators: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambdas: vec![0.0, 0.1, 1.0, 5.0, 10.0],
            estimators: vec!["kl".into(), "renyi-1.5".into()],
            seeds: vec![0],
        }
    }
}

impl SweepGrid {
    pub fn kinds(&self) -> Result<Vec<EstimatorKind>> {
        self.estimators.iter().map(|s| s.parse()).collect()
    }
}

/// Estimator and fitting budget for standalone estimation on a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(with = "crate::train::kind_string")]
    pub estimator: EstimatorKind,
    pub ratio_clamp_eps: f64,
    pub entropy_weighting: EntropyWeighting,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            estimator: EstimatorKind::Renyi { alpha: 1.5 },
            ratio_clamp_eps: DEFAULT_CLAMP_EPS,
            entropy_weighting: EntropyWeighting::Empirical,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

impl EstimateConfig {
    pub fn spec(&self) -> EstimatorSpec {
        EstimatorSpec {
            kind: self.estimator,
            ratio_clamp_eps: self.ratio_clamp_eps,
            entropy_weighting: self.entropy_weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        self.fit.net.validate("estimate.fit")?;
        self.fit.optim.validate()?;
        if self.fit.batch_size == 0 {
            return Err(validation("estimate.fit.batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Everything needed to generate data, train and evaluate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SyntheticTask,
    pub data: DataConfig,
    pub train: TrainingConfig,
    pub attacker: AttackerConfig,
    pub sweep: SweepGrid,
    pub estimate: EstimateConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.data.n_train < 4 || self.data.n_test < 1 {
            return Err(validation("data.n_train must be >= 4 and data.n_test >= 1"));
        }
        self.train.validate()?;
        self.attacker.validate()?;
        if self.sweep.lambdas.is_empty() || self.sweep.estimators.is_empty() || self.sweep.seeds.is_empty() {
            return Err(validation("sweep grid must be non-empty"));
        }
        if let Some(l) = self.sweep.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(validation(format!("sweep lambda {l} must be finite and >= 0")));
        }
        self.sweep.kinds()?;
        self.estimate.validate()?;
        Ok(())
    }

    /// Train/test data for one seed; identical across lambdas and estimators.
    pub fn datasets(&self, seed: u64) -> Result<(TaskData, TaskData)> {
        let mut rng = Rng::new(seed).fork(streams::DATA);
        let train = self.task.generate(self.data.n_train, &mut rng)?;
        let test = self.task.generate(self.data.n_test, &mut rng)?;
        Ok((train, test))
    }
}

/// One point of a trade-off curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub estimator: String,
    pub alpha: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub task_accuracy: f64,
    pub attacker_accuracy: f64,
    /// Spread of the attacker accuracy across probe seeds.
    pub attacker_accuracy_std: f64,
    pub surrogate_mi: f64,
    pub status: String,
    pub diverged_at: Option<usize>,
    /// Not written to the records file, which must be reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TradeoffRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Train at one grid point, then measure task accuracy, attacker accuracy
/// and the final surrogate value on the held-out split.
pub fn run_point(config: &ExperimentConfig, lambda: f64, kind: EstimatorKind, seed: u64) -> Result<TradeoffRecord> {
    let start = Instant::now();
    let (train_data, test) = config.datasets(seed)?;
    let (d, d_prime) = train_data.split(config.train.split)?;
    let tc = TrainingConfig {
        lambda,
        estimator: kind,
        seed,
        ..config.train.clone()
    };
    let run = train(&d, &d_prime, &tc)?;
    let bundle = &run.bundle;
    let diverged = run.diverged.is_some();
    // a diverged encoder may emit non-finite features; its metrics become NaN
    // rather than aborting the sweep
    let soften = |r: Result<f64>| match r {
        Ok(v) => Ok(v),
        Err(_) if diverged => Ok(f64::NAN),
        Err(e) => Err(e),
    };
    let task_accuracy = soften(bundle.task_accuracy(&test))?;
    let attacker = match attacker_report(
        &bundle.encoder,
        &train_data,
        &test,
        &config.attacker,
        &Rng::new(seed).fork(streams::ATTACKER),
    ) {
        Ok(a) => a,
        Err(_) if diverged => AttackerReport {
            accuracies: vec![],
            mean: f64::NAN,
            std: f64::NAN,
        },
        Err(e) => return Err(e),
    };
    let surrogate_mi = final_surrogate(bundle, &test, &tc).unwrap_or(f64::NAN);
    Ok(TradeoffRecord {
        estimator: kind.to_string(),
        alpha: kind.alpha(),
        lambda,
        seed,
        task_accuracy,
        attacker_accuracy: attacker.mean,
        attacker_accuracy_std: attacker.std,
        surrogate_mi,
        status: if diverged { "diverged" } else { "ok" }.to_string(),
        diverged_at: run.diverged.map(|d| d.iteration),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn final_surrogate(bundle: &ModelBundle, test: &TaskData, config: &TrainingConfig) -> Result<f64> {
    let z = bundle.encode(test.x.view())?;
    let batch = LabeledBatch::new(z, test.attrs.clone(), test.n_attr_classes)?;
    let critic = config.estimator.needs_critic().then_some(&bundle.critic);
    let mut rng = Rng::new(config.seed).fork(streams::PERMUTATIONS);
    Ok(estimate_breakdown(&batch, &bundle.classifier, critic, &config.spec(), &mut rng)?.value)
}

/// Run every (lambda, estimator, seed) combination. Points run on the
/// current rayon pool; output is sorted by (estimator, lambda, seed).
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<TradeoffRecord>> {
    config.validate()?;
    let kinds = config.sweep.kinds()?;
    let mut points = Vec::new();
    for &kind in &kinds {
        for &lambda in &config.sweep.lambdas {
            for &seed in &config.sweep.seeds {
                points.push((lambda, kind, seed));
            }
        }
    }
    let mut records = points
        .into_par_iter()
        .map(|(lambda, kind, seed)| run_point(config, lambda, kind, seed))
        .collect::<Result<Vec<_>>>()?;
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [TradeoffRecord]) {
    records.sort_by(|a, b| {
        a.estimator
            .cmp(&b.estimator)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.seed.cmp(&b.seed))
    });
}

pub const RECORDS_SCHEMA: &str = "dismi-records/1";

/// Write records as CSV, preceded by a `#` comment line carrying the schema
/// version and any provenance text.
pub fn write_records_csv<W: Write>(records: &[TradeoffRecord], provenance: &str, mut out: W) -> Result<()> {
    writeln!(out, "# {RECORDS_SCHEMA} {provenance}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<TradeoffRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    validation(format!("records csv: {e}"))
}

/// Aggregate of all seeds at one (estimator, lambda).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub lambda: f64,
    pub runs: usize,
    pub failed: usize,
    pub task_mean: f64,
    pub task_se: f64,
    pub attacker_mean: f64,
    pub attacker_se: f64,
    pub surrogate_mean: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed-averaged rows, ordered by estimator then lambda.
pub fn summarize(records: &[TradeoffRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&TradeoffRecord>> = BTreeMap::new();
    for r in records {
        // lambdas are non-negative, so their bit patterns sort numerically
        groups.entry((r.estimator.clone(), r.lambda.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((estimator, bits), rs)| {
            let task: Vec<f64> = rs.iter().map(|r| r.task_accuracy).collect();
            let att: Vec<f64> = rs.iter().map(|r| r.attacker_accuracy).collect();
            let sur: Vec<f64> = rs.iter().map(|r| r.surrogate_mi).collect();
            let (task_mean, task_se) = mean_se(&task);
            let (attacker_mean, attacker_se) = mean_se(&att);
            SummaryRow {
                estimator,
                lambda: f64::from_bits(bits),
                runs: rs.len(),
                failed: rs.iter().filter(|r| !r.is_ok()).count(),
                task_mean,
                task_se,
                attacker_mean,
                attacker_se,
                surrogate_mean: mean_se(&sur).0,
            }
        })
        .collect()
}

pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "| estimator | lambda | runs | failed | task acc | task se | attacker acc | attacker se | surrogate MI |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.estimator, r.lambda, r.runs, r.failed, r.task_mean, r.task_se, r.attacker_mean, r.attacker_se, r.surrogate_mean
        ));
    }
    s
}

/// Line-oriented plotting description: one `figure` block per panel, one
/// `series` per estimator, one `point x y yerr` per lambda. Any plotting
/// tool can consume it with a few lines of glue.
pub fn render_plot_script(rows: &[SummaryRow]) -> String {
    let mut s = String::from("# dismi-plot/1\n");
    let panels: [(&str, &str, fn(&SummaryRow) -> (f64, f64)); 2] = [
        ("attacker_vs_lambda", "attacker accuracy", |r| (r.attacker_mean, r.attacker_se)),
        ("task_vs_lambda", "task accuracy", |r| (r.task_mean, r.task_se)),
    ];
    for (name, ylabel, value) in panels {
        s.push_str(&format!("figure {name}\nxlabel lambda\nxscale symlog\nylabel {ylabel}\n"));
        let mut current: Option<&str> = None;
        for r in rows {
            if current != Some(r.estimator.as_str()) {
                if current.is_some() {
                    s.push_str("end series\n");
                }
                s.push_str(&format!("series {}\n", r.estimator));
                current = Some(&r.estimator);
            }
            let (y, e) = value(r);
            s.push_str(&format!("point {} {} {}\n", r.lambda, y, e));
        }
        if current.is_some() {
            s.push_str("end series\n");
        }
        s.push_str("end figure\n");
    }
    s
}

/// `(lambda, mean, standard error)` series of one estimator's attacker
/// accuracy, sorted by lambda.
pub fn attacker_curve(rows: &[SummaryRow], estimator: &str) -> Vec<(f64, f64, f64)> {
    let mut v: Vec<_> = rows
        .iter()
        .filter(|r| r.estimator == estimator)
        .map(|r| (r.lambda, r.attacker_mean, r.attacker_se))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// True when each point exceeds its predecessor by at most one standard
/// error of their difference.
pub fn non_increasing_within_se(curve: &[(f64, f64, f64)]) -> bool {
    curve
        .windows(2)
        .all(|w| w[1].1 <= w[0].1 + (w[0].2 * w[0].2 + w[1].2 * w[1].2).sqrt())
}

/// Widest gap between consecutive sorted values, with the values below and
/// above it.
pub fn largest_gap(values: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (i, gap) = v
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i, w[1] - w[0]))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    Some((gap, v[..=i].to_vec(), v[i + 1..].to_vec()))
}

/// Largest number of values that are pairwise at least `min_sep` apart.
pub fn distinct_levels(values: &[f64], min_sep: f64) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut count = 0;
    let mut last = f64::NEG_INFINITY;
    for x in v {
        if x - last >= min_sep {
            count += 1;
            last = x;
        }
    }
    count
}

/// Mean attacker accuracy of a constant-output encoder is chance; exposed
/// for calibration checks.
pub fn constant_encoder(input_dim: usize, latent_dim: usize) -> Result<MlpNet> {
    MlpNet::zeros(&[input_dim, latent_dim], Head::Logits, 0.0)
}

/// Encoder that copies input column `column` into its single output.
pub fn passthrough_encoder(input_dim: usize, column: usize) -> Result<MlpNet> {
    let mut net = MlpNet::zeros(&[input_dim, 1], Head::Logits, 0.0)?;
    net.layers_mut()[0].weight[[column, 0]] = 1.0;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(est: &str, lambda: f64, seed: u64, att: f64) -> TradeoffRecord {
        TradeoffRecord {
            estimator: est.into(),
            alpha: None,
            lambda,
            seed,
            task_accuracy: 0.9,
            attacker_accuracy: att,
            attacker_accuracy_std: 0.0,
            surrogate_mi: 0.1,
            status: "ok".into(),
            diverged_at: None,
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn csv_roundtrip_drops_wall_clock() {
        let mut rs = vec![record("kl", 1.0, 2, 0.6), record("adv-ce", 0.1, 1, 0.7)];
        rs[1].status = "diverged".into();
        rs[1].diverged_at = Some(17);
        rs[1].alpha = Some(1.5);
        let mut buf = Vec::new();
        write_records_csv(&rs, "test", &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# dismi-records/1 test\n"));
        assert!(text.contains(
            "estimator,alpha,lambda,seed,task_accuracy,attacker_accuracy,attacker_accuracy_std,surrogate_mi,status,diverged_at"
        ));
        let back = read_records_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].diverged_at, Some(17));
        assert_eq!(back[0].wall_seconds, 0.0);
        assert_eq!(back[0].attacker_accuracy, 0.6);
    }

    #[test]
    fn sorting_and_summary() {
        let mut rs = vec![
            record("kl", 1.0, 1, 0.6),
            record("kl", 0.1, 0, 0.8),
            record("kl", 1.0, 0, 0.5),
            record("adv-ce", 10.0, 0, 0.7),
        ];
        sort_records(&mut rs);
        let order: Vec<_> = rs.iter().map(|r| (r.estimator.as_str(), r.lambda, r.seed)).collect();
        assert_eq!(order, vec![("adv-ce", 10.0, 0), ("kl", 0.1, 0), ("kl", 1.0, 0), ("kl", 1.0, 1)]);
        let rows = summarize(&rs);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].runs, 2);
        assert!((rows[2].attacker_mean - 0.55).abs() < 1e-15);
        assert!((rows[2].attacker_se - 0.05).abs() < 1e-15);
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 5);
        let plot = render_plot_script(&rows);
        assert_eq!(plot.matches("figure ").count(), 2);
        assert_eq!(plot.matches("series kl").count(), 2);
    }

    #[test]
    fn curve_checks() {
        assert!(non_increasing_within_se(&[(0.0, 0.9, 0.01), (1.0, 0.7, 0.01), (5.0, 0.71, 0.01)]));
        assert!(!non_increasing_within_se(&[(0.0, 0.7, 0.01), (1.0, 0.9, 0.01)]));
        let (gap, lo, hi) = largest_gap(&[0.5, 0.62, 0.51, 0.6]).unwrap();
        assert!((gap - 0.09).abs() < 1e-12);
        assert_eq!(lo, vec![0.5, 0.51]);
        assert_eq!(hi, vec![0.6, 0.62]);
        assert_eq!(distinct_levels(&[0.5, 0.51, 0.6, 0.62, 0.95], 0.03), 3);
        assert!(largest_gap(&[0.5]).is_none());
    }

    #[test]
    fn experiment_config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.sweep.estimators = vec!["mine".into()];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sweep.lambdas.clear();
        assert!(c.validate().is_err());
    }
}
