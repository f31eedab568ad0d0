//! Sample-based MI surrogates and baselines.
//!
//! All surrogates are computed from the attribute classifier's logits
//! `q(y|z)` and, for the KL and Renyi variants, the ratio critic's logits.
//! The functions in this module return both the value and the gradient with
//! respect to those logits so the training loop can backpropagate into the
//! encoder:
//!
//! * entropy term `-sum_y w(y) log((1/n) sum_i q(y|z_i))`, an upper estimate
//!   of H(Y);
//! * cross-entropy term `-(1/n) sum_i log q(y_i|z_i)`;
//! * divergence correction, either `(1/n) sum_i log R_i` (KL) or
//!   `1/(alpha-1) log((1/n) sum_i R_i^(alpha-1))` (Renyi), where `R` is the
//!   density ratio read off the critic.
//!
//! The MI surrogate is `entropy - (cross_entropy - correction)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Error, Result};
use crate::nn::{bce_with_logits, ce_step, log_softmax, sigmoid, AdamW, Head, MlpNet, NetConfig, OptimConfig};
use crate::prob::LabeledBatch;
use crate::rng::Rng;

pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

/// Alpha grid used for the Renyi surrogate in experiments.
pub const DEFAULT_ALPHAS: [f64; 3] = [1.3, 1.5, 1.8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EstimatorKind {
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "renyi")]
    Renyi { alpha: f64 },
    #[serde(rename = "vclub-s")]
    VClubS,
    #[serde(rename = "adv-ce")]
    AdvCe,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Kl => write!(f, "kl"),
            EstimatorKind::Renyi { alpha } => write!(f, "renyi-{alpha}"),
            EstimatorKind::VClubS => write!(f, "vclub-s"),
            EstimatorKind::AdvCe => write!(f, "adv-ce"),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    /// Accepts `kl`, `renyi-<alpha>` (or `renyi` for 1.5), `vclub-s`, `adv-ce`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "kl" => EstimatorKind::Kl,
            "vclub-s" | "vclubs" | "vclub" => EstimatorKind::VClubS,
            "adv-ce" | "adv" | "advce" => EstimatorKind::AdvCe,
            "renyi" => EstimatorKind::Renyi { alpha: 1.5 },
            other => {
                let alpha = other
                    .strip_prefix("renyi-")
                    .or_else(|| other.strip_prefix("renyi:"))
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| validation(format!("unknown estimator {s:?}")))?;
                EstimatorKind::Renyi { alpha }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        if let EstimatorKind::Renyi { alpha } = self {
            if !(*alpha > 1.0 && alpha.is_finite()) {
                return Err(domain(format!("renyi alpha must be > 1, got {alpha}")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            EstimatorKind::Renyi { alpha } => Some(*alpha),
            _ => None,
        }
    }

    /// Whether the kind uses the ratio critic.
    pub fn needs_critic(&self) -> bool {
        matches!(self, EstimatorKind::Kl | EstimatorKind::Renyi { .. })
    }
}

/// How the classes are weighted in the entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyWeighting {
    /// Empirical label frequencies (an expectation over Y).
    #[default]
    Empirical,
    /// Plain average over the classes.
    UniformClasses,
}

impl FromStr for EntropyWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(EntropyWeighting::Empirical),
            "uniform-classes" | "uniform" => Ok(EntropyWeighting::UniformClasses),
            _ => Err(validation(format!("unknown entropy weighting {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    #[serde(flatten)]
    pub kind: EstimatorKind,
    #[serde(default = "default_eps")]
    pub ratio_clamp_eps: f64,
    #[serde(default)]
    pub entropy_weighting: EntropyWeighting,
}

fn default_eps() -> f64 {
    DEFAULT_CLAMP_EPS
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec {
            kind,
            ratio_clamp_eps: DEFAULT_CLAMP_EPS,
            entropy_weighting: EntropyWeighting::Empirical,
        }
    }

    pub fn kl() -> Self {
        Self::new(EstimatorKind::Kl)
    }

    pub fn renyi(alpha: f64) -> Result<Self> {
        let kind = EstimatorKind::Renyi { alpha };
        kind.validate()?;
        Ok(Self::new(kind))
    }

    pub fn vclub_s() -> Self {
        Self::new(EstimatorKind::VClubS)
    }

    pub fn adv_ce() -> Self {
        Self::new(EstimatorKind::AdvCe)
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if !(self.ratio_clamp_eps > 0.0 && self.ratio_clamp_eps < 0.5) {
            return Err(validation(format!(
                "ratio_clamp_eps must lie in (0, 0.5), got {}",
                self.ratio_clamp_eps
            )));
        }
        Ok(())
    }
}

/// Per-term breakdown of an estimate, all in nats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEstimate {
    /// Upper estimate of H(Y) (KL / Renyi), or its plug-in value (adversarial).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_term: Option<f64>,
    /// `-(1/n) sum log q(y_i|z_i)`.
    pub ce_term: f64,
    /// Divergence correction (KL / Renyi).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correction_term: Option<f64>,
    /// `-(1/n) sum log q(y_pi(i)|z_i)` under a random permutation (vCLUB-S).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffled_ce_term: Option<f64>,
    pub value: f64,
}

/// Value and logit gradients of a surrogate.
#[derive(Clone, Debug)]
pub struct SurrogateGrad {
    pub estimate: SurrogateEstimate,
    /// d value / d classifier logits.
    pub d_class_logits: Array2<f64>,
    /// d value / d critic logits, when a critic is involved.
    pub d_critic_logits: Option<Array2<f64>>,
}

/// Density ratio `sigma(c) / (1 - sigma(c))` with `sigma` clamped to
/// `[eps, 1 - eps]`.
pub fn ratio_from_logit(logit: f64, eps: f64) -> f64 {
    log_ratio_from_logit(logit, eps).0.exp()
}

/// `(log R, d log R / d logit)`.
fn log_ratio_from_logit(logit: f64, eps: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    if s < eps {
        (eps.ln() - (1.0 - eps).ln(), 0.0)
    } else if s > 1.0 - eps {
        ((1.0 - eps).ln() - eps.ln(), 0.0)
    } else if logit.is_nan() {
        (f64::NAN, 0.0)
    } else {
        (logit, 1.0)
    }
}

fn class_weights(labels: &[usize], n_classes: usize, weighting: EntropyWeighting) -> Vec<f64> {
    match weighting {
        EntropyWeighting::UniformClasses => vec![1.0 / n_classes as f64; n_classes],
        EntropyWeighting::Empirical => {
            let mut w = vec![0.0; n_classes];
            for &y in labels {
                w[y] += 1.0;
            }
            let n = labels.len() as f64;
            w.iter_mut().for_each(|v| *v /= n);
            w
        }
    }
}

/// Entropy term and its gradient with respect to the logits.
fn entropy_term(logp: &Array2<f64>, labels: &[usize], weighting: EntropyWeighting) -> (f64, Array2<f64>) {
    let (n, k) = logp.dim();
    let q = logp.mapv(f64::exp);
    let w = class_weights(labels, k, weighting);
    let col_sums = q.sum_axis(Axis(0));
    let mut value = 0.0;
    // d value / d q[i, y] = -w_y / S_y, identical for every row
    let mut dq_row = Array1::zeros(k);
    for y in 0..k {
        if w[y] > 0.0 {
            value -= w[y] * (col_sums[y] / n as f64).ln();
            dq_row[y] = -w[y] / col_sums[y];
        }
    }
    let mut grad = Array2::zeros((n, k));
    for (i, mut g) in grad.outer_iter_mut().enumerate() {
        let qi = q.row(i);
        let inner = qi.dot(&dq_row);
        for j in 0..k {
            g[j] = qi[j] * (dq_row[j] - inner);
        }
    }
    (value, grad)
}

/// Cross-entropy term and its logit gradient.
fn ce_term(logp: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logp.nrows() as f64;
    let value = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / n;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    (value, grad)
}

/// Divergence correction from critic logits; returns value and gradient.
fn correction_term(critic_logits: ArrayView2<'_, f64>, alpha: Option<f64>, eps: f64) -> (f64, Array2<f64>) {
    let n = critic_logits.nrows();
    let (log_r, dlog): (Vec<f64>, Vec<f64>) =
        critic_logits.column(0).iter().map(|&c| log_ratio_from_logit(c, eps)).unzip();
    let mut grad = Array2::zeros((n, 1));
    match alpha {
        None => {
            let value = log_r.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                grad[[i, 0]] = dlog[i] / n as f64;
            }
            (value, grad)
        }
        Some(alpha) => {
            let a = alpha - 1.0;
            let scaled: Vec<f64> = log_r.iter().map(|l| a * l).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let value = (max + total.ln() - (n as f64).ln()) / a;
            for i in 0..n {
                grad[[i, 0]] = exps[i] / total * dlog[i];
            }
            (value, grad)
        }
    }
}

fn check_logits(class_logits: ArrayView2<'_, f64>, labels: &[usize], n_classes: usize) -> Result<()> {
    let (n, k) = class_logits.dim();
    if k != n_classes {
        return Err(validation(format!("classifier has {k} outputs for {n_classes} classes")));
    }
    if labels.len() != n || n == 0 {
        return Err(validation(format!("{} labels for {n} logit rows", labels.len())));
    }
    Ok(())
}

/// Surrogate value and logit gradients for any estimator kind.
///
/// `permutation` is required for vCLUB-S and ignored otherwise;
/// `critic_logits` is required for KL and Renyi.
pub fn surrogate_from_logits(
    class_logits: ArrayView2<'_, f64>,
    critic_logits: Option<ArrayView2<'_, f64>>,
    labels: &[usize],
    spec: &EstimatorSpec,
    permutation: Option<&[usize]>,
) -> Result<SurrogateGrad> {
    let k = class_logits.ncols();
    check_logits(class_logits, labels, k)?;
    let n = labels.len();
    let logp = log_softmax(class_logits);
    match spec.kind {
        EstimatorKind::Kl | EstimatorKind::Renyi { .. } => {
            let critic_logits =
                critic_logits.ok_or_else(|| Error::State(format!("{} surrogate needs a ratio critic", spec.kind)))?;
            if critic_logits.dim() != (n, 1) {
                return Err(validation("critic logits must be n x 1"));
            }
            let (h, dh) = entropy_term(&logp, labels, spec.entropy_weighting);
            let (ce, dce) = ce_term(&logp, labels);
            let (corr, dcorr) = correction_term(critic_logits, spec.kind.alpha(), spec.ratio_clamp_eps);
            Ok(SurrogateGrad {
                estimate: SurrogateEstimate {
                    entropy_term: Some(h),
                    ce_term: ce,
                    correction_term: Some(corr),
                    shuffled_ce_term: None,
                    value: h - ce + corr,
                },
                d_class_logits: dh - dce,
                d_critic_logits: Some(dcorr),
            })
        }
        EstimatorKind::VClubS => {
            let perm = permutation.ok_or_else(|| validation("vCLUB-S needs a permutation"))?;
            if perm.len() != n || perm.iter().any(|&p| p >= n) {
                return Err(validation("permutation does not match the batch"));
            }
            let (ce, _) = ce_term(&logp, labels);
            let shuffled: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
            let (ce_neg, _) = ce_term(&logp, &shuffled);
            // d/dlogits of (1/n) sum [log q(y_i|z_i) - log q(y_pi(i)|z_i)]
            let mut grad = Array2::zeros((n, k));
            for i in 0..n {
                grad[[i, labels[i]]] += 1.0 / n as f64;
                grad[[i, shuffled[i]]] -= 1.0 / n as f64;
            }
            Ok(SurrogateGrad {
                estimate: SurrogateEstimate {
                    entropy_term: None,
                    ce_term: ce,
                    correction_term: None,
                    shuffled_ce_term: Some(ce_neg),
                    value: ce_neg - ce,
                },
                d_class_logits: grad,
                d_critic_logits: None,
            })
        }
        EstimatorKind::AdvCe => {
            let (ce, dce) = ce_term(&logp, labels);
            let w = class_weights(labels, k, EntropyWeighting::Empirical);
            let h = -w.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            Ok(SurrogateGrad {
                estimate: SurrogateEstimate {
                    entropy_term: Some(h),
                    ce_term: ce,
                    correction_term: None,
                    shuffled_ce_term: None,
                    value: h - ce,
                },
                d_class_logits: -dce,
                d_critic_logits: None,
            })
        }
    }
}

/// Class log-probabilities from a logits- or softmax-headed classifier.
pub fn class_log_probs(classifier: &MlpNet, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let out = classifier.predict(features)?;
    match classifier.head() {
        Head::Logits => Ok(log_softmax(out.view())),
        Head::Softmax => Ok(out.mapv(f64::ln)),
        Head::Sigmoid => Err(validation("classifier must have a logits or softmax head")),
    }
}

fn classifier_logits(batch: &LabeledBatch, classifier: &MlpNet) -> Result<Array2<f64>> {
    if classifier.output_dim() != batch.n_classes() {
        return Err(validation(format!(
            "classifier has {} outputs for {} classes",
            classifier.output_dim(),
            batch.n_classes()
        )));
    }
    // log-probabilities are valid logits for the softmax
    class_log_probs(classifier, batch.features())
}

/// Negatives for the ratio critic: each `z_i` paired with `y_hat_i ~ q(.|z_i)`.
pub fn make_negatives(batch: &LabeledBatch, classifier: &MlpNet, rng: &mut Rng) -> Result<LabeledBatch> {
    let logp = classifier_logits(batch, classifier)?;
    let labels = sample_from_log_probs(&logp, rng);
    batch.with_labels(labels)
}

pub(crate) fn sample_from_log_probs(logp: &Array2<f64>, rng: &mut Rng) -> Vec<usize> {
    logp.outer_iter()
        .map(|row| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let k = row.len();
            for (j, &lp) in row.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    return j;
                }
            }
            // rounding left u just above the cumulative total
            row.iter()
                .enumerate()
                .rev()
                .find(|(_, lp)| lp.exp() > 0.0)
                .map_or(k - 1, |(j, _)| j)
        })
        .collect()
}

/// Binary classifier over `(z, onehot(y))` whose odds estimate
/// `p(y|z) / q(y|z)`. Positives are labelled with target 1, so
/// `sigma(C(z, y))` estimates the posterior of the positive class.
#[derive(Clone, Debug)]
pub struct RatioCritic {
    net: MlpNet,
    feature_dim: usize,
    n_classes: usize,
    steps: u64,
    last_loss: Option<f64>,
    ready: bool,
}

/// Architecture and budget for standalone classifier or critic training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub steps: usize,
    /// Rows drawn from each of positives and negatives per step.
    pub batch_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            net: NetConfig::default(),
            optim: OptimConfig::default(),
            steps: 2000,
            batch_size: 128,
        }
    }
}

impl RatioCritic {
    /// Freshly initialized critic; unusable for estimation until trained.
    pub fn new(feature_dim: usize, n_classes: usize, config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let net = config.build(feature_dim + n_classes, 1, Head::Logits, rng)?;
        Ok(RatioCritic {
            net,
            feature_dim,
            n_classes,
            steps: 0,
            last_loss: None,
            ready: false,
        })
    }

    /// Critic with all-zero logits, i.e. `R = 1` everywhere.
    pub fn identity(feature_dim: usize, n_classes: usize) -> Self {
        let net = MlpNet::zeros(&[feature_dim + n_classes, 1], Head::Logits, 0.0).expect("positive widths");
        RatioCritic {
            net,
            feature_dim,
            n_classes,
            steps: 0,
            last_loss: None,
            ready: true,
        }
    }

    /// Wrap an already trained network (e.g. loaded from a checkpoint).
    pub fn from_net(net: MlpNet, feature_dim: usize, n_classes: usize) -> Result<Self> {
        if net.input_dim() != feature_dim + n_classes || net.output_dim() != 1 || net.head() != Head::Logits {
            return Err(validation(format!(
                "critic network must map {} inputs to one logit",
                feature_dim + n_classes
            )));
        }
        Ok(RatioCritic {
            net,
            feature_dim,
            n_classes,
            steps: 0,
            last_loss: None,
            ready: true,
        })
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpNet {
        &mut self.net
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    /// `[z, onehot(y)]` rows.
    pub fn inputs(&self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
        if features.ncols() != self.feature_dim || labels.len() != features.nrows() {
            return Err(validation(format!(
                "critic expects {}-dim features with one label per row",
                self.feature_dim
            )));
        }
        let mut onehot = Array2::zeros((labels.len(), self.n_classes));
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.n_classes {
                return Err(validation(format!("label {y} out of range for the critic")));
            }
            onehot[[i, y]] = 1.0;
        }
        let onehot_view = onehot.view();
        Ok(concatenate(Axis(1), &[features.view(), onehot_view]).expect("row counts match"))
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
        self.net.predict(self.inputs(features, labels)?.view())
    }

    /// Estimated density ratio at one point.
    pub fn ratio(&self, z: &[f64], y: usize, eps: f64) -> Result<f64> {
        let f = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| validation(e.to_string()))?;
        Ok(ratio_from_logit(self.logits(f.view(), &[y])?[[0, 0]], eps))
    }

    /// One balanced binary cross-entropy step: positives target 1,
    /// negatives target 0.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW,
        positives: &LabeledBatch,
        negatives: &LabeledBatch,
        rng: &mut Rng,
    ) -> Result<f64> {
        let pos = self.inputs(positives.features(), positives.labels())?;
        let neg = self.inputs(negatives.features(), negatives.labels())?;
        let x = concatenate(Axis(0), &[pos.view(), neg.view()]).expect("same width");
        let targets: Vec<f64> = std::iter::repeat_n(1.0, pos.nrows())
            .chain(std::iter::repeat_n(0.0, neg.nrows()))
            .collect();
        let trace = self.net.forward(x.view(), true, rng)?;
        let (loss, grad) = bce_with_logits(trace.output().view(), &targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("critic loss is {loss}")));
        }
        self.net.backward(&trace, grad.view())?;
        opt.step(&mut self.net)?;
        self.steps += 1;
        self.last_loss = Some(loss);
        self.ready = true;
        Ok(loss)
    }
}

fn subsample(batch: &LabeledBatch, idx: &[usize]) -> Result<LabeledBatch> {
    LabeledBatch::new(
        batch.features().select(Axis(0), idx),
        idx.iter().map(|&i| batch.labels()[i]).collect(),
        batch.n_classes(),
    )
}

/// Fit a fresh critic to separate `positives` (from p_ZY) from `negatives`
/// (from p_Z q).
pub fn train_ratio_critic(
    positives: &LabeledBatch,
    negatives: &LabeledBatch,
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<RatioCritic> {
    if positives.len() != negatives.len() {
        return Err(validation(format!(
            "critic training needs balanced classes, got {} positives and {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    if positives.dim() != negatives.dim() || positives.n_classes() != negatives.n_classes() {
        return Err(validation("positives and negatives differ in shape"));
    }
    config.net.validate("critic")?;
    config.optim.validate()?;
    let mut critic = RatioCritic::new(positives.dim(), positives.n_classes(), &config.net, &mut rng.fork(1))?;
    let mut opt = AdamW::new(critic.net(), config.optim.clone());
    let mut batch_rng = rng.fork(2);
    let mut dropout_rng = rng.fork(3);
    let m = config.batch_size.min(positives.len()).max(1);
    for _ in 0..config.steps {
        let pi = crate::nn::sample_rows(positives.len(), m, &mut batch_rng);
        let ni = crate::nn::sample_rows(negatives.len(), m, &mut batch_rng);
        critic.train_step(&mut opt, &subsample(positives, &pi)?, &subsample(negatives, &ni)?, &mut dropout_rng)?;
    }
    critic.ready = true;
    Ok(critic)
}

/// Fit a fresh logits classifier q(y|z) on `batch` by minibatch cross-entropy.
pub fn train_classifier(batch: &LabeledBatch, config: &FitConfig, rng: &mut Rng) -> Result<MlpNet> {
    config.net.validate("classifier")?;
    config.optim.validate()?;
    let mut net = config.net.build(batch.dim(), batch.n_classes(), Head::Logits, &mut rng.fork(1))?;
    let mut opt = AdamW::new(&net, config.optim.clone());
    let mut batch_rng = rng.fork(2);
    let mut dropout_rng = rng.fork(3);
    let m = config.batch_size.min(batch.len()).max(1);
    for _ in 0..config.steps {
        let idx = crate::nn::sample_rows(batch.len(), m, &mut batch_rng);
        let sub = subsample(batch, &idx)?;
        ce_step(&mut net, &mut opt, sub.features(), sub.labels(), &mut dropout_rng)?;
    }
    Ok(net)
}

/// Classifier plus, for kinds that need one, a critic trained against
/// negatives drawn from that classifier. Everything is fit on `batch`.
pub fn fit_estimator(
    batch: &LabeledBatch,
    spec: &EstimatorSpec,
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<(MlpNet, Option<RatioCritic>)> {
    spec.validate()?;
    let classifier = train_classifier(batch, config, &mut rng.fork(1))?;
    if !spec.kind.needs_critic() {
        return Ok((classifier, None));
    }
    let negatives = make_negatives(batch, &classifier, &mut rng.fork(2))?;
    let critic = train_ratio_critic(batch, &negatives, config, &mut rng.fork(3))?;
    Ok((classifier, Some(critic)))
}

/// Upper estimate of H(Y) from the classifier's averaged predictions.
pub fn estimate_entropy_upper(batch: &LabeledBatch, classifier: &MlpNet, spec: &EstimatorSpec) -> Result<f64> {
    let logp = classifier_logits(batch, classifier)?;
    Ok(entropy_term(&logp, batch.labels(), spec.entropy_weighting).0)
}

fn critic_logits_for(batch: &LabeledBatch, critic: &RatioCritic) -> Result<Array2<f64>> {
    if !critic.is_ready() {
        return Err(Error::State("ratio critic has not been trained".into()));
    }
    critic.logits(batch.features(), batch.labels())
}

/// Cross-entropy minus the divergence correction: a lower estimate of H(Y|Z).
pub fn estimate_cond_entropy_lower(
    batch: &LabeledBatch,
    classifier: &MlpNet,
    critic: &RatioCritic,
    spec: &EstimatorSpec,
) -> Result<f64> {
    if !spec.kind.needs_critic() {
        return Err(validation(format!("{} has no conditional-entropy estimate", spec.kind)));
    }
    let logp = classifier_logits(batch, classifier)?;
    let (ce, _) = ce_term(&logp, batch.labels());
    let c = critic_logits_for(batch, critic)?;
    let (corr, _) = correction_term(c.view(), spec.kind.alpha(), spec.ratio_clamp_eps);
    Ok(ce - corr)
}

/// KL or Renyi MI surrogate.
pub fn estimate_mi_surrogate(
    batch: &LabeledBatch,
    classifier: &MlpNet,
    critic: &RatioCritic,
    spec: &EstimatorSpec,
) -> Result<f64> {
    Ok(estimate_breakdown(batch, classifier, Some(critic), spec, &mut Rng::new(0))?.value)
}

/// Estimate with a per-term breakdown for any estimator kind. `rng` draws the
/// vCLUB-S permutation.
pub fn estimate_breakdown(
    batch: &LabeledBatch,
    classifier: &MlpNet,
    critic: Option<&RatioCritic>,
    spec: &EstimatorSpec,
    rng: &mut Rng,
) -> Result<SurrogateEstimate> {
    spec.validate()?;
    let logits = classifier_logits(batch, classifier)?;
    let critic_logits = match (spec.kind.needs_critic(), critic) {
        (true, Some(c)) => Some(critic_logits_for(batch, c)?),
        (true, None) => return Err(Error::State(format!("{} surrogate needs a ratio critic", spec.kind))),
        (false, _) => None,
    };
    let perm = (spec.kind == EstimatorKind::VClubS).then(|| random_permutation(batch.len(), rng));
    let out = surrogate_from_logits(
        logits.view(),
        critic_logits.as_ref().map(|c| c.view()),
        batch.labels(),
        spec,
        perm.as_deref(),
    )?;
    Ok(out.estimate)
}

pub fn random_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Sampled contrastive bound with one shuffled negative per positive.
pub fn estimate_vclub_s(batch: &LabeledBatch, classifier: &MlpNet, rng: &mut Rng) -> Result<f64> {
    let perm = random_permutation(batch.len(), rng);
    estimate_vclub_s_with_permutation(batch, classifier, &perm)
}

pub fn estimate_vclub_s_with_permutation(batch: &LabeledBatch, classifier: &MlpNet, perm: &[usize]) -> Result<f64> {
    let logits = classifier_logits(batch, classifier)?;
    let spec = EstimatorSpec::vclub_s();
    Ok(surrogate_from_logits(logits.view(), None, batch.labels(), &spec, Some(perm))?.estimate.value)
}

/// Mean cross-entropy of a discriminator predicting `y` from `z`, with the
/// gradient of that mean with respect to the discriminator logits.
#[derive(Clone, Debug)]
pub struct AdvCeTerm {
    pub ce: f64,
    pub d_logits: Array2<f64>,
}

pub fn adversarial_ce_term(batch: &LabeledBatch, discriminator: &MlpNet) -> Result<AdvCeTerm> {
    let logp = classifier_logits(batch, discriminator)?;
    let (ce, d_logits) = ce_term(&logp, batch.labels());
    Ok(AdvCeTerm { ce, d_logits })
}
