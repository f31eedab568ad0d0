//! Alternating optimization of an encoder against a downstream loss plus a
//! weighted MI surrogate.
//!
//! Each outer iteration first gives the attribute classifier, ratio critic
//! and task head `unroll` updates on batches from the auxiliary split `D'`
//! (with the encoder frozen), then takes one encoder step on a batch from
//! `D` using
//!
//! ```text
//! L = CE(task head(f(x)), l) + lambda * I_hat(f(x); y)
//! ```
//!
//! During the encoder step every auxiliary network is frozen: gradients flow
//! through their inputs but their parameters are not touched. For the
//! adversarial baseline the penalty is `-lambda * CE(adversary)`.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::estimators::{
    make_negatives, random_permutation, surrogate_from_logits, EntropyWeighting, EstimatorKind, EstimatorSpec,
    RatioCritic, SurrogateEstimate, DEFAULT_CLAMP_EPS,
};
use crate::nn::{ce_step, cross_entropy, sample_rows, AdamW, Head, MlpNet, NetConfig, OptimConfig};
use crate::prob::{LabeledBatch, TaskData, N_TARGET_CLASSES};
use crate::rng::{streams, Rng};

pub(crate) mod kind_string {
    use super::EstimatorKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &EstimatorKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&k.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EstimatorKind, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    /// `kl`, `renyi-<alpha>`, `vclub-s` or `adv-ce`.
    #[serde(with = "kind_string")]
    pub estimator: EstimatorKind,
    pub ratio_clamp_eps: f64,
    pub entropy_weighting: EntropyWeighting,
    /// Auxiliary updates per encoder update.
    pub unroll: usize,
    pub encoder_steps: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub encoder: NetConfig,
    /// Architecture shared by the attribute classifier, critic and task head.
    pub heads: NetConfig,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub lr_critic: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Fraction of the training rows assigned to the encoder split `D`.
    pub split: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 1.0,
            estimator: EstimatorKind::Renyi { alpha: 1.5 },
            ratio_clamp_eps: DEFAULT_CLAMP_EPS,
            entropy_weighting: EntropyWeighting::Empirical,
            unroll: 5,
            encoder_steps: 20_000,
            batch_size: 128,
            latent_dim: 8,
            encoder: NetConfig {
                dropout: 0.0,
                ..NetConfig::default()
            },
            heads: NetConfig::default(),
            lr_encoder: 1e-3,
            lr_classifier: 1e-3,
            lr_critic: 1e-3,
            lr_decoder: 1e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            split: 0.5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn spec(&self) -> EstimatorSpec {
        EstimatorSpec {
            kind: self.estimator,
            ratio_clamp_eps: self.ratio_clamp_eps,
            entropy_weighting: self.entropy_weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(validation(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.unroll == 0 {
            return Err(validation("unroll must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(validation("batch_size must be >= 2"));
        }
        if self.latent_dim == 0 {
            return Err(validation("latent_dim must be >= 1"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(validation("split must lie in (0, 1)"));
        }
        self.spec().validate()?;
        self.encoder.validate("encoder")?;
        self.heads.validate("heads")?;
        for lr in [self.lr_encoder, self.lr_classifier, self.lr_critic, self.lr_decoder] {
            self.optim(lr).validate()?;
        }
        Ok(())
    }

    fn optim(&self, lr: f64) -> OptimConfig {
        OptimConfig {
            lr,
            weight_decay: self.weight_decay,
            clip_norm: Some(self.clip_norm),
            ..OptimConfig::default()
        }
    }
}

/// Encoder, attribute classifier, ratio critic and task head.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub encoder: MlpNet,
    pub classifier: MlpNet,
    pub critic: RatioCritic,
    pub decoder: MlpNet,
}

impl ModelBundle {
    pub fn new(input_dim: usize, n_attr_classes: usize, config: &TrainingConfig, rng: &Rng) -> Result<Self> {
        let d = config.latent_dim;
        let encoder = config
            .encoder
            .build(input_dim, d, Head::Logits, &mut rng.fork(streams::ENCODER_INIT))?;
        let classifier = config
            .heads
            .build(d, n_attr_classes, Head::Logits, &mut rng.fork(streams::CLASSIFIER_INIT))?;
        let critic = RatioCritic::new(d, n_attr_classes, &config.heads, &mut rng.fork(streams::CRITIC_INIT))?;
        let decoder = config
            .heads
            .build(d, N_TARGET_CLASSES, Head::Logits, &mut rng.fork(streams::DECODER_INIT))?;
        let bundle = ModelBundle {
            encoder,
            classifier,
            critic,
            decoder,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.latent_dim();
        if self.classifier.input_dim() != d || self.critic.feature_dim() != d || self.decoder.input_dim() != d {
            return Err(validation("encoder output width differs from a head's input width"));
        }
        if self.critic.n_classes() != self.classifier.output_dim() {
            return Err(validation("critic and classifier disagree on the attribute classes"));
        }
        Ok(())
    }

    /// Representations of `x` (inference mode).
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder.predict(x)
    }

    /// Task-head accuracy on `data`.
    pub fn task_accuracy(&self, data: &TaskData) -> Result<f64> {
        let z = self.encode(data.x.view())?;
        Ok(crate::nn::accuracy(self.decoder.predict(z.view())?.view(), &data.targets))
    }
}

/// Value of the composite objective with its parts.
#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub total: f64,
    pub task_loss: f64,
    /// `lambda * surrogate`, or `-lambda * CE` for the adversarial baseline.
    pub penalty: f64,
    pub surrogate: SurrogateEstimate,
}

fn require_finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{term} is {value}")))
    }
}

/// Evaluate the composite loss on one batch and accumulate its gradient
/// into the encoder's buffers. Auxiliary networks are evaluated in inference
/// mode and left untouched. `rng` drives encoder dropout and, for vCLUB-S,
/// the permutation.
pub fn composite_loss(
    bundle: &mut ModelBundle,
    x: ArrayView2<'_, f64>,
    attrs: &[usize],
    targets: &[usize],
    config: &TrainingConfig,
    rng: &mut Rng,
) -> Result<CompositeLoss> {
    let spec = config.spec();
    let lambda = config.lambda;
    let mut dropout_rng = rng.fork(streams::DROPOUT);
    let enc = bundle.encoder.forward(x, true, &mut dropout_rng)?;
    let z = enc.output().view();

    let dec = bundle.decoder.forward(z, false, &mut dropout_rng)?;
    let (task_loss, d_task) = cross_entropy(dec.output().view(), targets)?;
    require_finite(task_loss, "task loss")?;
    let mut dz = bundle.decoder.input_gradient(&dec, d_task.view())?;

    let cls = bundle.classifier.forward(z, false, &mut dropout_rng)?;
    let critic_trace = if spec.kind.needs_critic() {
        if !bundle.critic.is_ready() {
            return Err(Error::State("ratio critic has not been trained".into()));
        }
        let inputs = bundle.critic.inputs(z, attrs)?;
        Some(bundle.critic.net().forward(inputs.view(), false, &mut dropout_rng)?)
    } else {
        None
    };
    let perm = (spec.kind == EstimatorKind::VClubS).then(|| random_permutation(attrs.len(), &mut rng.fork(streams::PERMUTATIONS)));
    let sg = surrogate_from_logits(
        cls.output().view(),
        critic_trace.as_ref().map(|t| t.output().view()),
        attrs,
        &spec,
        perm.as_deref(),
    )?;
    let penalty = match spec.kind {
        EstimatorKind::AdvCe => -lambda * sg.estimate.ce_term,
        _ => lambda * sg.estimate.value,
    };
    require_finite(penalty, "MI penalty")?;
    if lambda != 0.0 {
        // for the adversarial kind d_class_logits is already d(-CE)
        let g = bundle.classifier.input_gradient(&cls, sg.d_class_logits.view())?;
        dz.scaled_add(lambda, &g);
        if let (Some(trace), Some(dc)) = (&critic_trace, &sg.d_critic_logits) {
            let g = bundle.critic.net().input_gradient(trace, dc.view())?;
            dz.scaled_add(lambda, &g.slice(s![.., ..z.ncols()]));
        }
    }
    bundle.encoder.backward(&enc, dz.view())?;
    Ok(CompositeLoss {
        total: require_finite(task_loss + penalty, "composite loss")?,
        task_loss,
        penalty,
        surrogate: sg.estimate,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub task_loss: f64,
    pub attr_ce: f64,
    pub critic_loss: Option<f64>,
    pub surrogate_value: f64,
}

/// Losses of the last auxiliary update.
#[derive(Clone, Copy, Debug)]
pub struct InnerLosses {
    pub critic_loss: Option<f64>,
    pub attr_ce: f64,
    pub task_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub message: String,
}

/// Result of a training run. `diverged` is set when a non-finite loss or
/// gradient stopped training early; the bundle then holds the last finite
/// parameters.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub bundle: ModelBundle,
    pub log: Vec<LogRow>,
    pub diverged: Option<Divergence>,
}

/// Stateful driver of the alternating optimization.
pub struct Trainer<'a> {
    config: TrainingConfig,
    d: &'a TaskData,
    d_prime: &'a TaskData,
    bundle: ModelBundle,
    opt_encoder: AdamW,
    opt_classifier: AdamW,
    opt_critic: AdamW,
    opt_decoder: AdamW,
    batch_rng: Rng,
    aux_rng: Rng,
    encoder_rng: Rng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(d: &'a TaskData, d_prime: &'a TaskData, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        if d.is_empty() || d_prime.is_empty() {
            return Err(validation("training splits must be non-empty"));
        }
        if d.x.ncols() != d_prime.x.ncols() || d.n_attr_classes != d_prime.n_attr_classes {
            return Err(validation("training splits differ in shape"));
        }
        let root = Rng::new(config.seed);
        let bundle = ModelBundle::new(d.x.ncols(), d.n_attr_classes, config, &root)?;
        Ok(Trainer {
            opt_encoder: AdamW::new(&bundle.encoder, config.optim(config.lr_encoder)),
            opt_classifier: AdamW::new(&bundle.classifier, config.optim(config.lr_classifier)),
            opt_critic: AdamW::new(bundle.critic.net(), config.optim(config.lr_critic)),
            opt_decoder: AdamW::new(&bundle.decoder, config.optim(config.lr_decoder)),
            batch_rng: root.fork(streams::BATCHES),
            aux_rng: root.fork(streams::NEGATIVES),
            encoder_rng: root.fork(streams::DROPOUT),
            config: config.clone(),
            d,
            d_prime,
            bundle,
            iteration: 0,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn batch(&mut self, data: &TaskData) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
        let idx = sample_rows(data.len(), self.config.batch_size, &mut self.batch_rng);
        (
            data.x.select(Axis(0), &idx),
            idx.iter().map(|&i| data.attrs[i]).collect(),
            idx.iter().map(|&i| data.targets[i]).collect(),
        )
    }

    /// One update each of the critic, the attribute classifier and the task
    /// head on a fresh batch from `D'`. The encoder is not modified.
    pub fn inner_step(&mut self) -> Result<InnerLosses> {
        let d_prime = self.d_prime;
        let (x, attrs, targets) = self.batch(d_prime);
        let z = self.bundle.encode(x.view())?;
        let critic_loss = if self.config.estimator.needs_critic() {
            let positives = LabeledBatch::new(z.clone(), attrs.clone(), d_prime.n_attr_classes)?;
            let negatives = make_negatives(&positives, &self.bundle.classifier, &mut self.aux_rng)?;
            Some(
                self.bundle
                    .critic
                    .train_step(&mut self.opt_critic, &positives, &negatives, &mut self.aux_rng)?,
            )
        } else {
            None
        };
        let attr_ce = ce_step(&mut self.bundle.classifier, &mut self.opt_classifier, z.view(), &attrs, &mut self.aux_rng)?;
        let task_ce = ce_step(&mut self.bundle.decoder, &mut self.opt_decoder, z.view(), &targets, &mut self.aux_rng)?;
        Ok(InnerLosses {
            critic_loss,
            attr_ce,
            task_ce,
        })
    }

    /// One encoder update on a batch from `D`.
    pub fn encoder_step(&mut self) -> Result<CompositeLoss> {
        let d = self.d;
        let (x, attrs, targets) = self.batch(d);
        let mut step_rng = self.encoder_rng.fork(self.iteration as u64);
        self.bundle.encoder.zero_grad();
        let loss = composite_loss(&mut self.bundle, x.view(), &attrs, &targets, &self.config, &mut step_rng)?;
        self.opt_encoder.step(&mut self.bundle.encoder)?;
        Ok(loss)
    }

    /// `unroll` inner steps followed by one encoder step.
    pub fn outer_step(&mut self) -> Result<LogRow> {
        let mut inner = None;
        for _ in 0..self.config.unroll {
            inner = Some(self.inner_step()?);
        }
        let inner = inner.expect("unroll >= 1");
        let loss = self.encoder_step()?;
        let row = LogRow {
            step: self.iteration,
            task_loss: loss.task_loss,
            attr_ce: inner.attr_ce,
            critic_loss: inner.critic_loss,
            surrogate_value: loss.surrogate.value,
        };
        self.iteration += 1;
        Ok(row)
    }
}

/// Run the full alternating optimization for `config.encoder_steps` outer
/// iterations. Numeric failures end the run early and are reported in
/// [`TrainRun::diverged`]; other errors are returned.
pub fn train(d: &TaskData, d_prime: &TaskData, config: &TrainingConfig) -> Result<TrainRun> {
    let mut trainer = Trainer::new(d, d_prime, config)?;
    let mut log = Vec::with_capacity(config.encoder_steps);
    let mut diverged = None;
    for _ in 0..config.encoder_steps {
        match trainer.outer_step() {
            Ok(row) => log.push(row),
            Err(Error::Numeric(message)) => {
                diverged = Some(Divergence {
                    iteration: trainer.iteration(),
                    message,
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun {
        bundle: trainer.into_bundle(),
        log,
        diverged,
    })
}
