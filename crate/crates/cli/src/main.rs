//! `dismi`: oracle queries, surrogate estimation, training, lambda sweeps and
//! reports from one binary.

mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dismi_core::estimators::{estimate_breakdown, fit_estimator, make_negatives, train_ratio_critic};
use dismi_core::eval::{self, ExperimentConfig};
use dismi_core::oracle::{exact_bound_rhs, info_report, REPORT_ALPHAS};
use dismi_core::rng::{streams, Rng};
use dismi_core::train::train;
use dismi_core::{
    ConditionalTable, DiscreteJoint, EstimatorKind, EstimatorSpec, InfoReport, LabeledBatch, MlpNet, NetCheckpoint,
    RatioCritic, SurrogateEstimate,
};

use manifest::{sha256_hex, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "dismi", version, about = "Mutual-information surrogates for disentangled representations")]
struct Cli {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (for `sweep`, replaces the seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Without it, results go to stdout only.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Unit of reported information quantities.
    #[arg(long, global = true, value_enum, default_value_t = Units::Nats)]
    units: Units,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Validate the config (after overrides), print it resolved, and exit.
    #[arg(long, global = true)]
    check_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact information quantities of a discrete joint given as JSON.
    Oracle {
        /// `{"probs": [[..]], "ref_cond": [[..]]}`; `ref_cond` defaults to p(y|z).
        joint: PathBuf,
    },
    /// Surrogate MI estimate on a labeled batch given as JSON.
    Estimate {
        /// `{"n_classes": k, "features": [[..]], "labels": [..]}`.
        batch: PathBuf,
        /// Classifier checkpoint; fitted on the batch when absent.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Critic checkpoint; fitted on the batch when absent.
        #[arg(long)]
        critic: Option<PathBuf>,
        /// Overrides `estimate.estimator` (kl, renyi-1.5, vclub-s, adv-ce).
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Train one model bundle on the synthetic task.
    Train,
    /// Train and evaluate every point of the lambda/estimator/seed grid.
    Sweep,
    /// Summary table and plot script from a records CSV.
    Report {
        records: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Units {
    Nats,
    Bits,
}

impl Units {
    fn name(self) -> &'static str {
        match self {
            Units::Nats => "nats",
            Units::Bits => "bits",
        }
    }

    fn factor(self) -> f64 {
        match self {
            Units::Nats => 1.0,
            Units::Bits => std::f64::consts::LOG2_E,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core { context: String, source: dismi_core::Error },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core { source, .. } => source.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core { context, source } => format!("{context}: {source}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<dismi_core::Error>> Context<T> for Result<T, E> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Core {
            context: context(),
            source: e.into(),
        })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = emit(&e.to_string());
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&usage(e.to_string().trim().to_string())),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let body = json!({"error": {"kind": e.kind(), "message": e.message()}});
    eprintln!("{body}");
    ExitCode::from(match e {
        CliError::Usage(_) => 2,
        CliError::Core { .. } => 1,
    })
}

struct Ctx<'a> {
    cli: &'a Cli,
    config: ExperimentConfig,
    inputs: BTreeMap<String, String>,
}

impl Ctx<'_> {
    fn manifest(&self, subcommand: &str, seed: Option<u64>, config: Value) -> RunManifest {
        RunManifest::new(
            subcommand,
            self.cli.config.as_ref().map(|p| p.display().to_string()),
            seed,
            self.cli.out.as_ref().map(|p| p.display().to_string()),
            self.cli.units.name(),
            config,
            self.inputs.clone(),
        )
    }

    fn read_input(&mut self, role: &str, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
        self.inputs.insert(role.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn out_dir(&self) -> CliResult<Option<&Path>> {
        match &self.cli.out {
            Some(dir) => {
                fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
                Ok(Some(dir))
            }
            None => Ok(None),
        }
    }

    fn require_out(&self, what: &str) -> CliResult<&Path> {
        self.out_dir()?.ok_or_else(|| usage(format!("{what} requires --out <dir>")))
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).ctx(|| format!("reading config {}", path.display()))?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| usage(format!("config {}: {}", path.display(), e.to_string().trim_end())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.estimate.seed = seed;
        config.sweep.seeds = vec![seed];
    }
    config
        .validate()
        .map_err(|e| usage(format!("invalid config: {}", strip_kind(&e))))?;
    Ok(config)
}

fn strip_kind(e: &dismi_core::Error) -> String {
    match e {
        dismi_core::Error::Validation(m) | dismi_core::Error::Domain(m) => m.clone(),
        other => other.to_string(),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if cli.threads == Some(0) {
        return Err(usage("--threads must be >= 1"));
    }
    let config = load_config(cli)?;
    if cli.check_config {
        let text = toml::to_string(&config).map_err(|e| usage(format!("config does not serialize: {e}")))?;
        emit(&format!("{}\n", json!({"status": "ok", "config": to_value(&config)?, "toml": text})))?;
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(usage("no subcommand given (oracle, estimate, train, sweep, report)"));
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("--threads: {e}")))?;
    }
    let mut ctx = Ctx {
        cli,
        config,
        inputs: BTreeMap::new(),
    };
    match command {
        Command::Oracle { joint } => cmd_oracle(&mut ctx, joint),
        Command::Estimate {
            batch,
            classifier,
            critic,
            estimator,
        } => cmd_estimate(&mut ctx, batch, classifier.as_deref(), critic.as_deref(), estimator.as_deref()),
        Command::Train => cmd_train(&mut ctx),
        Command::Sweep => cmd_sweep(&mut ctx),
        Command::Report { records } => cmd_report(&mut ctx, records),
    }
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).ctx(|| "serializing output".to_string())
}

fn pretty<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).ctx(|| "serializing output".to_string())? + "\n")
}

fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .ctx(|| "writing stdout".to_string())
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).ctx(|| format!("writing {}", path.display()))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult<()> {
    write_file(dir, "manifest.json", &pretty(manifest)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleInput {
    probs: Vec<Vec<f64>>,
    #[serde(default)]
    ref_cond: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct OracleOutput {
    manifest: String,
    units: &'static str,
    #[serde(flatten)]
    report: InfoReport,
    /// Exact right-hand side of each bound for `ref_cond`.
    bounds: BTreeMap<String, f64>,
}

fn cmd_oracle(ctx: &mut Ctx, path: &Path) -> CliResult<()> {
    let bytes = ctx.read_input("joint", path)?;
    let input: OracleInput =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("joint file {}: {e}", path.display())))?;
    let joint = DiscreteJoint::from_rows(&input.probs).ctx(|| format!("joint file {}", path.display()))?;
    let ref_cond = match &input.ref_cond {
        Some(rows) => ConditionalTable::from_rows(rows).ctx(|| format!("ref_cond in {}", path.display()))?,
        None => joint.conditional(),
    };
    let factor = ctx.cli.units.factor();
    let report = info_report(&joint, &ref_cond).ctx(|| "oracle".to_string())?.scaled(factor);
    let mut specs = vec![("kl".to_string(), EstimatorSpec::kl())];
    for a in REPORT_ALPHAS {
        specs.push((format!("renyi-{a}"), EstimatorSpec::renyi(a).ctx(|| "oracle".to_string())?));
    }
    specs.push(("vclub".to_string(), EstimatorSpec::vclub_s()));
    specs.push(("ce-lower".to_string(), EstimatorSpec::adv_ce()));
    let mut bounds = BTreeMap::new();
    for (name, spec) in specs {
        let v = exact_bound_rhs(&joint, &ref_cond, &spec).ctx(|| format!("{name} bound"))?;
        bounds.insert(name, v * factor);
    }
    let manifest = ctx.manifest("oracle", None, Value::Null);
    let text = pretty(&OracleOutput {
        manifest: manifest.hash.clone(),
        units: ctx.cli.units.name(),
        report,
        bounds,
    })?;
    emit(&text)?;
    if let Some(dir) = ctx.out_dir()? {
        write_file(dir, "oracle.json", &text)?;
        write_manifest(dir, &manifest)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    manifest: String,
    units: &'static str,
    estimator: String,
    n: usize,
    #[serde(flatten)]
    estimate: SurrogateEstimate,
}

fn scale_estimate(mut e: SurrogateEstimate, factor: f64) -> SurrogateEstimate {
    for v in [
        &mut e.entropy_term,
        &mut e.correction_term,
        &mut e.shuffled_ce_term,
    ]
    .into_iter()
    .flatten()
    {
        *v *= factor;
    }
    e.ce_term *= factor;
    e.value *= factor;
    e
}

fn load_net(ctx: &mut Ctx, role: &str, path: &Path) -> CliResult<MlpNet> {
    let bytes = ctx.read_input(role, path)?;
    let ck: NetCheckpoint =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("{role} checkpoint {}: {e}", path.display())))?;
    MlpNet::from_checkpoint(&ck).ctx(|| format!("{role} checkpoint {}", path.display()))
}

fn checkpoint_json(net: &MlpNet, manifest: &str) -> CliResult<String> {
    let mut ck = net.to_checkpoint();
    ck.manifest = Some(manifest.to_string());
    pretty(&ck)
}

fn cmd_estimate(
    ctx: &mut Ctx,
    path: &Path,
    classifier_path: Option<&Path>,
    critic_path: Option<&Path>,
    estimator: Option<&str>,
) -> CliResult<()> {
    if let Some(s) = estimator {
        ctx.config.estimate.estimator = s
            .parse::<EstimatorKind>()
            .map_err(|e| usage(format!("--estimator: {}", strip_kind(&e))))?;
    }
    let cfg = ctx.config.estimate.clone();
    let spec = cfg.spec();
    let bytes = ctx.read_input("batch", path)?;
    let batch: LabeledBatch =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("batch file {}: {e}", path.display())))?;
    let root = Rng::new(cfg.seed);
    let (classifier, critic) = match classifier_path {
        Some(p) => {
            let classifier = load_net(ctx, "classifier", p)?;
            let critic = match (spec.kind.needs_critic(), critic_path) {
                (false, _) => None,
                (true, Some(cp)) => {
                    let net = load_net(ctx, "critic", cp)?;
                    Some(RatioCritic::from_net(net, batch.dim(), batch.n_classes()).ctx(|| format!("critic {}", cp.display()))?)
                }
                (true, None) => {
                    let negatives = make_negatives(&batch, &classifier, &mut root.fork(streams::NEGATIVES))
                        .ctx(|| "negative sampling".to_string())?;
                    Some(
                        train_ratio_critic(&batch, &negatives, &cfg.fit, &mut root.fork(streams::CRITIC_INIT))
                            .ctx(|| "fitting critic".to_string())?,
                    )
                }
            };
            (classifier, critic)
        }
        None if critic_path.is_some() => return Err(usage("--critic requires --classifier")),
        None => fit_estimator(&batch, &spec, &cfg.fit, &mut root.fork(streams::CLASSIFIER_INIT))
            .ctx(|| "fitting estimator".to_string())?,
    };
    let estimate = estimate_breakdown(
        &batch,
        &classifier,
        critic.as_ref(),
        &spec,
        &mut root.fork(streams::PERMUTATIONS),
    )
    .ctx(|| "estimating".to_string())?;
    let manifest = ctx.manifest("estimate", Some(cfg.seed), to_value(&cfg)?);
    let text = pretty(&EstimateOutput {
        manifest: manifest.hash.clone(),
        units: ctx.cli.units.name(),
        estimator: spec.kind.to_string(),
        n: batch.len(),
        estimate: scale_estimate(estimate, ctx.cli.units.factor()),
    })?;
    emit(&text)?;
    if let Some(dir) = ctx.out_dir()? {
        write_file(dir, "estimate.json", &text)?;
        write_file(dir, "classifier.json", &checkpoint_json(&classifier, &manifest.hash)?)?;
        if let Some(c) = &critic {
            write_file(dir, "critic.json", &checkpoint_json(c.net(), &manifest.hash)?)?;
        }
        write_manifest(dir, &manifest)?;
    }
    Ok(())
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_train(ctx: &mut Ctx) -> CliResult<()> {
    let dir = ctx.require_out("train")?.to_path_buf();
    let cfg = ctx.config.clone();
    let seed = cfg.train.seed;
    let manifest = ctx.manifest("train", Some(seed), json!({"task": to_value(&cfg.task)?, "data": to_value(&cfg.data)?, "train": to_value(&cfg.train)?}));
    let (train_data, test) = cfg.datasets(seed).ctx(|| "generating data".to_string())?;
    let (d, d_prime) = train_data.split(cfg.train.split).ctx(|| "splitting data".to_string())?;
    let run = train(&d, &d_prime, &cfg.train).ctx(|| "training".to_string())?;
    let b = &run.bundle;
    for (name, net) in [
        ("encoder", &b.encoder),
        ("classifier", &b.classifier),
        ("critic", b.critic.net()),
        ("decoder", &b.decoder),
    ] {
        write_file(&dir, &format!("{name}.json"), &checkpoint_json(net, &manifest.hash)?)?;
    }
    let mut log = format!("# dismi-train-log/1 manifest={}\nstep,task_loss,attr_ce,critic_loss,surrogate_value\n", manifest.hash);
    for r in &run.log {
        let _ = writeln!(
            log,
            "{},{},{},{},{}",
            r.step,
            r.task_loss,
            r.attr_ce,
            opt_num(r.critic_loss),
            r.surrogate_value
        );
    }
    write_file(&dir, "train_log.csv", &log)?;
    let summary = json!({
        "manifest": manifest.hash,
        "estimator": cfg.train.estimator.to_string(),
        "lambda": cfg.train.lambda,
        "seed": seed,
        "steps_completed": run.log.len(),
        "task_accuracy": b.task_accuracy(&test).ctx(|| "task accuracy".to_string())?,
        "diverged": run.diverged,
        "final": run.log.last(),
    });
    let text = pretty(&summary)?;
    write_file(&dir, "summary.json", &text)?;
    write_manifest(&dir, &manifest)?;
    emit(&text)?;
    Ok(())
}

fn cmd_sweep(ctx: &mut Ctx) -> CliResult<()> {
    let dir = ctx.require_out("sweep")?.to_path_buf();
    let cfg = ctx.config.clone();
    let manifest = ctx.manifest("sweep", ctx.cli.seed, json!({"task": to_value(&cfg.task)?, "data": to_value(&cfg.data)?, "train": to_value(&cfg.train)?, "attacker": to_value(&cfg.attacker)?, "sweep": to_value(&cfg.sweep)?}));
    let records = eval::sweep(&cfg).ctx(|| "sweep".to_string())?;
    let mut buf = Vec::new();
    eval::write_records_csv(&records, &format!("tool={} manifest={}", manifest::TOOL.replace(' ', "/"), manifest.hash), &mut buf)
        .ctx(|| "writing records".to_string())?;
    let path = dir.join("records.csv");
    fs::write(&path, &buf).ctx(|| format!("writing {}", path.display()))?;
    write_manifest(&dir, &manifest)?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    emit(&pretty(&json!({"manifest": manifest.hash, "records": records.len(), "failed": failed}))?)?;
    Ok(())
}

fn cmd_report(ctx: &mut Ctx, path: &Path) -> CliResult<()> {
    let bytes = ctx.read_input("records", path)?;
    let records = eval::read_records_csv(&bytes[..]).ctx(|| format!("reading {}", path.display()))?;
    let factor = ctx.cli.units.factor();
    let mut rows = eval::summarize(&records);
    rows.iter_mut().for_each(|r| r.surrogate_mean *= factor);
    let manifest = ctx.manifest("report", None, Value::Null);
    let table = eval::render_table(&rows);
    emit(&table)?;
    if let Some(dir) = ctx.out_dir()? {
        let header = format!(
            "<!-- {} manifest={} units={} -->\n",
            manifest::TOOL,
            manifest.hash,
            ctx.cli.units.name()
        );
        write_file(dir, "summary.md", &(header + &table))?;
        let plot = eval::render_plot_script(&rows).replacen('\n', &format!("\n# manifest={}\n", manifest.hash), 1);
        write_file(dir, "plot.txt", &plot)?;
        write_manifest(dir, &manifest)?;
    }
    Ok(())
}
