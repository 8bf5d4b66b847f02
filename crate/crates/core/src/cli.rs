//! The `star-kgc` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{precompute_entity_reps, EncoderConfig, StarConfig, StarModel};
use crate::ensemble::{
    evaluate_ensemble, fixed_alpha_set, prepare_queries, train_ensemble, AlphaModel,
    EnsembleConfig, EnsembleMode, FeatureSet,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, one_triple_ratio, predicted_cost, whole_graph_ratio, CrossScorer, EvalOptions,
    EvalOutput, StarScorer, Strategy,
};
use crate::geo::{inductive_complete, train_geo, GeoConfig, GeoEmbeddings, GeoKind, GeoScorer};
use crate::io::{
    cross_from_container, cross_to_container, load_entity_cache, save_entity_cache,
    star_from_container, Container, ScoreMatrix,
};
use crate::kg::{
    build_probe, load_graph, DatasetPaths, EntityId, KnowledgeGraph, ProbeKind, ProbeSpec, Split,
    Triple,
};
use crate::scoring::{CrossEncoder, DistanceMetric, RankingBasis};
use crate::tensor::Matrix;
use crate::tokenizer::{TokenizedTexts, Vocabulary};
use crate::training::{
    gradient_check, sample_batch, train_cross_encoder, train_star, LossKind, TrainConfig,
    GRADCHECK_FLOOR,
};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected failure
  2  usage error (unknown flag, bad value)
  3  file could not be read or written
  4  invalid configuration
  5  malformed or mismatched input file
  6  training diverged
  7  gradient check failed";

#[derive(Parser, Debug)]
#[command(name = "star-kgc", version, about = "Knowledge graph completion with Siamese text encoders", after_help = EXIT_CODES)]
struct Cli {
    /// Global seed for every random choice; overrides the config file.
    #[arg(long, global = true, env = "STAR_KGC_SEED")]
    seed: Option<u64>,
    /// TOML file with `[star]`, `[train]`, `[geo]`, `[ensemble]` and `[eval]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every artifact of the run.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// Evaluation threads; 0 uses every available core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train a StAR model (or a cross-encoder baseline with --cross).
    Train(TrainArgs),
    /// Rank a split with a saved StAR, cross-encoder or graph-embedding model.
    Eval(EvalArgs),
    /// Train a TransE or RotatE baseline.
    TrainGeo(TrainGeoArgs),
    /// Precompute the entity representation cache of a StAR model.
    Precompute(PrecomputeArgs),
    /// Train the per-query α-MLP on dev score matrices.
    EnsembleTrain(EnsembleTrainArgs),
    /// Rank with blended textual and graph-embedding scores.
    EnsembleEval(EnsembleEvalArgs),
    /// Derive a generalization probe dataset.
    Probe(ProbeArgs),
    /// Predicted inference cost of cross-encoders against Siamese encoders.
    CostReport(CostReportArgs),
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArg {
    /// Dataset directory with train/dev/test files and optional text files.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    distance: Option<DistanceMetric>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Cap on dev triples used for the per-epoch Hits@10.
    #[arg(long)]
    dev_limit: Option<usize>,
    /// Skip the per-epoch dev evaluation.
    #[arg(long)]
    no_dev_eval: bool,
    /// Train the cross-encoder baseline instead.
    #[arg(long)]
    cross: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    /// Model file written by `train` or `train-geo`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    ranking_basis: Option<RankingBasis>,
    /// Drop the query's own fixed entity from the candidates.
    #[arg(long)]
    self_loop_filter: bool,
    /// Re-encode candidates for every query instead of using the entity cache.
    #[arg(long)]
    no_cache: bool,
    /// Entity cache written by `precompute`.
    #[arg(long)]
    entity_cache: Option<PathBuf>,
    /// Write every query's dense scores to this score-matrix file.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write per-query rank records as JSON lines.
    #[arg(long)]
    records: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainGeoArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    model: Option<GeoKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Support triples (`head<TAB>relation<TAB>tail`) used to embed entities
    /// unseen in training after the fit.
    #[arg(long)]
    support: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PrecomputeArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EnsembleInputs {
    #[command(flatten)]
    data: DataArg,
    /// Textual score matrix from `eval --scores` (s_c basis recommended).
    #[arg(long)]
    star_scores: PathBuf,
    /// Graph-embedding score matrix over the same queries.
    #[arg(long)]
    geo_scores: PathBuf,
    /// StAR model providing entity representations.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    entity_cache: Option<PathBuf>,
    /// Candidates to re-rank: a number or `inf`.
    #[arg(long)]
    k: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct EnsembleTrainArgs {
    #[command(flatten)]
    inputs: EnsembleInputs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EnsembleEvalArgs {
    #[command(flatten)]
    inputs: EnsembleInputs,
    /// Parameters written by `ensemble-train`.
    #[arg(long)]
    alpha_params: Option<PathBuf>,
    /// Use one fixed α for every query instead.
    #[arg(long)]
    fixed_alpha: Option<f64>,
    /// Write the α of every query as JSON lines.
    #[arg(long)]
    dump_alphas: bool,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    kind: ProbeKind,
    /// Test entities removed from training (probe2).
    #[arg(long, default_value_t = 10)]
    n_removed: usize,
}

#[derive(Args, Debug, Serialize)]
struct CostReportArgs {
    /// Sequence length budget of one triple.
    #[arg(long = "L", default_value_t = 64.0)]
    l: f64,
    #[arg(long)]
    entities: f64,
    #[arg(long, default_value_t = 1.0)]
    relations: f64,
    /// Also report the cost of this many ranking queries.
    #[arg(long)]
    queries: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Dataset to draw the batch from; a built-in toy graph otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    d_h: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    negatives: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    distance: Option<DistanceMetric>,
}

/// Fully resolved option groups; echoed into every run manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub star: StarConfig,
    pub train: TrainConfig,
    pub geo: GeoConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Routes one global seed into every option group.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.star.encoder.seed = seed;
        self.train.seed = seed;
        self.geo.seed = seed;
        self.ensemble.seed = seed;
        self.eval.seed = seed;
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::Config(_)
        | Error::DimMismatch { .. }
        | Error::EmptyProbe(_)
        | Error::SamplingExhausted { .. } => 4,
        Error::Parse { .. }
        | Error::Format(_)
        | Error::MatrixMismatch(_)
        | Error::GoldNotCandidate(_) => 5,
        Error::Diverged { .. } => 6,
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(name);
        let mut body =
            serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        body.push('\n');
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write_lines<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.path(name);
        let mut body = String::new();
        for r in rows {
            body.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
            body.push('\n');
        }
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a Command,
    argv: Vec<String>,
    seed: u64,
    config: &'a RunConfig,
    version: &'static str,
    started_unix: u64,
}

fn execute(cli: &Cli, argv: &[OsString]) -> Result<i32> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    config.apply_seed(seed);
    if let Some(t) = cli.threads {
        config.eval.threads = t;
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut ctx = Ctx {
        config,
        out: cli.out.clone(),
    };
    apply_overrides(&mut ctx.config, &cli.command)?;
    let manifest = Manifest {
        command: &cli.command,
        argv: argv
            .iter()
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
        seed,
        config: &ctx.config,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    ctx.write_json("manifest.json", &manifest)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::TrainGeo(a) => cmd_train_geo(&ctx, a),
        Command::Precompute(a) => cmd_precompute(&ctx, a),
        Command::EnsembleTrain(a) => cmd_ensemble_train(&ctx, a),
        Command::EnsembleEval(a) => cmd_ensemble_eval(&ctx, a),
        Command::Probe(a) => cmd_probe(&ctx, a),
        Command::CostReport(a) => cmd_cost_report(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
    }
}

fn parse_k(k: &Option<String>, default: Option<usize>) -> Result<Option<usize>> {
    match k.as_deref() {
        None => Ok(default),
        Some("inf") | Some("all") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("k must be a number or `inf`, got `{s}`"))),
    }
}

/// Folds subcommand flags into the option groups so the manifest shows the
/// values actually used.
fn apply_overrides(c: &mut RunConfig, command: &Command) -> Result<()> {
    fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *dst = v.clone();
        }
    }
    match command {
        Command::Train(a) => {
            set(&mut c.train.epochs, &a.epochs);
            set(&mut c.train.learning_rate, &a.lr);
            set(&mut c.train.gamma, &a.gamma);
            set(&mut c.train.margin, &a.margin);
            set(&mut c.train.n_negatives, &a.negatives);
            set(&mut c.train.batch_size, &a.batch_size);
            set(&mut c.star.distance, &a.distance);
            set(&mut c.star.encoder.d_h, &a.d_h);
            set(&mut c.star.encoder.n_layers, &a.layers);
            if a.dev_limit.is_some() {
                c.train.dev_limit = a.dev_limit;
            }
            if a.no_dev_eval {
                c.train.dev_eval = false;
            }
        }
        Command::Eval(a) => {
            set(&mut c.eval.basis, &a.ranking_basis);
            if a.self_loop_filter {
                c.eval.self_loop_filter = true;
            }
            if a.no_cache {
                c.eval.use_cache = false;
            }
            if a.scores.is_some() {
                c.eval.keep_scores = true;
            }
        }
        Command::TrainGeo(a) => {
            set(&mut c.geo.kind, &a.model);
            set(&mut c.geo.epochs, &a.epochs);
            set(&mut c.geo.learning_rate, &a.lr);
            if a.dim.is_some() {
                c.geo.dim = a.dim;
            }
            if a.margin.is_some() {
                c.geo.margin = a.margin;
            }
        }
        Command::EnsembleTrain(a) => {
            c.ensemble.k = parse_k(&a.inputs.k, c.ensemble.k)?;
            c.ensemble.mode = EnsembleMode::SelfAdaptive;
            set(&mut c.ensemble.epochs, &a.epochs);
            set(&mut c.ensemble.margin, &a.margin);
            set(&mut c.ensemble.learning_rate, &a.lr);
            set(&mut c.ensemble.n_negatives, &a.negatives);
        }
        Command::EnsembleEval(a) => {
            c.ensemble.k = parse_k(&a.inputs.k, c.ensemble.k)?;
            c.ensemble.mode = match (a.fixed_alpha, &a.alpha_params) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "--fixed-alpha and --alpha-params are mutually exclusive".into(),
                    ))
                }
                (Some(v), None) => EnsembleMode::FixedAlpha(v),
                (None, Some(_)) => EnsembleMode::SelfAdaptive,
                (None, None) => {
                    return Err(Error::Config(
                        "give either --fixed-alpha or --alpha-params".into(),
                    ))
                }
            };
        }
        _ => {}
    }
    Ok(())
}

fn load_data(d: &DataArg) -> Result<KnowledgeGraph> {
    load_graph(&DatasetPaths::from_dir(&d.data)?)
}

fn summary(label: &str, o: &crate::eval::RankStats) {
    println!(
        "{label}: queries {} MR {:.3} MRR {:.4} Hits@1 {:.4} Hits@3 {:.4} Hits@10 {:.4}",
        o.queries, o.mr, o.mrr, o.hits_at_1, o.hits_at_3, o.hits_at_10
    );
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<i32> {
    let kg = load_data(&a.data)?;
    let c = &ctx.config;
    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let log_path = ctx.path("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    if a.cross {
        let mut model: CrossEncoder<f32> = CrossEncoder::new(c.star.encoder.clone(), vocab)?;
        let logs = train_cross_encoder(&mut model, &kg, &texts, &c.train)?;
        for l in &logs {
            writeln!(log, "{}", serde_json::to_string(l).expect("log serializes"))
                .map_err(|e| Error::io(&log_path, e))?;
        }
        cross_to_container(&model).save(&ctx.path("model.ckpt"))?;
        println!(
            "cross-encoder saved to {}",
            ctx.path("model.ckpt").display()
        );
        return Ok(0);
    }
    let mut model: StarModel<f32> = StarModel::new(c.star.clone(), vocab)?;
    let ckpt_dir = ctx.path("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    train_star(&mut model, &kg, &texts, &c.train, &mut |l, m| {
        writeln!(log, "{}", serde_json::to_string(l).expect("log serializes"))
            .map_err(|e| Error::io(&log_path, e))?;
        crate::io::save_star(m, &ckpt_dir.join(format!("epoch-{:03}.ckpt", l.epoch)))
    })?;
    crate::io::save_star(&model, &ctx.path("model.ckpt"))?;
    println!("model saved to {}", ctx.path("model.ckpt").display());
    Ok(0)
}

/// A loaded model of any kind.
enum AnyModel {
    Star(StarModel<f32>),
    Cross(CrossEncoder<f32>),
    Geo(GeoEmbeddings),
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let c = Container::load(path)?;
    match c.kind.as_str() {
        "star" => Ok(AnyModel::Star(star_from_container(&c)?)),
        "cross" => Ok(AnyModel::Cross(cross_from_container(&c)?)),
        "geo" => Ok(AnyModel::Geo(GeoEmbeddings::from_container(&c)?)),
        other => Err(Error::Format(format!(
            "`{other}` files cannot be evaluated"
        ))),
    }
}

fn load_star_model(path: &Path) -> Result<StarModel<f32>> {
    star_from_container(&Container::load(path)?)
}

fn check_entities(kg: &KnowledgeGraph, n: usize) -> Result<()> {
    if kg.num_entities() != n {
        return Err(Error::Format(format!(
            "model covers {n} entities but the dataset has {}",
            kg.num_entities()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    model: String,
    split: Split,
    options: &'a EvalOptions,
    metrics: &'a crate::eval::MetricsReport,
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<i32> {
    let kg = load_data(&a.data)?;
    let opts = &ctx.config.eval;
    let (label, out): (String, EvalOutput) = match load_any(&a.checkpoint)? {
        AnyModel::Star(model) => {
            let texts = TokenizedTexts::new(kg.texts(), model.vocab());
            let mut scorer = StarScorer::new(&model, &texts);
            if let Some(p) = &a.entity_cache {
                scorer = scorer.with_entity_cache(load_entity_cache(&model, p)?);
            }
            let out = evaluate(&mut scorer, &kg, a.split, opts)?;
            (format!("star:{:?}", opts.basis).to_lowercase(), out)
        }
        AnyModel::Cross(model) => {
            let texts = TokenizedTexts::new(kg.texts(), &model.vocab);
            let mut scorer = CrossScorer::new(&model, &texts);
            ("cross".into(), evaluate(&mut scorer, &kg, a.split, opts)?)
        }
        AnyModel::Geo(emb) => {
            check_entities(&kg, emb.num_entities())?;
            let mut scorer = GeoScorer::new(&emb);
            (
                format!("{:?}", emb.kind).to_lowercase(),
                evaluate(&mut scorer, &kg, a.split, opts)?,
            )
        }
    };
    summary(&label, &out.report.overall);
    ctx.write_json(
        "metrics.json",
        &EvalSummary {
            model: label,
            split: a.split,
            options: opts,
            metrics: &out.report,
        },
    )?;
    if a.records {
        ctx.write_lines("records.jsonl", &out.records)?;
    }
    if let (Some(p), Some(m)) = (&a.scores, &out.scores) {
        m.save(p)?;
    }
    Ok(0)
}

fn read_support(kg: &KnowledgeGraph, path: &Path) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        let bad = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let [h, r, t] = parts[..] else {
            return Err(bad(format!(
                "expected three tab-separated fields, got {line:?}"
            )));
        };
        let ent = |k: &str| {
            kg.entity_id(k)
                .ok_or_else(|| bad(format!("unknown entity `{k}`")))
        };
        let rel = kg
            .relation_id(r)
            .ok_or_else(|| bad(format!("unknown relation `{r}`")))?;
        out.push(Triple::new(ent(h)?, rel, ent(t)?));
    }
    Ok(out)
}

fn cmd_train_geo(ctx: &Ctx, a: &TrainGeoArgs) -> Result<i32> {
    let kg = load_data(&a.data)?;
    let g = &ctx.config.geo;
    let trained = train_geo(&kg, g)?;
    let mut emb = trained.embeddings;
    let lines: Vec<serde_json::Value> = trained
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::json!({ "epoch": i + 1, "loss": l }))
        .collect();
    ctx.write_lines("train_log.jsonl", &lines)?;
    if let Some(p) = &a.support {
        let support = read_support(&kg, p)?;
        let unseen: Vec<EntityId> = kg
            .entity_ids()
            .filter(|&e| !kg.entity_seen_in_train(e))
            .collect();
        let report = inductive_complete(&mut emb, &support, &unseen);
        ctx.write_json("inductive.json", &report)?;
        println!(
            "inductive completion: {} embedded, {} without support",
            report.completed.len(),
            report.unsupported.len()
        );
    }
    emb.save(&ctx.path("geo.ckpt"))?;
    let mut scorer = GeoScorer::new(&emb);
    let out = evaluate(&mut scorer, &kg, Split::Test, &ctx.config.eval)?;
    summary(
        &format!("{:?}", emb.kind).to_lowercase(),
        &out.report.overall,
    );
    ctx.write_json("metrics.json", &out.report)?;
    Ok(0)
}

fn cmd_precompute(ctx: &Ctx, a: &PrecomputeArgs) -> Result<i32> {
    let kg = load_data(&a.data)?;
    let model = load_star_model(&a.checkpoint)?;
    let texts = TokenizedTexts::new(kg.texts(), model.vocab());
    let cache = precompute_entity_reps(&model, &texts, None);
    let p = ctx.path("entity_cache.bin");
    save_entity_cache(&cache, &model, &p)?;
    println!(
        "{} entity representations written to {}",
        cache.len(),
        p.display()
    );
    Ok(0)
}

/// Entity representations for the ambiguity features.
fn entity_reps(kg: &KnowledgeGraph, inputs: &EnsembleInputs) -> Result<Matrix<f64>> {
    let ckpt = inputs
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("the self-adaptive ensemble needs --checkpoint".into()))?;
    let model = load_star_model(ckpt)?;
    let cache = match &inputs.entity_cache {
        Some(p) => load_entity_cache(&model, p)?,
        None => precompute_entity_reps(
            &model,
            &TokenizedTexts::new(kg.texts(), model.vocab()),
            None,
        ),
    };
    check_entities(kg, cache.len())?;
    Ok(cache.reps().cast())
}

fn load_matrices(
    kg: &KnowledgeGraph,
    inputs: &EnsembleInputs,
    rescale_text: bool,
) -> Result<Vec<crate::ensemble::PreparedQuery>> {
    let text = ScoreMatrix::load(&inputs.star_scores)?;
    let geo = ScoreMatrix::load(&inputs.geo_scores)?;
    check_entities(kg, text.num_entities)?;
    prepare_queries(kg, &text, &geo, rescale_text)
}

fn cmd_ensemble_train(ctx: &Ctx, a: &EnsembleTrainArgs) -> Result<i32> {
    let kg = load_data(&a.inputs.data)?;
    let c = &ctx.config.ensemble;
    let queries = load_matrices(&kg, &a.inputs, c.rescale_text)?;
    let reps = entity_reps(&kg, &a.inputs)?;
    let k =
        c.k.ok_or_else(|| Error::Config("the self-adaptive ensemble needs a finite k".into()))?;
    let set = FeatureSet::new(queries, &reps, k, c.m_sim);
    let (model, report) = train_ensemble(&set, reps.cols(), c)?;
    model.to_container().save(&ctx.path("ensemble.ckpt"))?;
    ctx.write_json("ensemble_train.json", &report)?;
    println!(
        "α-MLP trained on {} queries ({} skipped: gold outside top {k}; {} forced α = 1)",
        set.queries.len() - report.skipped_gold_outside_top_k - report.skipped_unseen,
        report.skipped_gold_outside_top_k,
        report.skipped_unseen
    );
    Ok(0)
}

fn cmd_ensemble_eval(ctx: &Ctx, a: &EnsembleEvalArgs) -> Result<i32> {
    let kg = load_data(&a.inputs.data)?;
    let c = &ctx.config.ensemble;
    let queries = load_matrices(&kg, &a.inputs, c.rescale_text)?;
    let (set, model) = match (&c.mode, &a.alpha_params) {
        (EnsembleMode::SelfAdaptive, Some(p)) => {
            let model = AlphaModel::from_container(&Container::load(p)?)?;
            let reps = entity_reps(&kg, &a.inputs)?;
            if c.k != Some(model.k) {
                return Err(Error::Config(format!(
                    "α parameters were trained with k = {}",
                    model.k
                )));
            }
            (
                FeatureSet::new(queries, &reps, model.k, model.m_sim),
                Some(model),
            )
        }
        _ => (fixed_alpha_set(queries), None),
    };
    let out = evaluate_ensemble(&kg, &set, model.as_ref(), c, ctx.config.seed.unwrap_or(0))?;
    summary("ensemble", &out.report.overall);
    ctx.write_json("metrics.json", &out.report)?;
    if a.dump_alphas {
        let rows: Vec<serde_json::Value> = set
            .queries
            .iter()
            .zip(&out.alphas)
            .map(|(q, al)| serde_json::json!({ "query": q.query.index, "direction": q.query.direction, "alpha": al }))
            .collect();
        ctx.write_lines("alphas.jsonl", &rows)?;
    }
    Ok(0)
}

fn cmd_probe(ctx: &Ctx, a: &ProbeArgs) -> Result<i32> {
    let kg = load_data(&a.data)?;
    let outcome = build_probe(
        &kg,
        &ProbeSpec {
            kind: a.kind,
            seed: ctx.config.seed.unwrap_or(0),
            n_removed: a.n_removed,
        },
    )?;
    let dir = ctx.path("probe");
    outcome.graph.write_dir(&dir)?;
    let support = dir.join("support.tsv");
    fs::write(&support, outcome.graph.format_triples(&outcome.support))
        .map_err(|e| Error::io(&support, e))?;
    let removed: Vec<&str> = outcome
        .removed
        .iter()
        .map(|&e| outcome.graph.entity_key(e))
        .collect();
    ctx.write_json(
        "probe.json",
        &serde_json::json!({
            "stats": outcome.graph.stats(),
            "removed": removed,
            "support": outcome.support.len(),
            "discarded": outcome.discarded.len(),
        }),
    )?;
    println!("probe dataset written to {}", dir.display());
    Ok(0)
}

#[derive(Serialize)]
struct CostReport {
    l: f64,
    entities: f64,
    relations: f64,
    whole_graph_cross: f64,
    whole_graph_siamese: f64,
    whole_graph_ratio: f64,
    one_triple_ratio: f64,
    queries: Option<f64>,
    queries_cross: Option<f64>,
    queries_siamese: Option<f64>,
}

fn cmd_cost_report(ctx: &Ctx, a: &CostReportArgs) -> Result<i32> {
    if a.l <= 0.0 || a.entities < 1.0 || a.relations < 1.0 {
        return Err(Error::Config(
            "L, entities and relations must be positive".into(),
        ));
    }
    let q = a.entities * a.relations;
    let report = CostReport {
        l: a.l,
        entities: a.entities,
        relations: a.relations,
        whole_graph_cross: predicted_cost(Strategy::Cross, a.l, a.entities, q),
        whole_graph_siamese: predicted_cost(Strategy::Siamese, a.l, a.entities, q),
        whole_graph_ratio: whole_graph_ratio(a.l, a.entities, a.relations),
        one_triple_ratio: one_triple_ratio(a.l, a.entities),
        queries: a.queries,
        queries_cross: a
            .queries
            .map(|n| predicted_cost(Strategy::Cross, a.l, a.entities, n)),
        queries_siamese: a
            .queries
            .map(|n| predicted_cost(Strategy::Siamese, a.l, a.entities, n)),
    };
    println!(
        "whole graph: cross {:.4e} vs siamese {:.4e}, ratio {:.1}; one triple ratio {:.2}",
        report.whole_graph_cross,
        report.whole_graph_siamese,
        report.whole_graph_ratio,
        report.one_triple_ratio
    );
    ctx.write_json("cost_report.json", &report)?;
    Ok(0)
}

fn toy_graph() -> KnowledgeGraph {
    crate::kg::GraphBuilder::new()
        .split(
            Split::Train,
            &[
                ("aspirin", "treats", "headache"),
                ("ibuprofen", "treats", "fever"),
                ("aspirin", "is a", "drug"),
                ("ibuprofen", "is a", "drug"),
                ("headache", "is a", "symptom"),
                ("fever", "is a", "symptom"),
            ],
        )
        .build()
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<i32> {
    let kg = match &a.data {
        Some(d) => load_graph(&DatasetPaths::from_dir(d)?)?,
        None => toy_graph(),
    };
    let seed = ctx.config.seed.unwrap_or(0);
    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let config = StarConfig {
        encoder: EncoderConfig {
            d_h: a.d_h,
            n_layers: a.layers,
            n_heads: a.heads,
            d_ff: 2 * a.d_h,
            max_len_hr: 16,
            max_len_t: 16,
            seed,
            ..EncoderConfig::default()
        },
        distance: a.distance.unwrap_or(ctx.config.star.distance),
        ..StarConfig::default()
    };
    let model: StarModel<f64> = StarModel::new(config, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.batch.min(kg.train().len()).max(1);
    let batch = sample_batch(&kg, &kg.train()[..n], a.negatives, &mut rng)?;
    let t = &ctx.config.train;
    let mut ok = true;
    let mut reports = Vec::new();
    for kind in [
        LossKind::Classification,
        LossKind::Contrastive,
        LossKind::Total,
    ] {
        let r = gradient_check(
            &model, &texts, &batch, t.margin, t.gamma, kind, a.coords, a.step, &mut rng,
        );
        let pass = r.max_rel_error < a.tolerance;
        ok &= pass;
        println!(
            "{:<14} max relative error {:.3e} over {} coordinates: {}",
            format!("{kind:?}").to_lowercase(),
            r.max_rel_error,
            r.coordinates,
            if pass { "PASS" } else { "FAIL" }
        );
        reports.push(r);
    }
    ctx.write_json(
        "gradcheck.json",
        &serde_json::json!({ "tolerance": a.tolerance, "floor": GRADCHECK_FLOOR, "reports": reports, "pass": ok }),
    )?;
    Ok(if ok { 0 } else { 7 })
}
