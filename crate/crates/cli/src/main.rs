use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sfg_core::embedding::{EmbedderConfig, NodeEncoding, ToolVocabulary};
use sfg_core::gcn::{cross_validate, predict, Checkpoint, CrossValidation, TrainConfig};
use sfg_core::hotswap::{
    simulate_parallel_hotswap, simulate_sequential_hotswap, tradeoff_csv, tradeoff_curve,
    ConstantPredictor, Continuations, CostReport, FailurePredictor, GcnPredictor, HotswapMode,
    HotswapPlan, PricingTable, ScoreTable, TradeoffPoint,
};
use sfg_core::metrics::{
    confidence_baseline_cv, majority_baseline, render_table, EvalReport, ScoredExample,
};
use sfg_core::sfg::{
    BuildMode, ClusterConfig, GraphBuilder, GraphConfig, GraphSet, TruncationSpec,
};
use sfg_core::synth::{self, SynthConfig};
use sfg_core::trajectory::{
    parse_log, write_log, AgentKind, LabelCriterion, LabelSet, LcLevel, TaskRecord,
};
use sfg_core::Error;

/// Default pricing file when `--pricing` is not given.
const PRICING_ENV: &str = "SFG_PRICING";

#[derive(Parser)]
#[command(
    name = "sfg",
    version,
    about = "Semantic flow graphs for agent failure prediction and hotswap simulation"
)]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print aligned text instead of JSON.
    #[arg(long, global = true)]
    table: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic source, target and continuation logs.
    Synth(SynthArgs),
    /// Build semantic flow graphs from a trajectory log.
    BuildGraphs(BuildArgs),
    /// Cross-validate a GCN and save the best fold's checkpoint.
    Train(TrainArgs),
    /// Score a graph set with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Majority-class or voting-confidence baseline.
    Baseline(BaselineArgs),
    /// Replay a hotswap policy over paired logs.
    SimulateHotswap(HotswapArgs),
    /// Early-termination trade-off curve over k and thresholds.
    Sweep(SweepArgs),
    /// Cross-validate one node-encoding variant.
    Ablate(AblateArgs),
    /// Write one graph as Graphviz DOT.
    ExportDot(DotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Voting,
    PatchCount,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    tasks: usize,
    #[arg(long, default_value_t = 10)]
    r: usize,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0.4)]
    failure_rate: f64,
    /// Share of failing tasks the target model solves.
    #[arg(long, default_value_t = 0.6)]
    flip_rate: f64,
    #[arg(long, value_enum, default_value_t = AgentArg::Voting)]
    agent: AgentArg,
    /// Also write continuations for a parallel hotswap at this step.
    #[arg(long)]
    continuation_k: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Cluster,
}

#[derive(Args, Clone)]
struct GraphArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    mode: ModeArg,
    /// none, parallel:K or sequential:K
    #[arg(long, default_value = "none")]
    truncate: TruncationSpec,
    #[arg(long, default_value_t = 0.99)]
    assign_th: f64,
    #[arg(long, default_value_t = 0.99)]
    merge_th: f64,
    #[arg(long)]
    binarize_adjacency: bool,
    /// Word vectors in word2vec text format; subword hashing otherwise.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

impl GraphArgs {
    fn config(&self, records: &[TaskRecord], encoding: NodeEncoding) -> GraphConfig {
        let mut cfg = GraphConfig::new(ToolVocabulary::from_records(records));
        cfg.mode = match self.mode {
            ModeArg::Exact => BuildMode::Exact,
            ModeArg::Cluster => BuildMode::Clustered(ClusterConfig {
                assignment_threshold: self.assign_th,
                merge_threshold: self.merge_th,
            }),
        };
        cfg.truncation = self.truncate;
        cfg.encoding = encoding;
        cfg.binarize_adjacency = self.binarize_adjacency;
        cfg.embedder = EmbedderConfig {
            external_vectors: self.vectors.clone(),
            ..EmbedderConfig::default()
        };
        cfg
    }
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    logs: PathBuf,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value = "full")]
    encoding: NodeEncoding,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 0.8)]
    dropout: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pos_weight: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// lc1, lc3 or lc5
    #[arg(long, default_value = "lc1")]
    criterion: LcLevel,
}

impl TrainingArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            hidden_dim: self.hidden,
            dropout_rate: self.dropout,
            epochs: self.epochs,
            seed: self.seed,
            folds: self.folds,
            pos_weight: self.pos_weight,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[command(flatten)]
    training: TrainingArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the cross-validation report; stdout otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "lc1")]
    criterion: LcLevel,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Majority,
    Confidence,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long, value_enum)]
    kind: BaselineKind,
    #[arg(long, default_value = "lc1")]
    criterion: LcLevel,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SwapModeArg {
    Parallel,
    Sequential,
}

#[derive(Args)]
struct HotswapArgs {
    #[arg(long)]
    source_logs: PathBuf,
    /// Required for sequential mode; in parallel mode it provides the
    /// target-only baseline and stands in for missing continuations.
    #[arg(long)]
    target_logs: Option<PathBuf>,
    #[arg(long)]
    continuations: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: SwapModeArg,
    #[arg(long)]
    k: usize,
    /// Pricing JSON; falls back to $SFG_PRICING.
    #[arg(long)]
    pricing: Option<PathBuf>,
    /// Checkpoint trained on the matching truncation.
    #[arg(
        long,
        required_unless_present = "constant",
        conflicts_with = "constant"
    )]
    model: Option<PathBuf>,
    /// Use a fixed failure probability instead of a model.
    #[arg(long)]
    constant: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value = "lc1")]
    criterion: LcLevel,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long, value_enum)]
    mode: SwapModeArg,
    /// Inclusive range such as 1:10.
    #[arg(long)]
    k_range: String,
    /// start:stop:step, inclusive, such as 0.1:0.9:0.1.
    #[arg(long, default_value = "0.5:0.5:0.1")]
    threshold_range: String,
    /// Checkpoint path containing `{k}`, one model per truncation point.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    model: Option<String>,
    /// Score each task with its true LC label instead of a model.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    pricing: Option<PathBuf>,
    #[arg(long, default_value = "lc1")]
    criterion: LcLevel,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long, default_value = "full")]
    variant: NodeEncoding,
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DotArgs {
    #[arg(long)]
    graphs: PathBuf,
    /// Task id; the first graph when omitted.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    emit(Some(path), text)
}

fn load_pricing(path: Option<&Path>) -> Result<PricingTable, Error> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(PRICING_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!("no --pricing given and ${PRICING_ENV} is unset"))
            })?,
    };
    PricingTable::load(path)
}

fn eval_text(reports: &[EvalReport], table: bool) -> String {
    if table {
        render_table(reports)
    } else if let [one] = reports {
        one.to_json()
    } else {
        serde_json::to_string_pretty(reports).expect("reports serialize")
    }
}

fn cv_report(method: &str, cv: &CrossValidation) -> Result<EvalReport, Error> {
    let folds: Vec<(usize, Vec<ScoredExample>)> = cv
        .folds
        .iter()
        .map(|f| {
            let rows = f
                .test_predictions
                .iter()
                .map(|p| ScoredExample::new(p.task_id.clone(), p.score, p.y))
                .collect();
            (f.split.fold, rows)
        })
        .collect();
    let mut report = EvalReport::from_folds(method, &folds, 0.5)?;
    report.fingerprint = Some(cv.best_checkpoint().fingerprint.clone());
    Ok(report)
}

fn synth_cmd(a: SynthArgs) -> Result<(), Error> {
    let cfg = SynthConfig {
        tasks: a.tasks,
        r: a.r,
        n: a.n,
        seed: a.seed,
        signal_strength: a.signal,
        failure_rate: a.failure_rate,
        flip_rate: a.flip_rate,
        agent_kind: match a.agent {
            AgentArg::Voting => AgentKind::Voting,
            AgentArg::PatchCount => AgentKind::PatchCount,
        },
        continuation_k: a.continuation_k,
    };
    let logs = synth::generate(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_log(a.out.join("source.jsonl"), &logs.source)?;
    write_log(a.out.join("target.jsonl"), &logs.target)?;
    if let Some(c) = &logs.continuations {
        write_log(a.out.join("continuations.jsonl"), c)?;
    }
    let pricing =
        serde_json::to_string_pretty(&synth::default_pricing()).expect("pricing serializes");
    write_file(&a.out.join("pricing.json"), &pricing)
}

fn build_cmd(a: BuildArgs) -> Result<(), Error> {
    let records = parse_log(&a.logs)?;
    let cfg = a.graph.config(&records, a.encoding);
    let graphs = GraphBuilder::new(cfg.clone())?.build_all(&records)?;
    GraphSet::new(cfg, graphs).save(&a.out)
}

fn train_cmd(a: TrainArgs, table: bool) -> Result<(), Error> {
    let set = GraphSet::load(&a.graphs)?;
    let cfg = a.training.config();
    let cv = cross_validate(&set.graphs, a.training.criterion, Some(&set.config), &cfg)?;
    cv.best_checkpoint().save(&a.out)?;
    let report = cv_report("GCN", &cv)?;
    emit(a.report.as_deref(), &eval_text(&[report], table))
}

fn evaluate_cmd(a: EvaluateArgs, table: bool) -> Result<(), Error> {
    let set = GraphSet::load(&a.graphs)?;
    let ckpt = Checkpoint::load(&a.model)?;
    if let Some(trained_on) = &ckpt.graph_config {
        if trained_on.truncation != set.config.truncation {
            return Err(Error::Config(format!(
                "model was trained on truncation `{}`, graphs use `{}`",
                trained_on.truncation, set.config.truncation
            )));
        }
    }
    let rows = set
        .graphs
        .iter()
        .map(|g| {
            let y = g
                .label(a.criterion)
                .ok_or_else(|| Error::Data(format!("graph {} carries no label", g.task_id)))?;
            Ok(ScoredExample::new(g.task_id.clone(), predict(g, &ckpt)?, y))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let mut report = EvalReport::from_scores("GCN", &rows, a.threshold)?;
    report.fingerprint = Some(ckpt.fingerprint.clone());
    emit(a.out.as_deref(), &eval_text(&[report], table))
}

fn baseline_cmd(a: BaselineArgs, table: bool) -> Result<(), Error> {
    let records = parse_log(&a.logs)?;
    let report = match a.kind {
        BaselineKind::Majority => {
            let labels = records
                .iter()
                .map(|r| LabelSet::of(r).map(|l| l.get(a.criterion)))
                .collect::<Result<Vec<_>, Error>>()?;
            majority_baseline(&labels)?
        }
        BaselineKind::Confidence => {
            let criterion = LabelCriterion::for_agent(a.criterion, AgentKind::Voting);
            confidence_baseline_cv(&records, criterion, a.folds, a.seed)?
        }
    };
    emit(a.out.as_deref(), &eval_text(&[report], table))
}

fn predictor_for(
    model: Option<&Path>,
    constant: Option<f64>,
) -> Result<Box<dyn FailurePredictor>, Error> {
    match (model, constant) {
        (Some(path), _) => Ok(Box::new(GcnPredictor::new(Checkpoint::load(path)?)?)),
        (None, Some(p)) if (0.0..=1.0).contains(&p) => Ok(Box::new(ConstantPredictor(p))),
        (None, Some(p)) => Err(Error::Config(format!(
            "constant probability {p} outside [0, 1]"
        ))),
        (None, None) => Err(Error::Config(
            "a model or a constant probability is required".into(),
        )),
    }
}

fn report_text(report: &CostReport, table: bool) -> String {
    if !table {
        return report.to_json();
    }
    let mut out = String::new();
    if let Some(cmp) = report.comparison() {
        out.push_str(&cmp.render());
    }
    let s = &report.summary;
    out.push_str(&format!(
        "\ncost saving rate {:.4}, success retention rate {:.4}{}\n",
        s.cost_saving_rate,
        s.success_retention_rate,
        if report.approximate {
            " (continuations approximated by full target runs)"
        } else {
            ""
        }
    ));
    for (category, count) in &s.categories {
        out.push_str(&format!("{:<20} {count}\n", format!("{category:?}")));
    }
    out
}

fn hotswap_cmd(a: HotswapArgs, table: bool) -> Result<(), Error> {
    let pricing = load_pricing(a.pricing.as_deref())?;
    let source = parse_log(&a.source_logs)?;
    let target = a.target_logs.as_deref().map(parse_log).transpose()?;
    let predictor = predictor_for(a.model.as_deref(), a.constant)?;
    let mode = match a.mode {
        SwapModeArg::Parallel => HotswapMode::Parallel,
        SwapModeArg::Sequential => HotswapMode::Sequential,
    };
    let plan = HotswapPlan {
        mode,
        k: a.k,
        classification_threshold: a.threshold,
    };
    let report = match mode {
        HotswapMode::Sequential => {
            let target = target
                .ok_or_else(|| Error::Config("sequential hotswap needs --target-logs".into()))?;
            simulate_sequential_hotswap(
                &source,
                &target,
                predictor.as_ref(),
                &plan,
                a.criterion,
                &pricing,
            )?
        }
        HotswapMode::Parallel => {
            let recorded = a.continuations.as_deref().map(parse_log).transpose()?;
            let continuations = match (&recorded, &target) {
                (Some(c), _) => Continuations::Recorded(c),
                (None, Some(t)) => Continuations::FullTargetRuns(t),
                (None, None) => {
                    return Err(Error::Config(
                        "parallel hotswap needs --continuations or --target-logs".into(),
                    ))
                }
            };
            simulate_parallel_hotswap(
                &source,
                continuations,
                target.as_deref(),
                predictor.as_ref(),
                &plan,
                a.criterion,
                &pricing,
            )?
        }
    };
    emit(a.out.as_deref(), &report_text(&report, table))
}

fn parse_k_range(s: &str) -> Result<Vec<usize>, Error> {
    let bad = || Error::Config(format!("invalid k range `{s}` (expected A:B)"));
    let (a, b) = s
        .split_once(':')
        .or_else(|| s.split_once(".."))
        .ok_or_else(bad)?;
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

fn parse_threshold_range(s: &str) -> Result<Vec<f64>, Error> {
    let bad = || {
        Error::Config(format!(
            "invalid threshold range `{s}` (expected START:STOP:STEP)"
        ))
    };
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0)
        || start > stop
        || !(0.0..=1.0).contains(&start)
        || !(0.0..=1.0).contains(&stop)
    {
        return Err(bad());
    }
    // integer steps avoid accumulating rounding error
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=count)
        .map(|i| {
            let t = start + i as f64 * step;
            (t * 1e9).round() / 1e9
        })
        .collect())
}

fn sweep_cmd(a: SweepArgs) -> Result<(), Error> {
    let records = parse_log(&a.logs)?;
    let pricing = load_pricing(a.pricing.as_deref())?;
    let ks = parse_k_range(&a.k_range)?;
    let thresholds = parse_threshold_range(&a.threshold_range)?;
    let oracle = if a.oracle {
        let scores = records
            .iter()
            .map(|r| {
                Ok((
                    r.task_id.clone(),
                    f64::from(LabelSet::of(r)?.get(a.criterion).y()),
                ))
            })
            .collect::<Result<_, Error>>()?;
        Some(ScoreTable(scores))
    } else {
        None
    };
    let mut per_k = Vec::with_capacity(ks.len());
    for &k in &ks {
        let spec = match a.mode {
            SwapModeArg::Parallel => TruncationSpec::parallel(k),
            SwapModeArg::Sequential => TruncationSpec::sequential(k),
        };
        let points = match (&oracle, &a.model) {
            (Some(o), _) => tradeoff_curve(&records, o, spec, &thresholds, a.criterion, &pricing)?,
            (None, Some(pattern)) => {
                let path = pattern.replace("{k}", &k.to_string());
                let predictor = GcnPredictor::new(Checkpoint::load(&path)?)?;
                tradeoff_curve(
                    &records,
                    &predictor,
                    spec,
                    &thresholds,
                    a.criterion,
                    &pricing,
                )?
            }
            (None, None) => return Err(Error::Config("--model or --oracle is required".into())),
        };
        per_k.push(points);
    }
    // rows grouped by threshold, then k
    let rows: Vec<TradeoffPoint> = (0..thresholds.len())
        .flat_map(|t| per_k.iter().map(move |points| points[t]))
        .collect();
    emit(a.out.as_deref(), &tradeoff_csv(&rows))
}

fn ablate_cmd(a: AblateArgs, table: bool) -> Result<(), Error> {
    let records = parse_log(&a.logs)?;
    let cfg = a.graph.config(&records, a.variant);
    let graphs = GraphBuilder::new(cfg.clone())?.build_all(&records)?;
    let cv = cross_validate(
        &graphs,
        a.training.criterion,
        Some(&cfg),
        &a.training.config(),
    )?;
    let name = serde_json::to_value(a.variant).expect("encoding serializes");
    let report = cv_report(&format!("GCN ({})", name.as_str().unwrap_or("full")), &cv)?;
    emit(a.out.as_deref(), &eval_text(&[report], table))
}

fn dot_cmd(a: DotArgs) -> Result<(), Error> {
    let set = GraphSet::load(&a.graphs)?;
    let graph = match &a.task {
        Some(id) => set
            .graphs
            .iter()
            .find(|g| &g.task_id == id)
            .ok_or_else(|| Error::Data(format!("no graph for task `{id}`")))?,
        None => set
            .graphs
            .first()
            .ok_or_else(|| Error::Data("graph set is empty".into()))?,
    };
    emit(a.out.as_deref(), &graph.to_dot())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let table = cli.table;
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::BuildGraphs(a) => build_cmd(a),
        Command::Train(a) => train_cmd(a, table),
        Command::Evaluate(a) => evaluate_cmd(a, table),
        Command::Baseline(a) => baseline_cmd(a, table),
        Command::SimulateHotswap(a) => hotswap_cmd(a, table),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, table),
        Command::ExportDot(a) => dot_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
