//! Replay simulation of early termination and model hotswap.
//!
//! Nothing here calls a model. Policies are replayed over recorded logs: the
//! source model's full runs, the target model's full runs, and (for parallel
//! hotswap) target continuations recorded from a migrated context.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gcn::{predict, Checkpoint};
use crate::sfg::{truncate_parallel, truncate_sequential, GraphBuilder, TruncationSpec};
use crate::trajectory::{
    AgentKind, GroundTruth, Label, LabelSet, LcLevel, ReasoningStep, TaskRecord, Trajectory,
};

/// Money in units of 10⁻¹² currency. Integer so that totals do not depend on
/// summation order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cost(u128);

const UNITS_PER_CURRENCY: f64 = 1e12;

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub fn from_units(units: u128) -> Self {
        Cost(units)
    }

    /// Rounds to the nearest 10⁻¹² unit.
    pub fn from_currency(value: f64) -> Self {
        assert!(
            value.is_finite() && value >= 0.0,
            "cost must be finite and nonnegative"
        );
        Cost((value * UNITS_PER_CURRENCY).round() as u128)
    }

    pub fn units(self) -> u128 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / UNITS_PER_CURRENCY
    }

    /// Currency rounded to six fractional digits.
    pub fn rounded(self) -> f64 {
        let micros = (self.0 + 500_000) / 1_000_000;
        micros as f64 / 1e6
    }

    /// `self / other`, `None` when `other` is zero.
    pub fn ratio(self, other: Cost) -> Option<f64> {
        (other.0 > 0).then(|| self.0 as f64 / other.0 as f64)
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.rounded())
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.rounded())
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(serde::de::Error::custom(
                "cost must be finite and nonnegative",
            ));
        }
        Ok(Cost::from_currency(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub in_per_1m: f64,
    pub out_per_1m: f64,
}

/// Per-model prices per million tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingTable(BTreeMap<String, ModelPrice>);

impl PricingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, model: impl Into<String>, in_per_1m: f64, out_per_1m: f64) -> Self {
        self.0.insert(
            model.into(),
            ModelPrice {
                in_per_1m,
                out_per_1m,
            },
        );
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: PricingTable = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid pricing table: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (model, p) in &self.0 {
            for v in [p.in_per_1m, p.out_per_1m] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!(
                        "price of `{model}` must be finite and nonnegative"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-token prices in cost units: price per 1M tokens × 10⁶.
    fn unit_prices(&self, model: &str) -> Result<(u128, u128)> {
        let p = self
            .0
            .get(model)
            .ok_or_else(|| Error::Config(format!("no price for model `{model}`")))?;
        let to_units = |per_1m: f64| (per_1m * 1e6).round() as u128;
        Ok((to_units(p.in_per_1m), to_units(p.out_per_1m)))
    }

    pub fn step_cost(&self, step: &ReasoningStep, model: &str) -> Result<Cost> {
        let (pin, pout) = self.unit_prices(model)?;
        Ok(Cost(
            step.input_tokens as u128 * pin + step.output_tokens as u128 * pout,
        ))
    }

    pub fn steps_cost<'a>(
        &self,
        steps: impl IntoIterator<Item = &'a ReasoningStep>,
        model: &str,
    ) -> Result<Cost> {
        let (pin, pout) = self.unit_prices(model)?;
        Ok(Cost(
            steps
                .into_iter()
                .map(|s| s.input_tokens as u128 * pin + s.output_tokens as u128 * pout)
                .sum(),
        ))
    }

    /// Cost of re-reading `tokens` as input on `model`.
    pub fn input_cost(&self, tokens: u64, model: &str) -> Result<Cost> {
        let (pin, _) = self.unit_prices(model)?;
        Ok(Cost(tokens as u128 * pin))
    }
}

pub fn cost_of_trajectory(traj: &Trajectory, pricing: &PricingTable) -> Result<Cost> {
    pricing.steps_cost(&traj.steps, &traj.model_id)
}

/// Σ over steps of input and output tokens at the trajectory's model prices.
pub fn cost_of<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    pricing: &PricingTable,
) -> Result<Cost> {
    trajectories
        .into_iter()
        .map(|t| cost_of_trajectory(t, pricing))
        .sum()
}

fn tokens<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> u64 {
    trajectories
        .into_iter()
        .flat_map(|t| t.steps.iter())
        .map(ReasoningStep::total_tokens)
        .sum()
}

/// Anything that scores a (truncated) record with a probability of failure.
pub trait FailurePredictor: Sync {
    /// `truncated` has already been cut according to `spec`.
    fn failure_probability(&self, truncated: &TaskRecord, spec: TruncationSpec) -> Result<f64>;
}

/// Returns the same probability for every task.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl ConstantPredictor {
    pub const NEVER: ConstantPredictor = ConstantPredictor(0.0);
    pub const ALWAYS: ConstantPredictor = ConstantPredictor(1.0);
}

impl FailurePredictor for ConstantPredictor {
    fn failure_probability(&self, _: &TaskRecord, _: TruncationSpec) -> Result<f64> {
        Ok(self.0)
    }
}

/// Looks scores up by task id; unknown ids are a data error.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable(pub HashMap<String, f64>);

impl FailurePredictor for ScoreTable {
    fn failure_probability(&self, truncated: &TaskRecord, _: TruncationSpec) -> Result<f64> {
        self.0
            .get(&truncated.task_id)
            .copied()
            .ok_or_else(|| Error::Data(format!("no score for task `{}`", truncated.task_id)))
    }
}

/// A trained checkpoint together with the graph builder it was trained on.
pub struct GcnPredictor {
    checkpoint: Checkpoint,
    builder: GraphBuilder,
}

impl GcnPredictor {
    /// Needs a checkpoint that recorded its graph configuration.
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let config = checkpoint
            .graph_config
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no graph configuration".into()))?;
        let builder = GraphBuilder::new(config)?;
        Ok(Self {
            checkpoint,
            builder,
        })
    }

    pub fn truncation(&self) -> TruncationSpec {
        self.builder.config().truncation
    }
}

impl FailurePredictor for GcnPredictor {
    fn failure_probability(&self, truncated: &TaskRecord, spec: TruncationSpec) -> Result<f64> {
        if spec != self.truncation() {
            return Err(Error::Config(format!(
                "model was trained on truncation `{}` but is asked to predict at `{spec}`",
                self.truncation()
            )));
        }
        predict(&self.builder.build_untruncated(truncated), &self.checkpoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeCategory {
    RetainedSuccess,
    RescuedFailure,
    UnresolvedFailure,
    RedundantSwap,
    DestructiveSwap,
    MissedOpportunity,
}

impl OutcomeCategory {
    pub const ALL: [OutcomeCategory; 6] = [
        OutcomeCategory::RetainedSuccess,
        OutcomeCategory::RescuedFailure,
        OutcomeCategory::UnresolvedFailure,
        OutcomeCategory::RedundantSwap,
        OutcomeCategory::DestructiveSwap,
        OutcomeCategory::MissedOpportunity,
    ];

    pub fn is_success(self) -> bool {
        matches!(
            self,
            OutcomeCategory::RetainedSuccess
                | OutcomeCategory::RescuedFailure
                | OutcomeCategory::RedundantSwap
        )
    }
}

/// Outcome category from the source label, the prediction, and the label
/// after the intervention. `final_label` is ignored when no swap was
/// predicted.
pub fn categorize(source: Label, predicted_failure: bool, final_label: Label) -> OutcomeCategory {
    match (
        source.is_success(),
        predicted_failure,
        final_label.is_success(),
    ) {
        (true, false, _) => OutcomeCategory::RetainedSuccess,
        (false, false, _) => OutcomeCategory::MissedOpportunity,
        (false, true, true) => OutcomeCategory::RescuedFailure,
        (false, true, false) => OutcomeCategory::UnresolvedFailure,
        (true, true, true) => OutcomeCategory::RedundantSwap,
        (true, true, false) => OutcomeCategory::DestructiveSwap,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcCounts {
    pub lc1: usize,
    pub lc3: usize,
    pub lc5: usize,
}

impl LcCounts {
    fn count_successes<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> Self {
        let mut c = LcCounts::default();
        for l in labels {
            c.lc1 += usize::from(l.lc1.is_success());
            c.lc3 += usize::from(l.lc3.is_success());
            c.lc5 += usize::from(l.lc5.is_success());
        }
        c
    }

    pub fn get(&self, level: LcLevel) -> usize {
        match level {
            LcLevel::Lc1 => self.lc1,
            LcLevel::Lc3 => self.lc3,
            LcLevel::Lc5 => self.lc5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HotswapMode {
    Parallel,
    Sequential,
}

impl std::str::FromStr for HotswapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "sequential" => Ok(Self::Sequential),
            other => Err(Error::Config(format!("unknown hotswap mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotswapPlan {
    pub mode: HotswapMode,
    pub k: usize,
    pub classification_threshold: f64,
}

impl HotswapPlan {
    pub fn new(mode: HotswapMode, k: usize) -> Self {
        Self {
            mode,
            k,
            classification_threshold: 0.5,
        }
    }

    pub fn truncation(&self) -> TruncationSpec {
        match self.mode {
            HotswapMode::Parallel => TruncationSpec::parallel(self.k),
            HotswapMode::Sequential => TruncationSpec::sequential(self.k),
        }
    }

    fn validate_for(&self, record: &TaskRecord) -> Result<()> {
        let limit = match self.mode {
            HotswapMode::Parallel => record.interaction_budget,
            HotswapMode::Sequential => record.sample_size,
        };
        if self.k == 0 || self.k > limit {
            return Err(Error::Config(format!(
                "hotswap point k = {} outside 1..={limit} for task `{}`",
                self.k, record.task_id
            )));
        }
        if !(self.classification_threshold > 0.0 && self.classification_threshold < 1.0) {
            return Err(Error::Config(
                "classification threshold must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One task under an intervention policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub failure_probability: f64,
    pub predicted_failure: bool,
    pub source_cost: Cost,
    pub target_cost: Cost,
    pub total_cost: Cost,
    pub source_tokens: u64,
    pub target_tokens: u64,
    /// Cost of running the source model to completion with no intervention.
    pub source_only_cost: Cost,
    pub target_only_cost: Option<Cost>,
    pub source_labels: LabelSet,
    pub final_labels: LabelSet,
    pub target_only_labels: Option<LabelSet>,
    pub category: OutcomeCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub tasks: usize,
    pub source_cost: Cost,
    pub target_cost: Cost,
    pub total_cost: Cost,
    pub source_tokens: u64,
    pub target_tokens: u64,
    pub source_only_cost: Cost,
    pub target_only_cost: Option<Cost>,
    pub cost_ratio_vs_target: Option<f64>,
    pub successes: LcCounts,
    pub source_only_successes: LcCounts,
    pub target_only_successes: Option<LcCounts>,
    /// 1 − total / source-only cost for early termination, 1 − total /
    /// target-only cost for hotswap.
    pub cost_saving_rate: f64,
    pub success_retention_rate: f64,
    pub categories: BTreeMap<OutcomeCategory, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub policy: String,
    pub truncation: TruncationSpec,
    pub threshold: f64,
    pub criterion: LcLevel,
    /// Set when continuations were approximated by full target runs.
    pub approximate: bool,
    pub summary: CostSummary,
    pub tasks: Vec<TaskOutcome>,
}

impl CostReport {
    fn new(
        policy: &str,
        truncation: TruncationSpec,
        threshold: f64,
        criterion: LcLevel,
        approximate: bool,
        mut tasks: Vec<TaskOutcome>,
        saving_vs_target: bool,
    ) -> Self {
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let mut categories: BTreeMap<OutcomeCategory, usize> =
            OutcomeCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for t in &tasks {
            *categories
                .get_mut(&t.category)
                .expect("all categories present") += 1;
        }
        let total_cost: Cost = tasks.iter().map(|t| t.total_cost).sum();
        let source_only_cost: Cost = tasks.iter().map(|t| t.source_only_cost).sum();
        let target_only_cost: Option<Cost> = tasks.iter().map(|t| t.target_only_cost).sum();
        let target_only_successes = tasks
            .iter()
            .map(|t| t.target_only_labels)
            .collect::<Option<Vec<_>>>()
            .map(|l| LcCounts::count_successes(&l));

        let reference = if saving_vs_target {
            target_only_cost
        } else {
            Some(source_only_cost)
        };
        let cost_saving_rate = reference
            .and_then(|r| total_cost.ratio(r))
            .map_or(0.0, |ratio| 1.0 - ratio);
        let originally_ok: Vec<&TaskOutcome> = tasks
            .iter()
            .filter(|t| t.source_labels.get(criterion).is_success())
            .collect();
        let success_retention_rate = if originally_ok.is_empty() {
            1.0
        } else {
            originally_ok
                .iter()
                .filter(|t| t.final_labels.get(criterion).is_success())
                .count() as f64
                / originally_ok.len() as f64
        };

        let summary = CostSummary {
            tasks: tasks.len(),
            source_cost: tasks.iter().map(|t| t.source_cost).sum(),
            target_cost: tasks.iter().map(|t| t.target_cost).sum(),
            total_cost,
            source_tokens: tasks.iter().map(|t| t.source_tokens).sum(),
            target_tokens: tasks.iter().map(|t| t.target_tokens).sum(),
            source_only_cost,
            target_only_cost,
            cost_ratio_vs_target: target_only_cost.and_then(|t| total_cost.ratio(t)),
            successes: LcCounts::count_successes(tasks.iter().map(|t| &t.final_labels)),
            source_only_successes: LcCounts::count_successes(
                tasks.iter().map(|t| &t.source_labels),
            ),
            target_only_successes,
            cost_saving_rate,
            success_retention_rate,
            categories,
        };
        Self {
            policy: policy.into(),
            truncation,
            threshold,
            criterion,
            approximate,
            summary,
            tasks,
        }
    }

    /// Source-only, policy and target-only rows relative to the target.
    pub fn comparison(&self) -> Option<ComparisonTable> {
        let s = &self.summary;
        let target = (s.target_only_cost?, s.target_only_successes?);
        Some(ComparisonTable::new(
            ("Source", s.source_only_cost, s.source_only_successes),
            (&self.policy, s.total_cost, s.successes),
            ("Target", target.0, target.1),
        ))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Per-task scores and costs needed to evaluate early termination at any
/// threshold.
#[derive(Debug, Clone)]
pub struct EarlyTerminationCase {
    pub task_id: String,
    pub failure_probability: f64,
    pub full_cost: Cost,
    pub prefix_cost: Cost,
    pub full_tokens: u64,
    pub prefix_tokens: u64,
    pub labels: LabelSet,
}

/// Scores every record once.
pub fn score_early_termination(
    records: &[TaskRecord],
    predictor: &dyn FailurePredictor,
    spec: TruncationSpec,
    pricing: &PricingTable,
) -> Result<Vec<EarlyTerminationCase>> {
    records
        .par_iter()
        .map(|record| {
            let prefix = spec.apply(record)?;
            Ok(EarlyTerminationCase {
                task_id: record.task_id.clone(),
                failure_probability: predictor.failure_probability(&prefix, spec)?,
                full_cost: cost_of(&record.trajectories, pricing)?,
                prefix_cost: cost_of(&prefix.trajectories, pricing)?,
                full_tokens: tokens(&record.trajectories),
                prefix_tokens: tokens(&prefix.trajectories),
                labels: LabelSet::of(record)?,
            })
        })
        .collect()
}

/// Applies a threshold to pre-scored cases. A terminated task is charged its
/// prefix and counts as a failure under every criterion.
pub fn early_termination_report(
    cases: &[EarlyTerminationCase],
    spec: TruncationSpec,
    threshold: f64,
    criterion: LcLevel,
) -> CostReport {
    let failed = LabelSet {
        lc1: Label::FAILURE,
        lc3: Label::FAILURE,
        lc5: Label::FAILURE,
    };
    let tasks = cases
        .iter()
        .map(|c| {
            let fired = c.failure_probability >= threshold;
            let (cost, tok, final_labels) = if fired {
                (c.prefix_cost, c.prefix_tokens, failed)
            } else {
                (c.full_cost, c.full_tokens, c.labels)
            };
            TaskOutcome {
                task_id: c.task_id.clone(),
                failure_probability: c.failure_probability,
                predicted_failure: fired,
                source_cost: cost,
                target_cost: Cost::ZERO,
                total_cost: cost,
                source_tokens: tok,
                target_tokens: 0,
                source_only_cost: c.full_cost,
                target_only_cost: None,
                source_labels: c.labels,
                final_labels,
                target_only_labels: None,
                category: categorize(c.labels.get(criterion), fired, final_labels.get(criterion)),
            }
        })
        .collect();
    CostReport::new(
        "Early termination",
        spec,
        threshold,
        criterion,
        false,
        tasks,
        false,
    )
}

pub fn simulate_early_termination(
    records: &[TaskRecord],
    predictor: &dyn FailurePredictor,
    spec: TruncationSpec,
    threshold: f64,
    criterion: LcLevel,
    pricing: &PricingTable,
) -> Result<CostReport> {
    let cases = score_early_termination(records, predictor, spec, pricing)?;
    Ok(early_termination_report(&cases, spec, threshold, criterion))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub k: usize,
    pub cost_saving_rate: f64,
    pub success_retention_rate: f64,
}

/// One early-termination evaluation per threshold, sharing predictions.
pub fn tradeoff_curve(
    records: &[TaskRecord],
    predictor: &dyn FailurePredictor,
    spec: TruncationSpec,
    thresholds: &[f64],
    criterion: LcLevel,
    pricing: &PricingTable,
) -> Result<Vec<TradeoffPoint>> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
    }
    let cases = score_early_termination(records, predictor, spec, pricing)?;
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let r = early_termination_report(&cases, spec, threshold, criterion);
            TradeoffPoint {
                threshold,
                k: spec.k,
                cost_saving_rate: r.summary.cost_saving_rate,
                success_retention_rate: r.summary.success_retention_rate,
            }
        })
        .collect())
}

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("threshold,k,cost_saving_rate,success_retention_rate\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            p.threshold, p.k, p.cost_saving_rate, p.success_retention_rate
        );
    }
    out
}

fn index_by_id<'a>(
    records: &'a [TaskRecord],
    what: &str,
) -> Result<HashMap<&'a str, &'a TaskRecord>> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.task_id.as_str(), r).is_some() {
            return Err(Error::Data(format!(
                "duplicate task id `{}` in {what} log",
                r.task_id
            )));
        }
    }
    Ok(map)
}

fn pair_with<'a>(
    source: &TaskRecord,
    others: &HashMap<&str, &'a TaskRecord>,
    what: &str,
) -> Result<&'a TaskRecord> {
    let other = others
        .get(source.task_id.as_str())
        .ok_or_else(|| Error::Data(format!("task `{}` missing from {what} log", source.task_id)))?;
    if other.sample_size != source.sample_size || other.agent_kind != source.agent_kind {
        return Err(Error::Data(format!(
            "task `{}`: {what} log disagrees on r or agent kind",
            source.task_id
        )));
    }
    Ok(other)
}

fn check_same_ids(
    source: &[TaskRecord],
    other: &HashMap<&str, &TaskRecord>,
    what: &str,
) -> Result<()> {
    if other.len() != source.len() {
        return Err(Error::Data(format!(
            "{what} log covers {} tasks, source log {}",
            other.len(),
            source.len()
        )));
    }
    Ok(())
}

fn plausible_of(record: &TaskRecord, run: usize) -> bool {
    record
        .plausible()
        .and_then(|p| p.get(run).copied())
        .unwrap_or(false)
}

/// Sequential hotswap. The first `k` source runs are scored; on predicted
/// failure the answer is aggregated from source runs `0..k-1` plus target
/// runs `k-1..R`. Run `k-1` of the source is still paid for.
pub fn simulate_sequential_hotswap(
    source: &[TaskRecord],
    target: &[TaskRecord],
    predictor: &dyn FailurePredictor,
    plan: &HotswapPlan,
    criterion: LcLevel,
    pricing: &PricingTable,
) -> Result<CostReport> {
    if plan.mode != HotswapMode::Sequential {
        return Err(Error::Config(
            "sequential simulation needs a sequential plan".into(),
        ));
    }
    let targets = index_by_id(target, "target")?;
    check_same_ids(source, &targets, "target")?;
    let k = plan.k;
    let spec = plan.truncation();
    let tasks = source
        .par_iter()
        .map(|src| {
            plan.validate_for(src)?;
            let tgt = pair_with(src, &targets, "target")?;
            let p = predictor.failure_probability(&truncate_sequential(src, k)?, spec)?;
            let fired = p >= plan.classification_threshold;
            let source_labels = LabelSet::of(src)?;
            let target_labels = LabelSet::of(tgt)?;
            let source_only_cost = cost_of(&src.trajectories, pricing)?;
            let target_only_cost = cost_of(&tgt.trajectories, pricing)?;

            let (final_labels, source_cost, target_cost, s_tok, t_tok) = if fired {
                let kept = &src.trajectories[..k - 1];
                let spent = &src.trajectories[..k];
                let fresh = &tgt.trajectories[k - 1..];
                let mut combined = src.clone();
                combined.trajectories = kept
                    .iter()
                    .chain(fresh)
                    .enumerate()
                    .map(|(i, t)| Trajectory {
                        run_index: i,
                        ..t.clone()
                    })
                    .collect();
                if src.agent_kind == AgentKind::PatchCount {
                    let plausible = (0..src.sample_size)
                        .map(|i| {
                            if i < k - 1 {
                                plausible_of(src, i)
                            } else {
                                plausible_of(tgt, i)
                            }
                        })
                        .collect();
                    combined.ground_truth = GroundTruth::Plausible { plausible };
                }
                (
                    LabelSet::of(&combined)?,
                    cost_of(spent, pricing)?,
                    cost_of(fresh, pricing)?,
                    tokens(spent),
                    tokens(fresh),
                )
            } else {
                (
                    source_labels,
                    source_only_cost,
                    Cost::ZERO,
                    tokens(&src.trajectories),
                    0,
                )
            };
            Ok(TaskOutcome {
                task_id: src.task_id.clone(),
                failure_probability: p,
                predicted_failure: fired,
                source_cost,
                target_cost,
                total_cost: source_cost + target_cost,
                source_tokens: s_tok,
                target_tokens: t_tok,
                source_only_cost,
                target_only_cost: Some(target_only_cost),
                source_labels,
                final_labels,
                target_only_labels: Some(target_labels),
                category: categorize(
                    source_labels.get(criterion),
                    fired,
                    final_labels.get(criterion),
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::new(
        "Sequential hotswap",
        spec,
        plan.classification_threshold,
        criterion,
        false,
        tasks,
        true,
    ))
}

/// Where parallel hotswap takes the target model's continuation of a run.
#[derive(Debug, Clone, Copy)]
pub enum Continuations<'a> {
    /// Recorded continuations: run `i` of a task holds the steps the target
    /// produced after being handed the first `k-1` source steps.
    Recorded(&'a [TaskRecord]),
    /// Approximation: the whole target run stands in for the continuation.
    FullTargetRuns(&'a [TaskRecord]),
}

/// Parallel hotswap at step `k`. On predicted failure every run still active
/// at step `k` keeps its first `k-1` source steps and continues on the target
/// model; runs that already finished keep their source result. The target
/// re-reads the migrated prefix, billed as target input tokens.
pub fn simulate_parallel_hotswap(
    source: &[TaskRecord],
    continuations: Continuations<'_>,
    target: Option<&[TaskRecord]>,
    predictor: &dyn FailurePredictor,
    plan: &HotswapPlan,
    criterion: LcLevel,
    pricing: &PricingTable,
) -> Result<CostReport> {
    if plan.mode != HotswapMode::Parallel {
        return Err(Error::Config(
            "parallel simulation needs a parallel plan".into(),
        ));
    }
    let (cont_records, approximate) = match continuations {
        Continuations::Recorded(c) => (c, false),
        Continuations::FullTargetRuns(t) => (t, true),
    };
    let conts = index_by_id(cont_records, "continuation")?;
    let targets = target.map(|t| index_by_id(t, "target")).transpose()?;
    if let Some(t) = &targets {
        check_same_ids(source, t, "target")?;
    }
    let k = plan.k;
    let spec = plan.truncation();

    let tasks = source
        .par_iter()
        .map(|src| {
            plan.validate_for(src)?;
            let p = predictor.failure_probability(&truncate_parallel(src, k)?, spec)?;
            let fired = p >= plan.classification_threshold;
            let source_labels = LabelSet::of(src)?;
            let source_only_cost = cost_of(&src.trajectories, pricing)?;
            let (target_only_cost, target_only_labels) = match &targets {
                Some(t) => {
                    let tgt = pair_with(src, t, "target")?;
                    (
                        Some(cost_of(&tgt.trajectories, pricing)?),
                        Some(LabelSet::of(tgt)?),
                    )
                }
                None => (None, None),
            };

            let active: Vec<usize> = src
                .trajectories
                .iter()
                .filter(|t| t.steps.len() >= k)
                .map(|t| t.run_index)
                .collect();

            let outcome = if fired && !active.is_empty() {
                let cont = conts.get(src.task_id.as_str()).copied();
                let mut combined = src.clone();
                let mut plausible: Vec<bool> =
                    (0..src.sample_size).map(|i| plausible_of(src, i)).collect();
                let (mut source_cost, mut target_cost) = (Cost::ZERO, Cost::ZERO);
                let (mut s_tok, mut t_tok) = (0u64, 0u64);
                for traj in &src.trajectories {
                    let run = traj.run_index;
                    if !active.contains(&run) {
                        source_cost += cost_of_trajectory(traj, pricing)?;
                        s_tok += tokens([traj]);
                        continue;
                    }
                    let missing = || {
                        Error::Data(format!(
                            "no continuation for task `{}` run {run}",
                            src.task_id
                        ))
                    };
                    let cont_rec = cont.ok_or_else(missing)?;
                    let next = cont_rec
                        .trajectories
                        .get(run)
                        .filter(|t| !t.steps.is_empty())
                        .ok_or_else(missing)?;
                    let prefix = &traj.steps[..k - 1];
                    let prefix_tokens: u64 = prefix.iter().map(ReasoningStep::total_tokens).sum();
                    source_cost += pricing.steps_cost(prefix, &traj.model_id)?;
                    s_tok += prefix_tokens;
                    target_cost += cost_of_trajectory(next, pricing)?;
                    target_cost += pricing.input_cost(prefix_tokens, &next.model_id)?;
                    t_tok += tokens([next]) + prefix_tokens;

                    let spliced = &mut combined.trajectories[run];
                    spliced.steps = prefix.iter().chain(&next.steps).cloned().collect();
                    spliced.final_answer = next.final_answer.clone();
                    spliced.completed = next.completed;
                    spliced.model_id = next.model_id.clone();
                    plausible[run] = plausible_of(cont_rec, run);
                }
                if src.agent_kind == AgentKind::PatchCount {
                    combined.ground_truth = GroundTruth::Plausible { plausible };
                }
                (
                    LabelSet::of(&combined)?,
                    source_cost,
                    target_cost,
                    s_tok,
                    t_tok,
                )
            } else {
                (
                    source_labels,
                    source_only_cost,
                    Cost::ZERO,
                    tokens(&src.trajectories),
                    0,
                )
            };
            let (final_labels, source_cost, target_cost, s_tok, t_tok) = outcome;
            Ok(TaskOutcome {
                task_id: src.task_id.clone(),
                failure_probability: p,
                predicted_failure: fired,
                source_cost,
                target_cost,
                total_cost: source_cost + target_cost,
                source_tokens: s_tok,
                target_tokens: t_tok,
                source_only_cost,
                target_only_cost,
                source_labels,
                final_labels,
                target_only_labels,
                category: categorize(
                    source_labels.get(criterion),
                    fired,
                    final_labels.get(criterion),
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::new(
        "Parallel hotswap",
        spec,
        plan.classification_threshold,
        criterion,
        approximate,
        tasks,
        true,
    ))
}

/// A row of the source / hotswap / target comparison, with percentages
/// relative to the target row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub cost: Cost,
    pub cost_pct: f64,
    pub successes: LcCounts,
    pub lc1_pct: f64,
    pub lc3_pct: f64,
    pub lc5_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn new(
        source: (&str, Cost, LcCounts),
        policy: (&str, Cost, LcCounts),
        target: (&str, Cost, LcCounts),
    ) -> Self {
        let pct = |num: f64, den: f64| {
            if den > 0.0 {
                100.0 * num / den
            } else {
                f64::NAN
            }
        };
        let (_, t_cost, t_ok) = target;
        let row = |(method, cost, ok): (&str, Cost, LcCounts)| ComparisonRow {
            method: method.to_string(),
            cost,
            cost_pct: cost.ratio(t_cost).map_or(f64::NAN, |r| 100.0 * r),
            successes: ok,
            lc1_pct: pct(ok.lc1 as f64, t_ok.lc1 as f64),
            lc3_pct: pct(ok.lc3 as f64, t_ok.lc3 as f64),
            lc5_pct: pct(ok.lc5 as f64, t_ok.lc5 as f64),
        };
        Self {
            rows: vec![row(source), row(policy), row(target)],
        }
    }

    pub fn render(&self) -> String {
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.2} ({:.2}%)", r.cost.rounded(), r.cost_pct),
                    format!("{} ({:.2}%)", r.successes.lc1, r.lc1_pct),
                    format!("{} ({:.2}%)", r.successes.lc3, r.lc3_pct),
                    format!("{} ({:.2}%)", r.successes.lc5, r.lc5_pct),
                ]
            })
            .collect();
        let header = [
            "Method",
            "Cost (Ratio)",
            "LC-1 (Ratio)",
            "LC-3 (Ratio)",
            "LC-5 (Ratio)",
        ];
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |row: [&str; 5]| {
            let _ = write!(out, "{:<w$}", row[0], w = widths[0]);
            for (c, w) in row[1..].iter().zip(&widths[1..]) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        };
        line(header);
        for row in &cells {
            line([&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::FINAL_ANSWER_TOOL;

    fn run(i: usize, model: &str, len: usize, answer: &str, tok: u64) -> Trajectory {
        let mut steps: Vec<ReasoningStep> = (0..len - 1)
            .map(|s| ReasoningStep::new("search", vec![format!("S{s}")], tok, tok / 10))
            .collect();
        steps.push(ReasoningStep::new(
            FINAL_ANSWER_TOOL,
            vec![answer.into()],
            tok,
            tok / 10,
        ));
        Trajectory {
            run_index: i,
            model_id: model.into(),
            completed: true,
            steps,
            final_answer: Some(vec![answer.into()]),
        }
    }

    fn rec(id: &str, model: &str, answers: &[&str], truth: &str, len: usize) -> TaskRecord {
        TaskRecord {
            task_id: id.into(),
            agent_kind: AgentKind::Voting,
            interaction_budget: 10,
            sample_size: answers.len(),
            trajectories: answers
                .iter()
                .enumerate()
                .map(|(i, a)| run(i, model, len, a, 1000))
                .collect(),
            ground_truth: GroundTruth::Answers(vec![truth.into()]),
        }
    }

    fn pricing() -> PricingTable {
        PricingTable::new()
            .with("src", 0.2, 0.2)
            .with("tgt", 2.5, 10.0)
    }

    #[test]
    fn cost_arithmetic() {
        let p = PricingTable::new().with("m", 2.5, 10.0);
        let step = ReasoningStep::new("x", vec![], 1_000_000, 1_000_000);
        assert_eq!(p.step_cost(&step, "m").unwrap(), Cost::from_currency(12.5));
        assert_eq!(
            p.step_cost(&ReasoningStep::new("x", vec![], 0, 0), "m")
                .unwrap(),
            Cost::ZERO
        );
        assert!(matches!(p.step_cost(&step, "other"), Err(Error::Config(_))));
        assert_eq!(Cost::from_currency(12.5).to_string(), "12.500000");
    }

    #[test]
    fn categories_cover_all_cases() {
        let (s, f) = (Label::SUCCESS, Label::FAILURE);
        assert_eq!(categorize(s, false, s), OutcomeCategory::RetainedSuccess);
        assert_eq!(categorize(f, true, s), OutcomeCategory::RescuedFailure);
        assert_eq!(categorize(f, true, f), OutcomeCategory::UnresolvedFailure);
        assert_eq!(categorize(s, true, s), OutcomeCategory::RedundantSwap);
        assert_eq!(categorize(s, true, f), OutcomeCategory::DestructiveSwap);
        assert_eq!(categorize(f, false, f), OutcomeCategory::MissedOpportunity);
    }

    #[test]
    fn sequential_swap_combines_runs() {
        // Source answers wrong everywhere, target right everywhere.
        let src = vec![rec("t", "src", &["W"; 10], "G", 3)];
        let tgt = vec![rec("t", "tgt", &["G"; 10], "G", 3)];
        let plan = HotswapPlan::new(HotswapMode::Sequential, 5);
        let r = simulate_sequential_hotswap(
            &src,
            &tgt,
            &ConstantPredictor::ALWAYS,
            &plan,
            LcLevel::Lc1,
            &pricing(),
        )
        .unwrap();
        let t = &r.tasks[0];
        // 4 source votes for W, 6 target votes for G
        assert!(t.final_labels.lc1.is_success());
        assert_eq!(t.category, OutcomeCategory::RescuedFailure);
        assert_eq!(
            t.source_cost,
            cost_of(&src[0].trajectories[..5], &pricing()).unwrap()
        );
        assert_eq!(
            t.target_cost,
            cost_of(&tgt[0].trajectories[4..], &pricing()).unwrap()
        );
    }

    #[test]
    fn sequential_swap_at_k1_is_target_only_labels() {
        let src = vec![rec("t", "src", &["W", "G", "W"], "G", 2)];
        let tgt = vec![rec("t", "tgt", &["G", "X", "G"], "G", 2)];
        let plan = HotswapPlan::new(HotswapMode::Sequential, 1);
        let r = simulate_sequential_hotswap(
            &src,
            &tgt,
            &ConstantPredictor::ALWAYS,
            &plan,
            LcLevel::Lc1,
            &pricing(),
        )
        .unwrap();
        assert_eq!(r.tasks[0].final_labels, LabelSet::of(&tgt[0]).unwrap());
    }

    #[test]
    fn never_fire_is_source_only() {
        let src = vec![
            rec("a", "src", &["W", "G", "G"], "G", 4),
            rec("b", "src", &["W"; 3], "G", 2),
        ];
        let tgt = vec![
            rec("a", "tgt", &["G"; 3], "G", 4),
            rec("b", "tgt", &["G"; 3], "G", 2),
        ];
        let plan = HotswapPlan::new(HotswapMode::Sequential, 2);
        let r = simulate_sequential_hotswap(
            &src,
            &tgt,
            &ConstantPredictor::NEVER,
            &plan,
            LcLevel::Lc1,
            &pricing(),
        )
        .unwrap();
        assert_eq!(r.summary.total_cost, r.summary.source_only_cost);
        assert_eq!(r.summary.successes, r.summary.source_only_successes);
        assert_eq!(r.summary.target_cost, Cost::ZERO);
    }

    #[test]
    fn mismatched_task_ids_are_data_errors() {
        let src = vec![rec("a", "src", &["G"], "G", 2)];
        let tgt = vec![rec("b", "tgt", &["G"], "G", 2)];
        let plan = HotswapPlan::new(HotswapMode::Sequential, 1);
        let err = simulate_sequential_hotswap(
            &src,
            &tgt,
            &ConstantPredictor::NEVER,
            &plan,
            LcLevel::Lc1,
            &pricing(),
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn parallel_swap_noop_when_all_runs_finished() {
        let src = vec![rec("t", "src", &["W"; 3], "G", 2)];
        let plan = HotswapPlan::new(HotswapMode::Parallel, 5);
        let r = simulate_parallel_hotswap(
            &src,
            Continuations::Recorded(&[]),
            None,
            &ConstantPredictor::ALWAYS,
            &plan,
            LcLevel::Lc1,
            &pricing(),
        )
        .unwrap();
        let t = &r.tasks[0];
        assert!(t.predicted_failure);
        assert_eq!(t.final_labels, t.source_labels);
        assert_eq!(t.total_cost, t.source_only_cost);
        assert_eq!(t.category, OutcomeCategory::UnresolvedFailure);
    }

    #[test]
    fn parallel_swap_splices_and_bills_migration() {
        let src = vec![rec("t", "src", &["W"; 3], "G", 6)];
        // continuation: 2 target steps ending on the right answer
        let cont = vec![rec("t", "tgt", &["G"; 3], "G", 2)];
        let plan = HotswapPlan::new(HotswapMode::Parallel, 4);
        let p = pricing();
        let r = simulate_parallel_hotswap(
            &src,
            Continuations::Recorded(&cont),
            None,
            &ConstantPredictor::ALWAYS,
            &plan,
            LcLevel::Lc1,
            &p,
        )
        .unwrap();
        let t = &r.tasks[0];
        assert_eq!(t.category, OutcomeCategory::RescuedFailure);
        let prefix: Vec<&ReasoningStep> = src[0].trajectories[0].steps[..3].iter().collect();
        let prefix_tok: u64 = prefix.iter().map(|s| s.total_tokens()).sum();
        let per_run_source = p.steps_cost(prefix.iter().copied(), "src").unwrap();
        let per_run_target = cost_of_trajectory(&cont[0].trajectories[0], &p).unwrap()
            + p.input_cost(prefix_tok, "tgt").unwrap();
        assert_eq!(t.source_cost, Cost::from_units(per_run_source.units() * 3));
        assert_eq!(t.target_cost, Cost::from_units(per_run_target.units() * 3));
    }

    #[test]
    fn missing_continuation_names_task_and_run() {
        let src = vec![rec("t", "src", &["W"; 2], "G", 6)];
        let mut cont = vec![rec("t", "tgt", &["G"; 2], "G", 2)];
        cont[0].trajectories[1].steps.clear();
        let plan = HotswapPlan::new(HotswapMode::Parallel, 3);
        let err = simulate_parallel_hotswap(
            &src,
            Continuations::Recorded(&cont),
            None,
            &ConstantPredictor::ALWAYS,
            &plan,
            LcLevel::Lc1,
            &pricing(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("task `t` run 1"), "{err}");
    }

    #[test]
    fn early_termination_endpoints() {
        let records = vec![
            rec("a", "src", &["G"; 4], "G", 8),
            rec("b", "src", &["W"; 4], "G", 8),
        ];
        let spec = TruncationSpec::parallel(2);
        let p = pricing();
        let never = simulate_early_termination(
            &records,
            &ConstantPredictor::NEVER,
            spec,
            0.5,
            LcLevel::Lc1,
            &p,
        )
        .unwrap();
        assert_eq!(never.summary.cost_saving_rate, 0.0);
        assert_eq!(never.summary.success_retention_rate, 1.0);
        let always = simulate_early_termination(
            &records,
            &ConstantPredictor::ALWAYS,
            spec,
            0.5,
            LcLevel::Lc1,
            &p,
        )
        .unwrap();
        // every step costs the same, so 2 of 8 steps are paid
        assert!((always.summary.cost_saving_rate - 0.75).abs() < 1e-12);
        assert_eq!(always.summary.success_retention_rate, 0.0);

        let oracle = ScoreTable(
            [("a".to_string(), 0.0), ("b".to_string(), 1.0)]
                .into_iter()
                .collect(),
        );
        let r = simulate_early_termination(&records, &oracle, spec, 0.5, LcLevel::Lc1, &p).unwrap();
        assert_eq!(r.summary.success_retention_rate, 1.0);
        // failing task b has half the tokens; 6 of its 8 steps are saved
        assert!((r.summary.cost_saving_rate - 0.5 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn tradeoff_csv_layout() {
        let records = vec![rec("a", "src", &["G"; 2], "G", 4)];
        let pts = tradeoff_curve(
            &records,
            &ConstantPredictor(0.4),
            TruncationSpec::sequential(1),
            &[0.3, 0.5],
            LcLevel::Lc1,
            &pricing(),
        )
        .unwrap();
        let csv = tradeoff_csv(&pts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "threshold,k,cost_saving_rate,success_retention_rate"
        );
        assert_eq!(lines[1], "0.3,1,0.500000,0.000000");
        assert_eq!(lines[2], "0.5,1,0.000000,1.000000");
    }

    #[test]
    fn pricing_file_format() {
        let t =
            PricingTable::from_json(r#"{"llama": {"in_per_1m": 0.2, "out_per_1m": 0.2}}"#).unwrap();
        assert!(t.unit_prices("llama").is_ok());
        assert!(PricingTable::from_json(r#"{"x": {"in_per_1m": -1, "out_per_1m": 0}}"#).is_err());
    }
}
