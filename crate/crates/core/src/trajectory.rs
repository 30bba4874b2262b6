//! Trajectory log schema, validation, majority voting and task labels.
//!
//! A log is a JSON-lines file with one [`TaskRecord`] per line. Each record
//! holds the R self-consistency runs of one task together with the ground
//! truth needed to decide whether the aggregated outcome succeeded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tool name of the answer-generation step that closes voting trajectories.
pub const FINAL_ANSWER_TOOL: &str = "__final_answer__";
/// Tool name recorded for invocations the agent could not parse or dispatch.
pub const ABNORMAL_TOOL: &str = "__abnormal__";
/// Separator for steps that invoke several tools at once (`a+b`).
pub const MULTI_TOOL_SEPARATOR: char = '+';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    #[serde(rename = "tool")]
    pub tool_name: String,
    pub args: Vec<String>,
    #[serde(rename = "abnormal")]
    pub is_abnormal: bool,
    #[serde(rename = "in_tok")]
    pub input_tokens: u64,
    #[serde(rename = "out_tok")]
    pub output_tokens: u64,
}

impl ReasoningStep {
    pub fn new(
        tool: impl Into<String>,
        args: Vec<String>,
        input_tokens: u64,
        output_tokens: u64,
    ) -> Self {
        let tool_name = tool.into();
        let is_abnormal = tool_name == ABNORMAL_TOOL;
        Self {
            tool_name,
            args,
            is_abnormal,
            input_tokens,
            output_tokens,
        }
    }

    pub fn abnormal(args: Vec<String>, input_tokens: u64, output_tokens: u64) -> Self {
        Self::new(ABNORMAL_TOOL, args, input_tokens, output_tokens)
    }

    /// Individual tool names of this step; a multi-tool step yields several.
    pub fn tools(&self) -> impl Iterator<Item = &str> {
        self.tool_name
            .split(MULTI_TOOL_SEPARATOR)
            .map(str::trim)
            .filter(|t| !t.is_empty())
    }

    pub fn is_final_answer(&self) -> bool {
        self.tool_name == FINAL_ANSWER_TOOL
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub run_index: usize,
    pub model_id: String,
    pub completed: bool,
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<Vec<String>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Distinct trimmed, non-empty answers in first-seen order; empty for runs
    /// that did not complete or never answered.
    pub fn votes(&self) -> Vec<&str> {
        if !self.completed {
            return Vec::new();
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for answer in self.final_answer.iter().flatten() {
            let answer = answer.trim();
            if !answer.is_empty() && seen.insert(answer) {
                out.push(answer);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Answers aggregated by majority vote (fault localization style).
    Voting,
    /// Success counted by runs producing a plausible patch (repair style).
    PatchCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    Answers(Vec<String>),
    Plausible { plausible: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub agent_kind: AgentKind,
    #[serde(rename = "n")]
    pub interaction_budget: usize,
    #[serde(rename = "r")]
    pub sample_size: usize,
    pub trajectories: Vec<Trajectory>,
    pub ground_truth: GroundTruth,
}

impl TaskRecord {
    /// Longest trajectory the agent kind allows: N plus the answer step for
    /// voting agents, N for patch-count agents.
    pub fn max_steps(&self) -> usize {
        match self.agent_kind {
            AgentKind::Voting => self.interaction_budget + 1,
            AgentKind::PatchCount => self.interaction_budget,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &ReasoningStep> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    pub fn plausible(&self) -> Option<&[bool]> {
        match &self.ground_truth {
            GroundTruth::Plausible { plausible } => Some(plausible),
            GroundTruth::Answers(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.task_id.as_str();
        if id.is_empty() {
            return Err(Error::validation(id, "task_id", "must not be empty"));
        }
        if self.interaction_budget == 0 {
            return Err(Error::validation(id, "n", "must be positive"));
        }
        if self.sample_size == 0 {
            return Err(Error::validation(id, "r", "must be positive"));
        }
        if self.trajectories.len() != self.sample_size {
            return Err(Error::validation(
                id,
                "trajectories",
                format!(
                    "expected r = {} trajectories, found {}",
                    self.sample_size,
                    self.trajectories.len()
                ),
            ));
        }
        match (&self.ground_truth, self.agent_kind) {
            (GroundTruth::Answers(_), AgentKind::Voting) => {}
            (GroundTruth::Plausible { plausible }, AgentKind::PatchCount) => {
                if plausible.len() != self.sample_size {
                    return Err(Error::validation(
                        id,
                        "ground_truth.plausible",
                        format!(
                            "expected {} entries, found {}",
                            self.sample_size,
                            plausible.len()
                        ),
                    ));
                }
            }
            _ => {
                return Err(Error::validation(
                    id,
                    "ground_truth",
                    "shape does not match agent_kind",
                ))
            }
        }
        let max_steps = self.max_steps();
        for (pos, traj) in self.trajectories.iter().enumerate() {
            if traj.run_index != pos {
                return Err(Error::validation(
                    id,
                    "run_index",
                    format!(
                        "trajectory at position {pos} has run_index {}",
                        traj.run_index
                    ),
                ));
            }
            if traj.steps.len() > max_steps {
                return Err(Error::validation(
                    id,
                    "steps",
                    format!(
                        "run {pos} has {} steps, limit is {max_steps}",
                        traj.steps.len()
                    ),
                ));
            }
            if traj.completed && traj.steps.is_empty() {
                return Err(Error::validation(
                    id,
                    "steps",
                    format!("completed run {pos} has no steps"),
                ));
            }
            for step in &traj.steps {
                if step.tools().next().is_none() {
                    return Err(Error::validation(
                        id,
                        "tool",
                        format!("run {pos} has an empty tool name"),
                    ));
                }
                if step.is_abnormal != (step.tool_name == ABNORMAL_TOOL) {
                    return Err(Error::validation(
                        id,
                        "abnormal",
                        format!(
                            "run {pos}: abnormal flag disagrees with tool `{}`",
                            step.tool_name
                        ),
                    ));
                }
            }
            if self.agent_kind == AgentKind::Voting && traj.final_answer.is_some() {
                let ends_with_answer = traj
                    .steps
                    .last()
                    .is_some_and(ReasoningStep::is_final_answer);
                if !ends_with_answer {
                    return Err(Error::validation(
                        id,
                        "final_answer",
                        format!("run {pos} has an answer but its last step is not `{FINAL_ANSWER_TOOL}`"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("task records always serialize")
    }
}

/// Parses a JSON-lines log held in memory. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_log_str(text: &str) -> Result<Vec<TaskRecord>> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TaskRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn parse_log(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log_str(&text)
}

pub fn serialize_log(records: &[TaskRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&record.to_json_line());
        out.push('\n');
    }
    out
}

pub fn write_log(path: impl AsRef<Path>, records: &[TaskRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        writeln!(writer, "{}", record.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Ranks answers by vote count, descending, ties in ascending string order.
///
/// Each completed run casts one vote for every distinct answer it emits.
pub fn majority_vote(record: &TaskRecord, top_n: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for traj in &record.trajectories {
        for answer in traj.votes() {
            *counts.entry(answer).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(a, c)| (a.to_string(), c))
        .collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(top_n);
    ranked
}

/// Binary outcome of a task: 1 is failure, 0 is success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(u8);

impl Label {
    pub const SUCCESS: Label = Label(0);
    pub const FAILURE: Label = Label(1);

    pub fn new(y: u8) -> Result<Self> {
        match y {
            0 | 1 => Ok(Label(y)),
            other => Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn from_failure(failed: bool) -> Self {
        if failed {
            Label::FAILURE
        } else {
            Label::SUCCESS
        }
    }

    pub fn y(self) -> u8 {
        self.0
    }

    pub fn is_failure(self) -> bool {
        self.0 == 1
    }

    pub fn is_success(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    /// Ground truth among the top-n majority-voted answers.
    AccAtN,
    /// At least n runs produced a plausible patch.
    PpeAtLeastN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelCriterion {
    pub kind: CriterionKind,
    pub n: usize,
}

impl LabelCriterion {
    pub fn new(kind: CriterionKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config(
                "label criterion threshold n must be at least 1".into(),
            ));
        }
        Ok(Self { kind, n })
    }

    pub fn for_agent(level: LcLevel, agent_kind: AgentKind) -> Self {
        let kind = match agent_kind {
            AgentKind::Voting => CriterionKind::AccAtN,
            AgentKind::PatchCount => CriterionKind::PpeAtLeastN,
        };
        Self { kind, n: level.n() }
    }
}

/// The three reporting levels, LC-1, LC-3 and LC-5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LcLevel {
    Lc1,
    Lc3,
    Lc5,
}

impl LcLevel {
    pub const ALL: [LcLevel; 3] = [LcLevel::Lc1, LcLevel::Lc3, LcLevel::Lc5];

    pub fn n(self) -> usize {
        match self {
            LcLevel::Lc1 => 1,
            LcLevel::Lc3 => 3,
            LcLevel::Lc5 => 5,
        }
    }
}

impl fmt::Display for LcLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lc{}", self.n())
    }
}

impl FromStr for LcLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "lc1" => Ok(LcLevel::Lc1),
            "lc3" => Ok(LcLevel::Lc3),
            "lc5" => Ok(LcLevel::Lc5),
            other => Err(Error::Config(format!(
                "unknown label criterion `{other}` (expected lc1, lc3 or lc5)"
            ))),
        }
    }
}

pub fn label_task(record: &TaskRecord, criterion: LabelCriterion) -> Result<Label> {
    match (criterion.kind, record.agent_kind, &record.ground_truth) {
        (CriterionKind::AccAtN, AgentKind::Voting, GroundTruth::Answers(truth)) => {
            let top = majority_vote(record, criterion.n);
            let hit = top
                .iter()
                .any(|(answer, _)| truth.iter().any(|t| t.trim() == answer));
            Ok(Label::from_failure(!hit))
        }
        (
            CriterionKind::PpeAtLeastN,
            AgentKind::PatchCount,
            GroundTruth::Plausible { plausible },
        ) => {
            let count = plausible.iter().filter(|p| **p).count();
            Ok(Label::from_failure(count < criterion.n))
        }
        (CriterionKind::AccAtN, AgentKind::PatchCount, _)
        | (CriterionKind::PpeAtLeastN, AgentKind::Voting, _) => Err(Error::Config(format!(
            "criterion {:?} is not defined for {:?} agents",
            criterion.kind, record.agent_kind
        ))),
        _ => Err(Error::validation(
            &record.task_id,
            "ground_truth",
            "shape does not match agent_kind",
        )),
    }
}

/// Labels of a record under LC-1, LC-3 and LC-5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub lc1: Label,
    pub lc3: Label,
    pub lc5: Label,
}

impl LabelSet {
    pub fn of(record: &TaskRecord) -> Result<Self> {
        let at = |level| label_task(record, LabelCriterion::for_agent(level, record.agent_kind));
        Ok(Self {
            lc1: at(LcLevel::Lc1)?,
            lc3: at(LcLevel::Lc3)?,
            lc5: at(LcLevel::Lc5)?,
        })
    }

    pub fn get(&self, level: LcLevel) -> Label {
        match level {
            LcLevel::Lc1 => self.lc1,
            LcLevel::Lc3 => self.lc3,
            LcLevel::Lc5 => self.lc5,
        }
    }
}
