//! Classification metrics and baselines. Scores are failure scores: higher
//! means more likely to fail, and the positive class is failure (`y = 1`).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::cv_splits;
use crate::trajectory::{label_task, majority_vote, AgentKind, Label, LabelCriterion, TaskRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub task_id: String,
    pub score: f64,
    pub y: Label,
}

impl ScoredExample {
    pub fn new(task_id: impl Into<String>, score: f64, y: Label) -> Self {
        Self {
            task_id: task_id.into(),
            score,
            y,
        }
    }
}

fn pairs(examples: &[ScoredExample]) -> Vec<(f64, Label)> {
    examples.iter().map(|e| (e.score, e.y)).collect()
}

fn class_counts(data: &[(f64, Label)]) -> (usize, usize) {
    let pos = data.iter().filter(|(_, y)| y.is_failure()).count();
    (pos, data.len() - pos)
}

fn require_both_classes(data: &[(f64, Label)]) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(data);
    if pos == 0 {
        return Err(Error::UndefinedInput(
            "no positive (failure) examples".into(),
        ));
    }
    if neg == 0 {
        return Err(Error::UndefinedInput(
            "no negative (success) examples".into(),
        ));
    }
    Ok((pos, neg))
}

fn check_finite(data: &[(f64, Label)]) -> Result<()> {
    if data.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::UndefinedInput("non-finite score".into()));
    }
    Ok(())
}

/// Fraction of examples where `score >= threshold` agrees with `y = 1`.
pub fn accuracy(examples: &[ScoredExample], threshold: f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::UndefinedInput(
            "accuracy of an empty example set".into(),
        ));
    }
    let correct = examples
        .iter()
        .filter(|e| (e.score >= threshold) == e.y.is_failure())
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

pub fn auroc(examples: &[ScoredExample]) -> Result<f64> {
    auroc_of(&pairs(examples))
}

/// Mann-Whitney AUROC with half credit for ties, via average ranks.
pub fn auroc_of(data: &[(f64, Label)]) -> Result<f64> {
    check_finite(data)?;
    let (pos, neg) = require_both_classes(data)?;
    let mut sorted: Vec<(f64, Label)> = data.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let group_pos = sorted[i..j].iter().filter(|(_, y)| y.is_failure()).count();
        rank_sum += avg_rank * group_pos as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Descending score groups with their (positive, negative) counts.
fn descending_groups(data: &[(f64, Label)]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, Label)> = data.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if y.is_failure() {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(y.is_failure()), usize::from(!y.is_failure()))),
        }
    }
    groups
}

pub fn aupr(examples: &[ScoredExample]) -> Result<f64> {
    aupr_of(&pairs(examples))
}

/// Step-wise area under the precision-recall curve: Σ precisionᵢ·Δrecallᵢ
/// over descending score groups.
pub fn aupr_of(data: &[(f64, Label)]) -> Result<f64> {
    check_finite(data)?;
    let (pos, _) = class_counts(data);
    if pos == 0 {
        return Err(Error::UndefinedInput(
            "no positive (failure) examples".into(),
        ));
    }
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (_, gp, gn) in descending_groups(data) {
        tp += gp;
        fp += gn;
        if gp > 0 {
            area += (tp as f64 / (tp + fp) as f64) * (gp as f64 / pos as f64);
        }
    }
    Ok(area)
}

pub fn fpr_at_tpr(examples: &[ScoredExample], target_tpr: f64) -> Result<f64> {
    fpr_at_tpr_of(&pairs(examples), target_tpr)
}

/// Smallest false-positive rate among thresholds whose true-positive rate
/// reaches `target_tpr`.
pub fn fpr_at_tpr_of(data: &[(f64, Label)], target_tpr: f64) -> Result<f64> {
    check_finite(data)?;
    let (pos, neg) = require_both_classes(data)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, gp, gn) in descending_groups(data) {
        tp += gp;
        fp += gn;
        if tp as f64 / pos as f64 >= target_tpr {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Ok(1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted_failure: impl IntoIterator<Item = (bool, Label)>) -> Self {
        let mut c = Confusion::default();
        for (pred, y) in predicted_failure {
            match (pred, y.is_failure()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub examples: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub fpr_at_95: Option<f64>,
}

/// Metrics for one method. Threshold-free metrics are `None` where they are
/// undefined (single-class data) or not applicable (majority baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub examples: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub fpr_at_95: Option<f64>,
    pub confusion: Confusion,
    pub folds: Vec<FoldMetrics>,
    pub fingerprint: Option<String>,
}

impl EvalReport {
    pub fn from_scores(
        method: impl Into<String>,
        examples: &[ScoredExample],
        threshold: f64,
    ) -> Result<Self> {
        let confusion =
            Confusion::from_predictions(examples.iter().map(|e| (e.score >= threshold, e.y)));
        Ok(Self {
            method: method.into(),
            examples: examples.len(),
            threshold,
            accuracy: accuracy(examples, threshold)?,
            auroc: auroc(examples).ok(),
            aupr: aupr(examples).ok(),
            fpr_at_95: fpr_at_tpr(examples, 0.95).ok(),
            confusion,
            folds: Vec::new(),
            fingerprint: None,
        })
    }

    /// Aggregated report plus one breakdown row per fold.
    pub fn from_folds(
        method: impl Into<String>,
        folds: &[(usize, Vec<ScoredExample>)],
        threshold: f64,
    ) -> Result<Self> {
        let all: Vec<ScoredExample> = folds
            .iter()
            .flat_map(|(_, ex)| ex.iter().cloned())
            .collect();
        let mut report = Self::from_scores(method, &all, threshold)?;
        report.folds = folds
            .iter()
            .filter(|(_, ex)| !ex.is_empty())
            .map(|(fold, ex)| FoldMetrics {
                fold: *fold,
                examples: ex.len(),
                accuracy: accuracy(ex, threshold).unwrap_or(f64::NAN),
                auroc: auroc(ex).ok(),
                aupr: aupr(ex).ok(),
                fpr_at_95: fpr_at_tpr(ex, 0.95).ok(),
            })
            .collect();
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Aligned text table with columns Method, Accuracy, AUROC, AUPR, FPR@95.
pub fn render_table(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                format!("{:.2}", r.accuracy),
                fmt(r.auroc),
                fmt(r.aupr),
                fmt(r.fpr_at_95),
            ]
        })
        .collect();
    let header = ["Method", "Accuracy", "AUROC", "AUPR", "FPR@95"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 5]| {
        let _ = write!(out, "{:<w$}", cells[0], w = widths[0]);
        for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    };
    line(header);
    for row in &rows {
        line([&row[0], &row[1], &row[2], &row[3], &row[4]]);
    }
    out
}

/// Predicts the majority class for everything; ties go to success.
pub fn majority_baseline(labels: &[Label]) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::UndefinedInput(
            "majority baseline of an empty label set".into(),
        ));
    }
    let failures = labels.iter().filter(|y| y.is_failure()).count();
    let predict_failure = failures * 2 > labels.len();
    let confusion = Confusion::from_predictions(labels.iter().map(|&y| (predict_failure, y)));
    Ok(EvalReport {
        method: "Majority class".into(),
        examples: labels.len(),
        threshold: 0.5,
        accuracy: confusion.accuracy(),
        auroc: None,
        aupr: None,
        fpr_at_95: None,
        confusion,
        folds: Vec::new(),
        fingerprint: None,
    })
}

/// Top vote count over completed runs; 0 when nothing was answered.
pub fn voting_confidence(record: &TaskRecord) -> f64 {
    let completed = record.trajectories.iter().filter(|t| t.completed).count();
    if completed == 0 {
        return 0.0;
    }
    majority_vote(record, 1)
        .first()
        .map_or(0.0, |(_, votes)| *votes as f64 / completed as f64)
}

/// Candidate thresholds 0.1, 0.2, ..., 0.9.
pub fn confidence_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone)]
pub struct ConfidenceBaseline {
    pub threshold: f64,
    pub report: EvalReport,
    pub test_scores: Vec<ScoredExample>,
}

/// Voting-confidence baseline: failure is predicted when confidence falls
/// below τ, with τ chosen on the validation ids (ties to the smaller τ).
pub fn confidence_baseline(
    records: &[TaskRecord],
    criterion: LabelCriterion,
    validation_ids: &[String],
    test_ids: &[String],
) -> Result<ConfidenceBaseline> {
    let by_id: HashMap<&str, &TaskRecord> =
        records.iter().map(|r| (r.task_id.as_str(), r)).collect();
    let rows = |ids: &[String]| -> Result<Vec<(f64, Label, String)>> {
        ids.iter()
            .map(|id| {
                let record = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Data(format!("unknown task id `{id}`")))?;
                if record.agent_kind != AgentKind::Voting {
                    return Err(Error::Config(format!(
                        "confidence baseline is undefined for patch-count task `{id}`"
                    )));
                }
                Ok((
                    voting_confidence(record),
                    label_task(record, criterion)?,
                    id.clone(),
                ))
            })
            .collect()
    };
    let validation = rows(validation_ids)?;
    let test = rows(test_ids)?;
    if test.is_empty() {
        return Err(Error::UndefinedInput(
            "confidence baseline needs test examples".into(),
        ));
    }

    let accuracy_at = |data: &[(f64, Label, String)], tau: f64| {
        data.iter()
            .filter(|(c, y, _)| (*c < tau) == y.is_failure())
            .count() as f64
            / data.len().max(1) as f64
    };
    let mut tau_star = 0.1;
    let mut best = f64::NEG_INFINITY;
    for tau in confidence_thresholds() {
        let acc = accuracy_at(&validation, tau);
        if acc > best {
            best = acc;
            tau_star = tau;
        }
    }

    let test_scores: Vec<ScoredExample> = test
        .iter()
        .map(|(c, y, id)| ScoredExample::new(id.clone(), 1.0 - c, *y))
        .collect();
    let confusion = Confusion::from_predictions(test.iter().map(|(c, y, _)| (*c < tau_star, *y)));
    let report = EvalReport {
        method: "Voting confidence".into(),
        examples: test.len(),
        threshold: tau_star,
        accuracy: confusion.accuracy(),
        auroc: auroc(&test_scores).ok(),
        aupr: aupr(&test_scores).ok(),
        fpr_at_95: fpr_at_tpr(&test_scores, 0.95).ok(),
        confusion,
        folds: Vec::new(),
        fingerprint: None,
    };
    Ok(ConfidenceBaseline {
        threshold: tau_star,
        report,
        test_scores,
    })
}

/// Runs the confidence baseline on every fold of the shared cross-validation
/// split and aggregates test rows.
pub fn confidence_baseline_cv(
    records: &[TaskRecord],
    criterion: LabelCriterion,
    folds: usize,
    seed: u64,
) -> Result<EvalReport> {
    let splits = cv_splits(records.len(), folds, seed)?;
    let ids = |idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&i| records[i].task_id.clone()).collect()
    };
    let mut confusion = Confusion::default();
    let mut per_fold = Vec::new();
    let mut fold_rows = Vec::new();
    let mut taus = BTreeMap::new();
    for split in &splits {
        let out = confidence_baseline(
            records,
            criterion,
            &ids(&split.validation),
            &ids(&split.test),
        )?;
        confusion.tp += out.report.confusion.tp;
        confusion.fp += out.report.confusion.fp;
        confusion.tn += out.report.confusion.tn;
        confusion.fn_ += out.report.confusion.fn_;
        *taus
            .entry(format!("{:.1}", out.threshold))
            .or_insert(0usize) += 1;
        per_fold.push(FoldMetrics {
            fold: split.fold,
            examples: out.report.examples,
            accuracy: out.report.accuracy,
            auroc: out.report.auroc,
            aupr: out.report.aupr,
            fpr_at_95: out.report.fpr_at_95,
        });
        fold_rows.extend(out.test_scores);
    }
    let most_common_tau = taus
        .iter()
        .max_by_key(|(_, c)| **c)
        .and_then(|(t, _)| t.parse().ok())
        .unwrap_or(0.5);
    Ok(EvalReport {
        method: "Voting confidence".into(),
        examples: fold_rows.len(),
        threshold: most_common_tau,
        accuracy: confusion.accuracy(),
        auroc: auroc(&fold_rows).ok(),
        aupr: aupr(&fold_rows).ok(),
        fpr_at_95: fpr_at_tpr(&fold_rows, 0.95).ok(),
        confusion,
        folds: per_fold,
        fingerprint: None,
    })
}
