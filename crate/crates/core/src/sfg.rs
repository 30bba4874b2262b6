//! Semantic flow graph construction.
//!
//! Nodes are distinct reasoning steps (exact mode) or clusters of similar steps
//! (clustered mode); a directed edge `u -> v` counts how often a step of `u` is
//! immediately followed by a step of `v` inside one run. Transitions are never
//! counted across runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    cosine, Embedder, EmbedderConfig, NodeEncoder, NodeEncoding, ToolVocabulary,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trajectory::{GroundTruth, Label, LabelSet, LcLevel, ReasoningStep, TaskRecord};

/// Separates arguments in the exact-mode identity key.
pub const ARG_SEPARATOR: char = '\u{1f}';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub features: Vec<f64>,
    pub member_count: usize,
    /// Short human-readable description (tool and leading argument).
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFlowGraph {
    pub task_id: String,
    pub nodes: Vec<Node>,
    /// Sorted by `(src, dst)`, one entry per pair.
    pub edges: Vec<Edge>,
    pub labels: Option<LabelSet>,
}

impl SemanticFlowGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    pub fn total_edge_weight(&self) -> u64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn total_members(&self) -> usize {
        self.nodes.iter().map(|n| n.member_count).sum()
    }

    pub fn label(&self, level: LcLevel) -> Option<Label> {
        self.labels.map(|l| l.get(level))
    }

    pub fn edge_weight(&self, src: usize, dst: usize) -> u64 {
        self.edges
            .binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst)))
            .map_or(0, |i| self.edges[i].weight)
    }

    /// Renumbers nodes: node `i` becomes `perm[i]`. Used to check that
    /// nothing downstream depends on node order.
    pub fn permuted(&self, perm: &[usize]) -> SemanticFlowGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes: Vec<Node> = self
            .nodes
            .iter()
            .map(|n| Node {
                id: perm[n.id],
                ..n.clone()
            })
            .collect();
        nodes.sort_by_key(|n| n.id);
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                weight: e.weight,
            })
            .collect();
        edges.sort();
        SemanticFlowGraph {
            task_id: self.task_id.clone(),
            nodes,
            edges,
            labels: self.labels,
        }
    }

    /// Feature matrix (rows in node-id order) and the symmetric normalized
    /// adjacency `D^-1/2 (A + Aᵀ + I) D^-1/2`.
    pub fn to_adjacency(&self, binarize: bool) -> (Matrix, Matrix) {
        let n = self.nodes.len();
        let dim = self.feature_dim();
        let mut x = Matrix::zeros(n, dim);
        for node in &self.nodes {
            x.row_mut(node.id).copy_from_slice(&node.features);
        }
        let mut a = Matrix::identity(n);
        for e in &self.edges {
            let w = if binarize { 1.0 } else { e.weight as f64 };
            a[(e.src, e.dst)] += w;
            a[(e.dst, e.src)] += w;
        }
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        (x, a)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", escape_dot(&self.task_id));
        for node in &self.nodes {
            let _ = writeln!(
                out,
                "  n{} [label=\"{}\\n×{}\"];",
                node.id,
                escape_dot(&node.name),
                node.member_count
            );
        }
        for e in &self.edges {
            if e.weight > 1 {
                let _ = writeln!(out, "  n{} -> n{} [label=\"{}\"];", e.src, e.dst, e.weight);
            } else {
                let _ = writeln!(out, "  n{} -> n{};", e.src, e.dst);
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn node_name(step: &ReasoningStep) -> String {
    let mut name = step.tool_name.clone();
    if let Some(first) = step.args.first() {
        let short: String = first.chars().take(40).collect();
        name.push('(');
        name.push_str(&short);
        if step.args.len() > 1 || short.len() < first.len() {
            name.push('…');
        }
        name.push(')');
    }
    name
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub assignment_threshold: f64,
    pub merge_threshold: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            assignment_threshold: 0.99,
            merge_threshold: 0.99,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, th) in [
            ("assignment", self.assignment_threshold),
            ("merge", self.merge_threshold),
        ] {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} threshold {th} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    None,
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub mode: TruncationMode,
    pub k: usize,
}

impl TruncationSpec {
    pub const NONE: TruncationSpec = TruncationSpec {
        mode: TruncationMode::None,
        k: 0,
    };

    pub fn parallel(k: usize) -> Self {
        Self {
            mode: TruncationMode::Parallel,
            k,
        }
    }

    pub fn sequential(k: usize) -> Self {
        Self {
            mode: TruncationMode::Sequential,
            k,
        }
    }

    pub fn apply(&self, record: &TaskRecord) -> Result<TaskRecord> {
        match self.mode {
            TruncationMode::None => Ok(record.clone()),
            TruncationMode::Parallel => truncate_parallel(record, self.k),
            TruncationMode::Sequential => truncate_sequential(record, self.k),
        }
    }
}

impl fmt::Display for TruncationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            TruncationMode::None => write!(f, "none"),
            TruncationMode::Parallel => write!(f, "parallel:{}", self.k),
            TruncationMode::Sequential => write!(f, "sequential:{}", self.k),
        }
    }
}

impl FromStr for TruncationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::NONE);
        }
        let bad = || {
            Error::Config(format!(
                "invalid truncation `{s}` (expected none, parallel:K or sequential:K)"
            ))
        };
        let (mode, k) = s.split_once(':').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match mode {
            "parallel" => Ok(Self::parallel(k)),
            "sequential" => Ok(Self::sequential(k)),
            _ => Err(bad()),
        }
    }
}

/// Cuts every run after its first `k` steps. Runs of length at most `k` are
/// untouched; cut runs become incomplete and lose their answer unless the kept
/// prefix already contains the answer step.
pub fn truncate_parallel(record: &TaskRecord, k: usize) -> Result<TaskRecord> {
    if k == 0 {
        return Err(Error::Config(
            "parallel truncation point k must be at least 1".into(),
        ));
    }
    let mut out = record.clone();
    for traj in &mut out.trajectories {
        if traj.steps.len() > k {
            traj.steps.truncate(k);
            traj.completed = false;
            if !traj.steps.iter().any(ReasoningStep::is_final_answer) {
                traj.final_answer = None;
            }
        }
    }
    Ok(out)
}

/// Keeps runs `0..k` intact and drops the rest.
pub fn truncate_sequential(record: &TaskRecord, k: usize) -> Result<TaskRecord> {
    if k == 0 || k > record.sample_size {
        return Err(Error::Config(format!(
            "sequential truncation point k = {k} outside 1..={}",
            record.sample_size
        )));
    }
    let mut out = record.clone();
    out.trajectories.truncate(k);
    out.sample_size = k;
    if let GroundTruth::Plausible { plausible } = &mut out.ground_truth {
        plausible.truncate(k);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BuildMode {
    /// One node per distinct (tool, arguments) pair.
    Exact,
    /// Incremental cosine clustering of step vectors.
    Clustered(ClusterConfig),
}

/// Everything that determines how a record becomes a graph. Stored alongside
/// graph caches and model checkpoints so that mismatches can be detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub mode: BuildMode,
    pub truncation: TruncationSpec,
    pub encoding: NodeEncoding,
    pub binarize_adjacency: bool,
    pub embedder: EmbedderConfig,
    pub vocab: ToolVocabulary,
}

impl GraphConfig {
    pub fn new(vocab: ToolVocabulary) -> Self {
        Self {
            mode: BuildMode::Exact,
            truncation: TruncationSpec::NONE,
            encoding: NodeEncoding::Full,
            binarize_adjacency: false,
            embedder: EmbedderConfig::default(),
            vocab,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.vocab.block_len() + self.embedder.arg_dim
    }
}

/// Builds graphs from records under one [`GraphConfig`].
pub struct GraphBuilder {
    config: GraphConfig,
    embedder: Embedder,
}

impl GraphBuilder {
    pub fn new(config: GraphConfig) -> Result<Self> {
        if let BuildMode::Clustered(c) = &config.mode {
            c.validate()?;
        }
        let embedder = Embedder::new(config.embedder.clone())?;
        Ok(Self { config, embedder })
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    /// Builds the graph of a record that has already been truncated.
    pub fn build_untruncated(&self, record: &TaskRecord) -> SemanticFlowGraph {
        let encoder = NodeEncoder::new(&self.config.vocab, &self.embedder, self.config.encoding);
        match self.config.mode {
            BuildMode::Exact => build_exact(record, encoder),
            BuildMode::Clustered(c) => build_clustered(record, encoder, c),
        }
    }

    /// Truncates per the config, builds, and attaches the labels of the full
    /// record.
    pub fn build(&self, record: &TaskRecord) -> Result<SemanticFlowGraph> {
        let labels = LabelSet::of(record)?;
        let truncated = self.config.truncation.apply(record)?;
        let mut graph = self.build_untruncated(&truncated);
        graph.labels = Some(labels);
        Ok(graph)
    }

    /// Builds every record in parallel; output order follows input order.
    pub fn build_all(&self, records: &[TaskRecord]) -> Result<Vec<SemanticFlowGraph>> {
        records.par_iter().map(|r| self.build(r)).collect()
    }
}

fn exact_key(step: &ReasoningStep) -> (String, String) {
    let args = step.args.join(&ARG_SEPARATOR.to_string());
    (step.tool_name.clone(), args)
}

#[derive(Default)]
struct EdgeCounter(BTreeMap<(usize, usize), u64>);

impl EdgeCounter {
    fn add_run(&mut self, ids: &[usize]) {
        for pair in ids.windows(2) {
            *self.0.entry((pair[0], pair[1])).or_default() += 1;
        }
    }

    fn into_edges(self) -> Vec<Edge> {
        self.0
            .into_iter()
            .map(|((src, dst), weight)| Edge { src, dst, weight })
            .collect()
    }
}

/// Exact-match construction: the identity of a step is its tool name plus its
/// argument list. A run that repeats a step back to back yields a self-loop.
pub fn build_exact(record: &TaskRecord, mut encoder: NodeEncoder<'_>) -> SemanticFlowGraph {
    let mut ids: HashMap<(String, String), usize> = HashMap::new();
    let mut nodes: Vec<Node> = Vec::new();
    let mut edges = EdgeCounter::default();
    for traj in &record.trajectories {
        let mut run_ids = Vec::with_capacity(traj.steps.len());
        for step in &traj.steps {
            let key = exact_key(step);
            let id = match ids.get(&key) {
                Some(&id) => id,
                None => {
                    let id = nodes.len();
                    nodes.push(Node {
                        id,
                        features: encoder.encode(step),
                        member_count: 0,
                        name: node_name(step),
                    });
                    ids.insert(key, id);
                    id
                }
            };
            nodes[id].member_count += 1;
            run_ids.push(id);
        }
        edges.add_run(&run_ids);
    }
    SemanticFlowGraph {
        task_id: record.task_id.clone(),
        nodes,
        edges: edges.into_edges(),
        labels: None,
    }
}

struct Cluster {
    centroid: Vec<f64>,
    count: usize,
    name: String,
    merged_into: Option<usize>,
}

/// Incremental clustering construction.
///
/// Each step joins the cluster whose centroid is most similar if that
/// similarity strictly exceeds the assignment threshold (or the centroid is
/// bit-identical to the step vector), else it opens a new cluster. Afterwards
/// the most similar centroid pair above the merge threshold is merged until no
/// such pair remains.
pub fn build_clustered(
    record: &TaskRecord,
    mut encoder: NodeEncoder<'_>,
    cfg: ClusterConfig,
) -> SemanticFlowGraph {
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut runs: Vec<Vec<usize>> = Vec::with_capacity(record.trajectories.len());

    for traj in &record.trajectories {
        let mut run = Vec::with_capacity(traj.steps.len());
        for step in &traj.steps {
            let v = encoder.encode(step);
            let target = clusters.iter().position(|c| c.centroid == v).or_else(|| {
                let mut best: Option<(usize, f64)> = None;
                for (id, c) in clusters.iter().enumerate() {
                    let sim = cosine(&v, &c.centroid);
                    if best.is_none_or(|(_, s)| sim > s) {
                        best = Some((id, sim));
                    }
                }
                best.filter(|&(_, s)| s > cfg.assignment_threshold)
                    .map(|(id, _)| id)
            });
            let id = match target {
                Some(id) => {
                    let c = &mut clusters[id];
                    c.count += 1;
                    let n = c.count as f64;
                    for (m, x) in c.centroid.iter_mut().zip(&v) {
                        *m += (x - *m) / n;
                    }
                    id
                }
                None => {
                    clusters.push(Cluster {
                        centroid: v,
                        count: 1,
                        name: node_name(step),
                        merged_into: None,
                    });
                    clusters.len() - 1
                }
            };
            run.push(id);
        }
        runs.push(run);
    }

    merge_clusters(&mut clusters, cfg.merge_threshold);

    let resolve = |mut id: usize| {
        while let Some(next) = clusters[id].merged_into {
            id = next;
        }
        id
    };
    let mut final_ids = vec![usize::MAX; clusters.len()];
    let mut nodes = Vec::new();
    for (id, c) in clusters.iter().enumerate() {
        if c.merged_into.is_none() {
            final_ids[id] = nodes.len();
            nodes.push(Node {
                id: nodes.len(),
                features: c.centroid.clone(),
                member_count: c.count,
                name: c.name.clone(),
            });
        }
    }
    let mut edges = EdgeCounter::default();
    for run in &runs {
        let mapped: Vec<usize> = run.iter().map(|&id| final_ids[resolve(id)]).collect();
        edges.add_run(&mapped);
    }
    SemanticFlowGraph {
        task_id: record.task_id.clone(),
        nodes,
        edges: edges.into_edges(),
        labels: None,
    }
}

fn merge_score(a: &Cluster, b: &Cluster, threshold: f64) -> Option<f64> {
    let sim = cosine(&a.centroid, &b.centroid);
    (sim > threshold || a.centroid == b.centroid).then_some(sim)
}

/// Greedy highest-similarity-first merging with a cached pair table. Ties go
/// to the lowest `(i, j)`; the merged cluster keeps the lower id.
fn merge_clusters(clusters: &mut [Cluster], threshold: f64) {
    let n = clusters.len();
    let mut score: Vec<Vec<Option<f64>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            score[i][j] = merge_score(&clusters[i], &clusters[j], threshold);
        }
    }
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in score.iter().enumerate() {
            if clusters[i].merged_into.is_some() {
                continue;
            }
            for (j, s) in row.iter().enumerate().skip(i + 1) {
                if let Some(s) = *s {
                    if clusters[j].merged_into.is_none() && best.is_none_or(|(_, _, b)| s > b) {
                        best = Some((i, j, s));
                    }
                }
            }
        }
        let Some((keep, gone, _)) = best else { break };
        let (ni, nj) = (clusters[keep].count as f64, clusters[gone].count as f64);
        let merged: Vec<f64> = clusters[keep]
            .centroid
            .iter()
            .zip(&clusters[gone].centroid)
            .map(|(a, b)| (a * ni + b * nj) / (ni + nj))
            .collect();
        clusters[keep].centroid = merged;
        clusters[keep].count += clusters[gone].count;
        clusters[gone].merged_into = Some(keep);
        for row in score.iter_mut() {
            row[gone] = None;
        }
        score[gone].iter_mut().for_each(|s| *s = None);
        for other in 0..n {
            if other == keep || clusters[other].merged_into.is_some() {
                continue;
            }
            let (i, j) = if other < keep {
                (other, keep)
            } else {
                (keep, other)
            };
            score[i][j] = merge_score(&clusters[i], &clusters[j], threshold);
        }
    }
}

pub const GRAPH_SET_FORMAT: &str = "sfg-graphs";
pub const GRAPH_SET_VERSION: u32 = 1;

/// On-disk graph cache: a JSON document with a format tag, a version, the
/// build config and the graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSet {
    pub format: String,
    pub version: u32,
    pub config: GraphConfig,
    pub graphs: Vec<SemanticFlowGraph>,
}

impl GraphSet {
    pub fn new(config: GraphConfig, graphs: Vec<SemanticFlowGraph>) -> Self {
        Self {
            format: GRAPH_SET_FORMAT.into(),
            version: GRAPH_SET_VERSION,
            config,
            graphs,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: GraphSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if set.format != GRAPH_SET_FORMAT {
            return Err(Error::Config(format!(
                "{}: not a graph set (format `{}`)",
                path.display(),
                set.format
            )));
        }
        if set.version != GRAPH_SET_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported graph set version {}",
                path.display(),
                set.version
            )));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{AgentKind, Trajectory, FINAL_ANSWER_TOOL};

    fn step(tool: &str, arg: &str) -> ReasoningStep {
        ReasoningStep::new(tool, vec![arg.to_string()], 10, 5)
    }

    fn record(runs: Vec<Vec<ReasoningStep>>) -> TaskRecord {
        let r = runs.len();
        TaskRecord {
            task_id: "g".into(),
            agent_kind: AgentKind::Voting,
            interaction_budget: 10,
            sample_size: r,
            trajectories: runs
                .into_iter()
                .enumerate()
                .map(|(i, steps)| Trajectory {
                    run_index: i,
                    model_id: "m".into(),
                    completed: true,
                    steps,
                    final_answer: None,
                })
                .collect(),
            ground_truth: GroundTruth::Answers(vec!["x".into()]),
        }
    }

    fn builder(mode: BuildMode, rec: &TaskRecord) -> GraphBuilder {
        let mut cfg = GraphConfig::new(ToolVocabulary::from_records([rec]));
        cfg.mode = mode;
        GraphBuilder::new(cfg).unwrap()
    }

    fn abc() -> Vec<ReasoningStep> {
        vec![step("a", "A.x"), step("b", "B.y"), step("c", "C.z")]
    }

    #[test]
    fn identical_runs_double_weights() {
        let rec = record(vec![abc(), abc()]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        assert_eq!(g.node_count(), 3);
        assert_eq!(
            g.edges,
            vec![
                Edge {
                    src: 0,
                    dst: 1,
                    weight: 2
                },
                Edge {
                    src: 1,
                    dst: 2,
                    weight: 2
                }
            ]
        );
        assert_eq!(g.total_members(), 6);
    }

    #[test]
    fn branching_runs() {
        let rec = record(vec![
            vec![step("a", "A.x"), step("b", "B.y")],
            vec![step("a", "A.x"), step("c", "C.z")],
        ]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_weight(0, 1), 1);
        assert_eq!(g.edge_weight(0, 2), 1);
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn single_step_graph() {
        let rec = record(vec![vec![step("a", "A.x")]]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        assert_eq!(g.node_count(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn no_edges_between_runs() {
        let rec = record(vec![vec![step("a", "A.x")], vec![step("b", "B.y")]]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn clustered_identical_steps_form_one_self_looping_node() {
        let same = || vec![step("a", "A.x"); 4];
        let rec = record(vec![same(), same()]);
        let g =
            builder(BuildMode::Clustered(ClusterConfig::default()), &rec).build_untruncated(&rec);
        assert_eq!(g.node_count(), 1);
        assert_eq!(
            g.edges,
            vec![Edge {
                src: 0,
                dst: 0,
                weight: 6
            }]
        );
        assert_eq!(g.nodes[0].member_count, 8);
    }

    /// Hand-computed three-vector case. v and v' have cosine 0.995, v'' is
    /// orthogonal to both; the first two share a cluster whose centroid is
    /// their mean.
    #[test]
    fn clustering_three_fixed_vectors() {
        let theta = 0.995f64.acos();
        let v = vec![1.0, 0.0, 0.0];
        let v1 = vec![theta.cos(), theta.sin(), 0.0];
        let v2 = vec![0.0, 0.0, 1.0];
        assert!((cosine(&v, &v1) - 0.995).abs() < 1e-12);
        let mut clusters: Vec<Cluster> = Vec::new();
        // Replays the assignment rule on raw vectors.
        for x in [&v, &v1, &v2] {
            let best = clusters
                .iter()
                .enumerate()
                .map(|(i, c)| (i, cosine(x, &c.centroid)))
                .fold(None::<(usize, f64)>, |b, (i, s)| {
                    if b.is_none_or(|(_, bs)| s > bs) {
                        Some((i, s))
                    } else {
                        b
                    }
                });
            match best.filter(|&(_, s)| s > 0.99) {
                Some((i, _)) => {
                    let c = &mut clusters[i];
                    c.count += 1;
                    let n = c.count as f64;
                    for (m, xi) in c.centroid.iter_mut().zip(x.iter()) {
                        *m += (xi - *m) / n;
                    }
                }
                None => clusters.push(Cluster {
                    centroid: x.clone(),
                    count: 1,
                    name: String::new(),
                    merged_into: None,
                }),
            }
        }
        merge_clusters(&mut clusters, 0.99);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].count, 2);
        let expected = [(1.0 + theta.cos()) / 2.0, theta.sin() / 2.0, 0.0];
        for (a, b) in clusters[0].centroid.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(clusters[1].centroid, v2);
    }

    #[test]
    fn orthogonal_steps_stay_apart() {
        let rec = record(vec![vec![step("a", ""), step("b", "")]]);
        let g =
            builder(BuildMode::Clustered(ClusterConfig::default()), &rec).build_untruncated(&rec);
        assert_eq!(g.node_count(), 2);
    }

    #[test]
    fn merge_pass_joins_close_centroids() {
        let mk = |c: Vec<f64>| Cluster {
            centroid: c,
            count: 1,
            name: String::new(),
            merged_into: None,
        };
        let mut clusters = vec![mk(vec![1.0, 0.0]), mk(vec![0.0, 1.0]), mk(vec![1.0, 0.01])];
        merge_clusters(&mut clusters, 0.99);
        assert_eq!(clusters[2].merged_into, Some(0));
        assert_eq!(clusters[0].count, 2);
        assert_eq!(clusters[0].centroid, vec![1.0, 0.005]);
        assert!(clusters[1].merged_into.is_none());
    }

    #[test]
    fn parallel_truncation() {
        let long: Vec<ReasoningStep> = (0..10).map(|i| step("a", &format!("A{i}"))).collect();
        let mut rec = record(vec![long.clone(); 10]);
        let full = rec.clone();
        let t = truncate_parallel(&rec, 5).unwrap();
        assert!(t
            .trajectories
            .iter()
            .all(|r| r.steps.len() == 5 && !r.completed));
        assert_eq!(t.total_steps(), 50);
        assert_eq!(truncate_parallel(&rec, 10).unwrap(), full);
        assert_eq!(truncate_parallel(&rec, 20).unwrap(), full);

        rec.trajectories[0].steps.truncate(3);
        let t = truncate_parallel(&rec, 5).unwrap();
        assert_eq!(t.trajectories[0], rec.trajectories[0]);
    }

    #[test]
    fn parallel_truncation_keeps_answer_inside_prefix() {
        let mut steps = vec![step("a", "A"), step(FINAL_ANSWER_TOOL, "X"), step("b", "B")];
        steps.truncate(3);
        let mut rec = record(vec![steps]);
        rec.trajectories[0].final_answer = Some(vec!["X".into()]);
        let t = truncate_parallel(&rec, 2).unwrap();
        assert_eq!(t.trajectories[0].final_answer, Some(vec!["X".into()]));
        let t = truncate_parallel(&rec, 1).unwrap();
        assert_eq!(t.trajectories[0].final_answer, None);
    }

    #[test]
    fn sequential_truncation() {
        let rec = record(vec![
            (0..11).map(|i| step("a", &format!("A{i}"))).collect();
            10
        ]);
        let t = truncate_sequential(&rec, 3).unwrap();
        assert_eq!(t.trajectories.len(), 3);
        assert!(t.total_steps() <= 33);
        assert_eq!(truncate_sequential(&rec, 10).unwrap(), rec);
        assert!(matches!(
            truncate_sequential(&rec, 11),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn truncation_spec_parsing() {
        assert_eq!(
            "parallel:5".parse::<TruncationSpec>().unwrap(),
            TruncationSpec::parallel(5)
        );
        assert_eq!(
            "sequential:2".parse::<TruncationSpec>().unwrap(),
            TruncationSpec::sequential(2)
        );
        assert_eq!(
            "none".parse::<TruncationSpec>().unwrap(),
            TruncationSpec::NONE
        );
        assert!("parallel:0".parse::<TruncationSpec>().is_err());
        assert!("diagonal:3".parse::<TruncationSpec>().is_err());
        assert_eq!(TruncationSpec::parallel(4).to_string(), "parallel:4");
    }

    #[test]
    fn adjacency_single_node() {
        let rec = record(vec![vec![step("a", "A")]]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        let (x, a) = g.to_adjacency(false);
        assert_eq!(a, Matrix::from_rows(&[vec![1.0]]));
        assert_eq!(x.shape(), (1, g.feature_dim()));
    }

    #[test]
    fn adjacency_two_nodes_both_directions() {
        let g = SemanticFlowGraph {
            task_id: "t".into(),
            nodes: (0..2)
                .map(|id| Node {
                    id,
                    features: vec![id as f64],
                    member_count: 1,
                    name: String::new(),
                })
                .collect(),
            edges: vec![
                Edge {
                    src: 0,
                    dst: 1,
                    weight: 1,
                },
                Edge {
                    src: 1,
                    dst: 0,
                    weight: 1,
                },
            ],
            labels: None,
        };
        let (_, a) = g.to_adjacency(false);
        // Ã = [[1,2],[2,1]], D̃ = diag(3,3)
        let expected = Matrix::from_rows(&[vec![1.0 / 3.0, 2.0 / 3.0], vec![2.0 / 3.0, 1.0 / 3.0]]);
        assert!(a.max_abs_diff(&expected) < 1e-15);
        let (_, b) = g.to_adjacency(true);
        assert!(b.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn adjacency_follows_node_permutation() {
        let rec = record(vec![
            abc(),
            vec![step("a", "A.x"), step("c", "C.z"), step("c", "C.z")],
        ]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        let perm = [2, 0, 1];
        let (_, a) = g.to_adjacency(false);
        let (_, pa) = g.permuted(&perm).to_adjacency(false);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[(i, j)], pa[(perm[i], perm[j])]);
            }
        }
    }

    #[test]
    fn graph_set_round_trip() {
        let rec = record(vec![abc()]);
        let b = builder(BuildMode::Exact, &rec);
        let g = b.build(&rec).unwrap();
        let set = GraphSet::new(b.config().clone(), vec![g]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        set.save(&path).unwrap();
        assert_eq!(GraphSet::load(&path).unwrap(), set);
    }

    #[test]
    fn dot_output_lists_nodes_and_weighted_edges() {
        let rec = record(vec![abc(), abc()]);
        let g = builder(BuildMode::Exact, &rec).build_untruncated(&rec);
        let dot = g.to_dot();
        assert!(dot.starts_with("digraph \"g\" {"));
        assert!(dot.contains("n0 -> n1 [label=\"2\"]"));
        assert!(dot.contains("a(A.x)"));
    }
}
