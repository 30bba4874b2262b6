//! Synthetic trajectory logs with a plantable failure signal.
//!
//! Successful tasks explore with motif A and converge on the ground truth.
//! With probability `signal_strength` a failing task instead follows motif B
//! (keyword searches that loop) and its runs disagree. Otherwise a failing
//! task is generated exactly like a successful one except that the majority
//! answer is wrong, so at `signal_strength = 0` the graphs carry no label
//! information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::stable_hash;
use crate::error::{Error, Result};
use crate::hotswap::PricingTable;
use crate::trajectory::{
    AgentKind, GroundTruth, ReasoningStep, TaskRecord, Trajectory, FINAL_ANSWER_TOOL,
};

pub const SOURCE_MODEL: &str = "source-small";
pub const TARGET_MODEL: &str = "target-large";

const TOOLS: [&str; 6] = [
    "get_class_list",
    "get_method_list",
    "get_code_snippet",
    "get_comments",
    "search_string",
    "run_tests",
];

const SYLLABLES: [&str; 16] = [
    "par", "ser", "tok", "en", "buf", "fer", "map", "node", "tree", "walk", "str", "ing", "lex",
    "io", "cache", "util",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tasks: usize,
    pub r: usize,
    pub n: usize,
    pub seed: u64,
    pub signal_strength: f64,
    pub failure_rate: f64,
    /// Fraction of failing tasks the target model gets right.
    pub flip_rate: f64,
    pub agent_kind: AgentKind,
    /// Step after whose predecessor continuations start; `None` emits none.
    pub continuation_k: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tasks: 500,
            r: 10,
            n: 10,
            seed: 7,
            signal_strength: 1.0,
            failure_rate: 0.4,
            flip_rate: 0.6,
            agent_kind: AgentKind::Voting,
            continuation_k: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.r == 0 || self.n < 3 {
            return Err(Error::Config(
                "synth needs tasks ≥ 1, r ≥ 1 and n ≥ 3".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config("signal strength must be in [0, 1]".into()));
        }
        if !(self.failure_rate > 0.0 && self.failure_rate < 1.0) {
            return Err(Error::Config("failure rate must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::Config("flip rate must be in [0, 1]".into()));
        }
        if let Some(k) = self.continuation_k {
            if k == 0 || k > self.n {
                return Err(Error::Config(format!(
                    "continuation k = {k} outside 1..={}",
                    self.n
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLogs {
    pub source: Vec<TaskRecord>,
    pub target: Vec<TaskRecord>,
    pub continuations: Option<Vec<TaskRecord>>,
}

/// Prices for the two synthetic models, per million tokens.
pub fn default_pricing() -> PricingTable {
    PricingTable::new()
        .with(SOURCE_MODEL, 0.2, 0.2)
        .with(TARGET_MODEL, 2.5, 10.0)
}

fn rng_for(seed: u64, stream: &str, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(format!("{stream}/{task}").as_bytes(), seed))
}

/// Per-task names the tools are called with.
struct Pool {
    classes: Vec<String>,
    methods: Vec<String>,
    keywords: Vec<String>,
    answers: Vec<String>,
}

fn word(rng: &mut ChaCha8Rng, parts: usize) -> String {
    (0..parts)
        .map(|_| *SYLLABLES.choose(rng).expect("nonempty"))
        .collect()
}

impl Pool {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let classes: Vec<String> = (0..4)
            .map(|_| format!("org.app.{}", capitalize(&word(rng, 2))))
            .collect();
        let methods = (0..6)
            .map(|_| {
                format!(
                    "{}.{}",
                    classes.choose(rng).expect("nonempty"),
                    word(rng, 2)
                )
            })
            .collect();
        let keywords = (0..4).map(|_| word(rng, 1)).collect();
        let answers = (0..6)
            .map(|i| format!("{}#{}", classes[i % classes.len()], word(rng, 3)))
            .collect();
        Self {
            classes,
            methods,
            keywords,
            answers,
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Motif {
    Explore,
    Loop,
}

struct StepMaker<'a> {
    pool: &'a Pool,
    model_scale: u64,
}

impl StepMaker<'_> {
    fn tokens(&self, rng: &mut ChaCha8Rng, position: usize) -> (u64, u64) {
        let input = 600 + 350 * position as u64 + rng.gen_range(0..200);
        let output = rng.gen_range(40..160) * self.model_scale;
        (input, output)
    }

    fn tool_step(&self, rng: &mut ChaCha8Rng, tool: &str, position: usize) -> ReasoningStep {
        let p = self.pool;
        let args = match tool {
            "get_class_list" => vec![],
            "get_method_list" => vec![p.classes.choose(rng).expect("nonempty").clone()],
            "get_code_snippet" | "get_comments" => {
                vec![p.methods.choose(rng).expect("nonempty").clone()]
            }
            "search_string" => vec![p.keywords.choose(rng).expect("nonempty").clone()],
            _ => vec![p.classes.choose(rng).expect("nonempty").clone()],
        };
        let (i, o) = self.tokens(rng, position);
        ReasoningStep::new(tool, args, i, o)
    }

    /// `len` exploration steps, noisy.
    fn explore(
        &self,
        rng: &mut ChaCha8Rng,
        motif: Motif,
        len: usize,
        offset: usize,
    ) -> Vec<ReasoningStep> {
        const A: [&str; 4] = [
            "get_class_list",
            "get_method_list",
            "get_code_snippet",
            "get_comments",
        ];
        const B: [&str; 3] = ["search_string", "search_string", "get_comments"];
        (0..len)
            .map(|s| {
                let position = offset + s;
                if rng.gen_bool(0.03) {
                    let (i, o) = self.tokens(rng, position);
                    return ReasoningStep::abnormal(vec!["malformed call".into()], i, o);
                }
                let tool = if rng.gen_bool(0.15) {
                    *TOOLS[..5].choose(rng).expect("nonempty")
                } else {
                    match motif {
                        Motif::Explore => A[position.min(A.len() - 1)],
                        Motif::Loop => B[position % B.len()],
                    }
                };
                self.tool_step(rng, tool, position)
            })
            .collect()
    }

    fn answer_step(&self, rng: &mut ChaCha8Rng, answer: &str, position: usize) -> ReasoningStep {
        let (i, o) = self.tokens(rng, position);
        ReasoningStep::new(FINAL_ANSWER_TOOL, vec![answer.to_string()], i, o)
    }
}

/// Answer per run: `Some` for completed runs.
fn vote_plan(
    rng: &mut ChaCha8Rng,
    r: usize,
    majority: &str,
    agree: usize,
    others: &[String],
) -> Vec<Option<String>> {
    let mut plan: Vec<Option<String>> = (0..r)
        .map(|i| {
            if i < agree {
                Some(majority.to_string())
            } else if rng.gen_bool(0.1) {
                None
            } else {
                Some(others.choose(rng).expect("nonempty").clone())
            }
        })
        .collect();
    plan.shuffle(rng);
    plan
}

#[derive(Clone, Copy)]
struct TaskShape {
    failing: bool,
    signal: bool,
}

struct RunSpec<'a> {
    agent: AgentKind,
    n: usize,
    model: &'a str,
    motif: Motif,
    short: bool,
}

fn make_run(
    rng: &mut ChaCha8Rng,
    maker: &StepMaker<'_>,
    spec: &RunSpec<'_>,
    run: usize,
    answer: Option<&str>,
) -> Trajectory {
    let n = spec.n;
    let explore_len = match (spec.motif, spec.short) {
        (_, true) => rng.gen_range(1..=(n / 2).max(1)),
        (Motif::Explore, false) => rng.gen_range(3..=(n / 2 + 1).min(n)),
        (Motif::Loop, false) => rng.gen_range((n / 2 + 1).min(n)..=n),
    };
    let completed = answer.is_some() || spec.agent == AgentKind::PatchCount;
    let mut steps;
    let final_answer;
    match (spec.agent, answer) {
        (AgentKind::Voting, Some(a)) => {
            steps = maker.explore(rng, spec.motif, explore_len, 0);
            steps.push(maker.answer_step(rng, a, explore_len));
            final_answer = Some(vec![a.to_string()]);
        }
        (AgentKind::Voting, None) => {
            steps = maker.explore(rng, spec.motif, n, 0);
            final_answer = None;
        }
        (AgentKind::PatchCount, _) => {
            steps = maker.explore(rng, spec.motif, explore_len.min(n - 1), 0);
            let position = steps.len();
            steps.push(maker.tool_step(rng, "run_tests", position));
            final_answer = None;
        }
    }
    Trajectory {
        run_index: run,
        model_id: spec.model.to_string(),
        completed,
        steps,
        final_answer,
    }
}

fn truth_and_wrong(pool: &Pool) -> (&str, Vec<String>) {
    (&pool.answers[0], pool.answers[1..].to_vec())
}

/// Source record for one task.
fn source_task(
    cfg: &SynthConfig,
    index: usize,
    shape: TaskShape,
    pool: &Pool,
    rng: &mut ChaCha8Rng,
) -> TaskRecord {
    let maker = StepMaker {
        pool,
        model_scale: 1,
    };
    let motif = if shape.signal {
        Motif::Loop
    } else {
        Motif::Explore
    };
    let spec = RunSpec {
        agent: cfg.agent_kind,
        n: cfg.n,
        model: SOURCE_MODEL,
        motif,
        short: false,
    };
    let (truth, wrong) = truth_and_wrong(pool);
    let r = cfg.r;
    let (trajectories, ground_truth) = match cfg.agent_kind {
        AgentKind::Voting => {
            let plan = if shape.signal {
                // no clear majority, never the truth
                let agree = (r / 3).max(1);
                vote_plan(rng, r, &wrong[0], agree, &wrong[1..])
            } else {
                let agree = rng.gen_range(r / 2 + 1..=r);
                let majority = if shape.failing { &wrong[0] } else { truth };
                let others: Vec<String> = if shape.failing {
                    wrong[1..].to_vec()
                } else {
                    wrong.clone()
                };
                vote_plan(rng, r, majority, agree, &others)
            };
            let runs = plan
                .iter()
                .enumerate()
                .map(|(i, a)| make_run(rng, &maker, &spec, i, a.as_deref()))
                .collect();
            (runs, GroundTruth::Answers(vec![truth.to_string()]))
        }
        AgentKind::PatchCount => {
            let runs = (0..r)
                .map(|i| make_run(rng, &maker, &spec, i, None))
                .collect();
            (
                runs,
                GroundTruth::Plausible {
                    plausible: plausible_plan(rng, r, shape.failing),
                },
            )
        }
    };
    TaskRecord {
        task_id: task_id(index),
        agent_kind: cfg.agent_kind,
        interaction_budget: cfg.n,
        sample_size: r,
        trajectories,
        ground_truth,
    }
}

fn plausible_plan(rng: &mut ChaCha8Rng, r: usize, failing: bool) -> Vec<bool> {
    let count = if failing { 0 } else { rng.gen_range(1..=r) };
    let mut p: Vec<bool> = (0..r).map(|i| i < count).collect();
    p.shuffle(rng);
    p
}

pub fn task_id(index: usize) -> String {
    format!("task-{index:05}")
}

/// Target-model record: right on successful tasks and on a `flip_rate`
/// share of failing ones.
fn target_task(
    cfg: &SynthConfig,
    index: usize,
    solved: bool,
    pool: &Pool,
    rng: &mut ChaCha8Rng,
    short: bool,
) -> TaskRecord {
    let maker = StepMaker {
        pool,
        model_scale: 2,
    };
    let spec = RunSpec {
        agent: cfg.agent_kind,
        n: cfg.n,
        model: TARGET_MODEL,
        motif: Motif::Explore,
        short,
    };
    let (truth, wrong) = truth_and_wrong(pool);
    let r = cfg.r;
    let (trajectories, ground_truth) = match cfg.agent_kind {
        AgentKind::Voting => {
            let agree = rng.gen_range(r / 2 + 1..=r);
            let majority = if solved { truth } else { &wrong[0] };
            let plan = vote_plan(rng, r, majority, agree, &wrong[1..]);
            let runs = plan
                .iter()
                .enumerate()
                .map(|(i, a)| make_run(rng, &maker, &spec, i, a.as_deref()))
                .collect();
            (runs, GroundTruth::Answers(vec![truth.to_string()]))
        }
        AgentKind::PatchCount => {
            let runs = (0..r)
                .map(|i| make_run(rng, &maker, &spec, i, None))
                .collect();
            (
                runs,
                GroundTruth::Plausible {
                    plausible: plausible_plan(rng, r, !solved),
                },
            )
        }
    };
    TaskRecord {
        task_id: task_id(index),
        agent_kind: cfg.agent_kind,
        interaction_budget: cfg.n,
        sample_size: r,
        trajectories,
        ground_truth,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthLogs> {
    cfg.validate()?;
    let mut source = Vec::with_capacity(cfg.tasks);
    let mut target = Vec::with_capacity(cfg.tasks);
    let mut continuations = cfg.continuation_k.map(|_| Vec::with_capacity(cfg.tasks));
    for index in 0..cfg.tasks {
        let mut rng = rng_for(cfg.seed, "task", index);
        let pool = Pool::new(&mut rng);
        let failing = rng.gen_bool(cfg.failure_rate);
        let signal = failing && rng.gen_bool(cfg.signal_strength);
        let solved_by_target = !failing || rng.gen_bool(cfg.flip_rate);

        let mut src_rng = rng_for(cfg.seed, "source", index);
        source.push(source_task(
            cfg,
            index,
            TaskShape { failing, signal },
            &pool,
            &mut src_rng,
        ));
        let mut tgt_rng = rng_for(cfg.seed, "target", index);
        target.push(target_task(
            cfg,
            index,
            solved_by_target,
            &pool,
            &mut tgt_rng,
            false,
        ));
        if let Some(conts) = continuations.as_mut() {
            let mut cont_rng = rng_for(cfg.seed, "continuation", index);
            conts.push(target_task(
                cfg,
                index,
                solved_by_target,
                &pool,
                &mut cont_rng,
                true,
            ));
        }
    }
    Ok(SynthLogs {
        source,
        target,
        continuations,
    })
}
