#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use sfg_core::trajectory::{
    AgentKind, GroundTruth, ReasoningStep, TaskRecord, Trajectory, FINAL_ANSWER_TOOL,
};

pub const TOOLS: [&str; 4] = ["open_file", "grep", "list_dir", "run_tests"];
/// Arguments whose lowercase tokens are pairwise distinct, so equal
/// embeddings imply equal steps.
pub const ARGS: [&str; 5] = ["alpha", "bravo_charlie", "delta", "echo.foxtrot", "golf"];
pub const ANSWERS: [&str; 4] = ["A", "B", "C", "D"];

/// Random valid record. Voting records end completed runs with an answer
/// step; patch-count records carry a random plausibility vector.
pub fn random_record<R: Rng>(rng: &mut R, id: usize, max_r: usize, max_n: usize) -> TaskRecord {
    let r = rng.gen_range(1..=max_r);
    let n = rng.gen_range(1..=max_n);
    let agent_kind = if rng.gen_bool(0.7) {
        AgentKind::Voting
    } else {
        AgentKind::PatchCount
    };
    let step = |rng: &mut R| {
        let tool = *TOOLS.choose(rng).unwrap();
        let args = if rng.gen_bool(0.2) {
            vec![]
        } else {
            vec![ARGS.choose(rng).unwrap().to_string()]
        };
        ReasoningStep::new(tool, args, rng.gen_range(0..2000), rng.gen_range(0..500))
    };
    let trajectories = (0..r)
        .map(|i| {
            let model_id = "m".to_string();
            match agent_kind {
                AgentKind::Voting => {
                    let completed = rng.gen_bool(0.8);
                    if completed {
                        let len = rng.gen_range(0..=n);
                        let mut steps: Vec<ReasoningStep> = (0..len).map(|_| step(rng)).collect();
                        let answer = ANSWERS.choose(rng).unwrap().to_string();
                        steps.push(ReasoningStep::new(
                            FINAL_ANSWER_TOOL,
                            vec![answer.clone()],
                            10,
                            3,
                        ));
                        Trajectory {
                            run_index: i,
                            model_id,
                            completed,
                            steps,
                            final_answer: Some(vec![answer]),
                        }
                    } else {
                        let len = rng.gen_range(0..=n + 1);
                        let steps = (0..len).map(|_| step(rng)).collect();
                        Trajectory {
                            run_index: i,
                            model_id,
                            completed,
                            steps,
                            final_answer: None,
                        }
                    }
                }
                AgentKind::PatchCount => {
                    let len = rng.gen_range(0..=n);
                    let steps: Vec<ReasoningStep> = (0..len).map(|_| step(rng)).collect();
                    let completed = !steps.is_empty() && rng.gen_bool(0.8);
                    Trajectory {
                        run_index: i,
                        model_id,
                        completed,
                        steps,
                        final_answer: None,
                    }
                }
            }
        })
        .collect();
    let ground_truth = match agent_kind {
        AgentKind::Voting => GroundTruth::Answers(vec![ANSWERS.choose(rng).unwrap().to_string()]),
        AgentKind::PatchCount => GroundTruth::Plausible {
            plausible: (0..r).map(|_| rng.gen_bool(0.4)).collect(),
        },
    };
    let record = TaskRecord {
        task_id: format!("t{id}"),
        agent_kind,
        interaction_budget: n,
        sample_size: r,
        trajectories,
        ground_truth,
    };
    record.validate().expect("generator emits valid records");
    record
}
