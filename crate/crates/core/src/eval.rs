//! Greedy decoding over every query of a world, with exact-match grading.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{generate_greedy, WeightSet};
use crate::world::{QueryInstance, StepVerdict, SynthWorld};

/// Generates answers for every fact and grades them.
pub fn run_queries(weights: &WeightSet<f32>, world: &SynthWorld) -> Result<Vec<QueryInstance>> {
    let max_new = world.max_new_tokens();
    world
        .facts
        .par_iter()
        .map(|fact| {
            let prompt = world.prompt(fact);
            let generated = match generate_greedy(weights, &prompt, max_new, &[world.specials.eos]) {
                Ok(g) => g,
                Err(Error::ContextOverflow { partial }) => partial,
                Err(e) => return Err(e),
            };
            Ok(QueryInstance::new(world, fact, generated))
        })
        .collect()
}

/// Fraction of instances with every answer correct.
pub fn accuracy(instances: &[QueryInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    instances.iter().filter(|i| i.correct).count() as f64 / instances.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub total: usize,
    pub all_correct: usize,
    pub accuracy: f64,
    /// Instances whose step `i` answer is correct, per step.
    pub step_correct: Vec<usize>,
}

pub fn summarize(instances: &[QueryInstance]) -> EvalSummary {
    let n_answers = instances.iter().map(|i| i.n_answers()).max().unwrap_or(0);
    let step_correct = (0..n_answers)
        .map(|s| instances.iter().filter(|i| i.verdicts.get(s) == Some(&StepVerdict::Correct)).count())
        .collect();
    EvalSummary {
        total: instances.len(),
        all_correct: instances.iter().filter(|i| i.correct).count(),
        accuracy: accuracy(instances),
        step_correct,
    }
}
