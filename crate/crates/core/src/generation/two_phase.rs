//! Two-phase evaluation: every item at a low recursion count, then each
//! failure once more from scratch at a higher count.

use rayon::prelude::*;

use super::{generate, GenerationConfig, SessionProvenance, StopReason};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchItem {
    pub id: String,
    pub prompt: Vec<u32>,
    pub expected: String,
}

/// Verdict of the answer-checking callback for one attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evaluation {
    pub answer: String,
    pub correct: bool,
}

#[derive(Clone, Debug)]
pub struct Attempt {
    pub recursions: usize,
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    pub answer: String,
    pub correct: bool,
    pub session: SessionProvenance,
}

#[derive(Clone, Debug)]
pub struct ItemResult {
    pub id: String,
    pub phase1: Option<Attempt>,
    pub phase2: Option<Attempt>,
    /// Generation or evaluator failure; the rest of the batch still runs.
    pub error: Option<String>,
}

impl ItemResult {
    pub fn retried(&self) -> bool {
        self.phase2.is_some()
    }

    /// The retry produced a different answer than the first attempt.
    pub fn changed(&self) -> bool {
        match (&self.phase1, &self.phase2) {
            (Some(a), Some(b)) => a.answer != b.answer,
            _ => false,
        }
    }

    pub fn correct(&self) -> bool {
        self.phase2
            .as_ref()
            .or(self.phase1.as_ref())
            .is_some_and(|a| a.correct)
    }
}

#[derive(Clone, Debug)]
pub struct TwoPhaseConfig {
    /// Template for both phases; `stream.recursions` is overridden.
    pub generation: GenerationConfig,
    pub phase1_recursions: usize,
    pub phase2_recursions: usize,
    pub workers: usize,
}

impl Default for TwoPhaseConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            phase1_recursions: 2,
            phase2_recursions: 4,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TwoPhaseSummary {
    pub items: usize,
    pub errors: usize,
    pub phase1_correct: usize,
    pub retried: usize,
    pub phase2_correct: usize,
    pub changed: usize,
}

impl TwoPhaseSummary {
    pub fn from_results(results: &[ItemResult]) -> Self {
        let mut s = Self {
            items: results.len(),
            ..Self::default()
        };
        for r in results {
            s.errors += r.error.is_some() as usize;
            s.phase1_correct += r.phase1.as_ref().is_some_and(|a| a.correct) as usize;
            s.retried += r.retried() as usize;
            s.phase2_correct += r.phase2.as_ref().is_some_and(|a| a.correct) as usize;
            s.changed += r.changed() as usize;
        }
        s
    }
}

/// Runs both phases. Results come back in item order whatever the worker
/// count; a failing item is recorded and does not stop the others.
pub fn run_two_phase<F>(
    model: &Model<'_>,
    items: &[BenchItem],
    evaluate: F,
    cfg: &TwoPhaseConfig,
) -> Result<Vec<ItemResult>>
where
    F: Fn(&BenchItem, &[u32]) -> std::result::Result<Evaluation, String> + Sync,
{
    cfg.generation.validate()?;
    let mut seen = std::collections::HashSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(Error::Config {
                field: "id".into(),
                reason: format!("duplicate item id `{}`", item.id),
            });
        }
    }
    let run = |item: &BenchItem| run_item(model, item, &evaluate, cfg);
    if cfg.workers <= 1 {
        return Ok(items.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Session(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(run).collect()))
}

fn run_item<F>(model: &Model<'_>, item: &BenchItem, evaluate: &F, cfg: &TwoPhaseConfig) -> ItemResult
where
    F: Fn(&BenchItem, &[u32]) -> std::result::Result<Evaluation, String>,
{
    let mut result = ItemResult {
        id: item.id.clone(),
        phase1: None,
        phase2: None,
        error: None,
    };
    match attempt(model, item, evaluate, cfg, cfg.phase1_recursions) {
        Ok(a) => result.phase1 = Some(a),
        Err(e) => {
            result.error = Some(e);
            return result;
        }
    }
    if result.phase1.as_ref().is_some_and(|a| !a.correct) {
        match attempt(model, item, evaluate, cfg, cfg.phase2_recursions) {
            Ok(a) => result.phase2 = Some(a),
            Err(e) => result.error = Some(e),
        }
    }
    result
}

/// One attempt in a brand-new session: nothing carries over between attempts.
fn attempt<F>(
    model: &Model<'_>,
    item: &BenchItem,
    evaluate: &F,
    cfg: &TwoPhaseConfig,
    recursions: usize,
) -> std::result::Result<Attempt, String>
where
    F: Fn(&BenchItem, &[u32]) -> std::result::Result<Evaluation, String>,
{
    let mut gen = cfg.generation.clone();
    gen.stream.recursions = recursions;
    let out = generate(model, &item.prompt, &gen).map_err(|e| e.to_string())?;
    if !out.session.started_fresh() {
        return Err("session did not start from empty caches".into());
    }
    let eval = evaluate(item, &out.tokens).map_err(|e| format!("evaluator: {e}"))?;
    Ok(Attempt {
        recursions,
        tokens: out.tokens,
        stop: out.stop,
        answer: eval.answer,
        correct: eval.correct,
        session: out.session,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::generation::Mode;
    use crate::weights::init_random_weights;

    fn items(n: usize) -> Vec<BenchItem> {
        (0..n)
            .map(|i| BenchItem {
                id: format!("q{i}"),
                prompt: vec![256, 48 + i as u32],
                expected: i.to_string(),
            })
            .collect()
    }

    fn cfg() -> TwoPhaseConfig {
        let mut c = TwoPhaseConfig::default();
        c.generation.max_new_tokens = 4;
        c.generation.mode = Mode::Sst;
        c
    }

    #[test]
    fn all_correct_never_retries() {
        let mc = ModelConfig::toy();
        let w = init_random_weights(&mc, 3);
        let m = Model::new(&mc, &w).unwrap();
        let ok = |_: &BenchItem, _: &[u32]| Ok(Evaluation { answer: "x".into(), correct: true });
        let r = run_two_phase(&m, &items(3), ok, &cfg()).unwrap();
        assert_eq!(TwoPhaseSummary::from_results(&r).retried, 0);
    }

    #[test]
    fn all_wrong_retries_each_once_fresh() {
        let mc = ModelConfig::toy();
        let w = init_random_weights(&mc, 3);
        let m = Model::new(&mc, &w).unwrap();
        let bad = |_: &BenchItem, t: &[u32]| {
            Ok(Evaluation {
                answer: format!("{t:?}"),
                correct: false,
            })
        };
        let r = run_two_phase(&m, &items(3), bad, &cfg()).unwrap();
        for item in &r {
            let (a, b) = (item.phase1.as_ref().unwrap(), item.phase2.as_ref().unwrap());
            assert_eq!((a.recursions, b.recursions), (2, 4));
            assert_ne!(a.session.session_id, b.session.session_id);
            assert!(b.session.started_fresh());
        }
    }

    #[test]
    fn evaluator_error_is_per_item() {
        let mc = ModelConfig::toy();
        let w = init_random_weights(&mc, 3);
        let m = Model::new(&mc, &w).unwrap();
        let picky = |it: &BenchItem, _: &[u32]| {
            if it.id == "q1" {
                Err("boom".to_string())
            } else {
                Ok(Evaluation { answer: "a".into(), correct: true })
            }
        };
        let r = run_two_phase(&m, &items(3), picky, &cfg()).unwrap();
        assert!(r[0].error.is_none() && r[2].error.is_none());
        assert!(r[1].error.as_deref().unwrap().contains("boom"));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mc = ModelConfig::toy();
        let w = init_random_weights(&mc, 3);
        let m = Model::new(&mc, &w).unwrap();
        let ev = |it: &BenchItem, t: &[u32]| {
            Ok(Evaluation {
                answer: format!("{t:?}"),
                correct: it.id == "q0",
            })
        };
        let mut c = cfg();
        let a = run_two_phase(&m, &items(4), ev, &c).unwrap();
        c.workers = 3;
        let b = run_two_phase(&m, &items(4), ev, &c).unwrap();
        let key = |r: &[ItemResult]| {
            r.iter()
                .map(|i| (i.id.clone(), i.phase1.as_ref().map(|a| a.tokens.clone()), i.changed()))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mc = ModelConfig::toy();
        let w = init_random_weights(&mc, 3);
        let m = Model::new(&mc, &w).unwrap();
        let mut it = items(2);
        it[1].id = "q0".into();
        let ok = |_: &BenchItem, _: &[u32]| Ok(Evaluation { answer: "x".into(), correct: true });
        assert!(run_two_phase(&m, &it, ok, &cfg()).is_err());
    }
}
