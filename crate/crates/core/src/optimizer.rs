//! Search over decoder configurations against a suite of tasks.

use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    compose_product, CfgPrefix, CompletionPredicate, Constraint, ConstraintSpec,
    ExpressionPredicate, Grammar,
};
use crate::decoders::{DecoderConfig, DecoderKind, Model};
use crate::error::DecodeError;
use crate::lm::{LanguageModel, TokenId, Vocabulary};
use crate::runner::{run, AggregationPolicy, RunConfig, TerminationPolicy};

/// Catalogue name of the per-task grammar constraint.
pub const SYNTAX: &str = "syntax";
/// Catalogue name of the per-task public predicate.
pub const UNIT_TESTS: &str = "unit_tests";

/// Retries before a random proposal may repeat an earlier one.
const MAX_REJECTIONS: usize = 100;

/// One task as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Whitespace-separated vocabulary tokens.
    #[serde(default)]
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grammar: Option<String>,
    /// Checked while decoding when the `unit_tests` constraint is enabled.
    pub public: ExpressionPredicate,
    /// Checked only when scoring.
    pub holdout: ExpressionPredicate,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub prompt: Vec<TokenId>,
    pub grammar: Option<Grammar>,
    pub public: ExpressionPredicate,
    pub holdout: ExpressionPredicate,
}

/// Validated tasks plus the named constraints trials may enable.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    tasks: Vec<Task>,
    catalogue: Vec<ConstraintSpec>,
}

impl TaskSuite {
    /// `catalogue` holds extra named constraints besides `syntax` and
    /// `unit_tests`.
    pub fn new(
        specs: &[TaskSpec],
        catalogue: Vec<ConstraintSpec>,
        vocab: &Vocabulary,
    ) -> Result<Self, DecodeError> {
        if specs.is_empty() {
            return Err(DecodeError::Config("task suite is empty".into()));
        }
        let mut names: HashSet<&str> = [SYNTAX, UNIT_TESTS].into();
        for spec in &catalogue {
            if !names.insert(spec.name()) {
                return Err(DecodeError::Config(format!(
                    "duplicate constraint name `{}`",
                    spec.name()
                )));
            }
            spec.build(vocab, None)?;
        }
        let tasks = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let name = spec.name.clone().unwrap_or_else(|| format!("task{i}"));
                let context = |m: String| DecodeError::Config(format!("{name}: {m}"));
                let prompt = vocab
                    .parse_tokens(&spec.prompt)
                    .map_err(|e| context(e.to_string()))?;
                let grammar = match &spec.grammar {
                    Some(text) => {
                        let g = Grammar::parse(text).map_err(|e| context(e.to_string()))?;
                        CfgPrefix::new(SYNTAX, g.clone(), vocab)
                            .map_err(|e| context(e.to_string()))?;
                        Some(g)
                    }
                    None => None,
                };
                Ok(Task {
                    name: name.clone(),
                    prompt,
                    grammar,
                    public: spec.public.clone(),
                    holdout: spec.holdout.clone(),
                })
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        Ok(Self { tasks, catalogue })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// All names a constraint subset may use.
    pub fn constraint_names(&self) -> Vec<String> {
        let mut names = vec![SYNTAX.to_string(), UNIT_TESTS.to_string()];
        names.extend(self.catalogue.iter().map(|c| c.name().to_string()));
        names
    }

    /// The decoding-time constraint for `task` under the named subset. A
    /// task without a grammar ignores `syntax`.
    pub fn build_constraint(
        &self,
        task: &Task,
        names: &[String],
        vocab: &Vocabulary,
    ) -> Result<Box<dyn Constraint>, DecodeError> {
        let mut members: Vec<Box<dyn Constraint>> = Vec::new();
        for name in names {
            match name.as_str() {
                SYNTAX => {
                    if let Some(g) = &task.grammar {
                        members.push(Box::new(CfgPrefix::new(SYNTAX, g.clone(), vocab)?));
                    }
                }
                UNIT_TESTS => members.push(Box::new(CompletionPredicate::new(
                    UNIT_TESTS,
                    task.public.clone(),
                    vocab,
                ))),
                other => {
                    let spec = self
                        .catalogue
                        .iter()
                        .find(|c| c.name() == other)
                        .ok_or_else(|| {
                            DecodeError::Config(format!("unknown constraint `{other}`"))
                        })?;
                    members.push(spec.build(vocab, None)?);
                }
            }
        }
        Ok(Box::new(compose_product(members)))
    }
}

/// Candidate constraint subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SubsetSpace {
    Explicit(Vec<Vec<String>>),
    /// Every subset of the listed names, by increasing bitmask.
    PowerSet(Vec<String>),
}

impl SubsetSpace {
    pub fn subsets(&self) -> Vec<Vec<String>> {
        match self {
            SubsetSpace::Explicit(list) => list.clone(),
            SubsetSpace::PowerSet(names) => (0..1usize << names.len())
                .map(|mask| {
                    names
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask >> i & 1 == 1)
                        .map(|(_, n)| n.clone())
                        .collect()
                })
                .collect(),
        }
    }
}

/// Ranges the optimizer searches over, plus the fixed per-task budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub kinds: Vec<DecoderKind>,
    pub k_min: usize,
    pub k_max: usize,
    /// Expansion sample range; absent means each decoder's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j_range: Option<(usize, usize)>,
    pub subsets: SubsetSpace,
    /// Soft wall-clock budget per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_ms: Option<u64>,
    /// LM query budget per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_expansions: Option<u64>,
}

impl SearchSpace {
    pub fn validate(&self, suite: &TaskSuite) -> Result<(), DecodeError> {
        let fail = |m: String| Err(DecodeError::Config(m));
        if self.kinds.is_empty() {
            return fail("search space has no decoder kinds".into());
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return fail(format!("invalid k range [{}, {}]", self.k_min, self.k_max));
        }
        if let Some((lo, hi)) = self.j_range {
            if lo == 0 || lo > hi {
                return fail(format!("invalid j range [{lo}, {hi}]"));
            }
        }
        let subsets = self.subsets.subsets();
        if subsets.is_empty() {
            return fail("search space has no constraint subsets".into());
        }
        let known = suite.constraint_names();
        for name in subsets.iter().flatten() {
            if !known.contains(name) {
                return fail(format!("unknown constraint `{name}` in search space"));
            }
        }
        if self.max_expansions == Some(0) {
            return fail("max_expansions must be positive".into());
        }
        Ok(())
    }

    fn ks(&self) -> Vec<usize> {
        (self.k_min..=self.k_max).collect()
    }

    fn js(&self) -> Vec<Option<usize>> {
        match self.j_range {
            Some((lo, hi)) => (lo..=hi).map(Some).collect(),
            None => vec![None],
        }
    }

    /// Number of distinct parameter instantiations.
    pub fn size(&self) -> usize {
        self.kinds.len() * self.ks().len() * self.js().len() * self.subsets.subsets().len()
    }

    /// Every point, in grid order: kinds, then k, then j, then subsets,
    /// each in declaration order with the last varying fastest.
    pub fn points(&self) -> Vec<Params> {
        let subsets = self.subsets.subsets();
        let mut out = Vec::with_capacity(self.size());
        for &decoder in &self.kinds {
            for k in self.ks() {
                for j in self.js() {
                    for constraints in &subsets {
                        out.push(Params {
                            decoder,
                            k,
                            j,
                            constraints: constraints.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

/// One instantiation of the search space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Params {
    pub decoder: DecoderKind,
    pub k: usize,
    pub j: Option<usize>,
    pub constraints: Vec<String>,
}

impl Params {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            j: self.j,
            ..DecoderConfig::new(self.decoder, self.k)
        }
    }
}

/// Picks the next point to evaluate, or `None` once nothing is left.
pub trait ProposalStrategy {
    fn propose(
        &mut self,
        space: &SearchSpace,
        history: &[Params],
        rng: &mut ChaCha8Rng,
    ) -> Option<Params>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grid,
    Random,
}

/// The first grid point not yet in the history.
#[derive(Debug, Default)]
pub struct GridSearch;

impl ProposalStrategy for GridSearch {
    fn propose(
        &mut self,
        space: &SearchSpace,
        history: &[Params],
        _rng: &mut ChaCha8Rng,
    ) -> Option<Params> {
        let seen: HashSet<&Params> = history.iter().collect();
        space.points().into_iter().find(|p| !seen.contains(p))
    }
}

/// Uniform draws, retrying up to 100 times to avoid earlier points.
#[derive(Debug, Default)]
pub struct RandomSearch;

impl ProposalStrategy for RandomSearch {
    fn propose(
        &mut self,
        space: &SearchSpace,
        history: &[Params],
        rng: &mut ChaCha8Rng,
    ) -> Option<Params> {
        let seen: HashSet<&Params> = history.iter().collect();
        let (ks, js, subsets) = (space.ks(), space.js(), space.subsets.subsets());
        let mut draw = || Params {
            decoder: *space.kinds.choose(rng).expect("validated nonempty"),
            k: *ks.choose(rng).expect("validated nonempty"),
            j: *js.choose(rng).expect("nonempty"),
            constraints: subsets.choose(rng).expect("validated nonempty").clone(),
        };
        let mut candidate = draw();
        for _ in 0..MAX_REJECTIONS {
            if !seen.contains(&candidate) {
                break;
            }
            candidate = draw();
        }
        Some(candidate)
    }
}

/// Proposes with the given strategy.
pub fn propose(
    space: &SearchSpace,
    history: &[Params],
    strategy: Strategy,
    rng: &mut ChaCha8Rng,
) -> Option<Params> {
    match strategy {
        Strategy::Grid => GridSearch.propose(space, history, rng),
        Strategy::Random => RandomSearch.propose(space, history, rng),
    }
}

/// What counts as solving a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The rank-1 sequence passes.
    #[default]
    TopOne,
    /// Any returned sequence passes.
    AnyReturned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub params: Params,
    /// Fraction of tasks solved.
    pub objective: f64,
    /// Wall-clock time per task; `None` unless timing was requested.
    pub mean_time_ms: Option<f64>,
    pub mean_expansions: f64,
    pub seed: u64,
}

/// Evaluation settings shared by all trials. The search space's budgets
/// override the matching termination limits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    pub termination: TerminationPolicy,
    pub aggregation: AggregationPolicy,
    pub objective: Objective,
    /// Record wall-clock time; off keeps trials reproducible byte for byte.
    pub timing: bool,
}

impl EvalOptions {
    fn run_config(&self, params: &Params, space: &SearchSpace) -> RunConfig {
        let mut termination = self.termination.clone();
        if space.time_limit_ms.is_some() {
            termination.time_limit_ms = space.time_limit_ms;
        }
        if space.max_expansions.is_some() {
            termination.max_expansions = space.max_expansions;
        }
        RunConfig {
            decoder: params.decoder_config(),
            termination,
            aggregation: self.aggregation.clone(),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial number `trial` under a master seed.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    splitmix(splitmix(master) ^ trial as u64)
}

/// Seed of the run for task number `task` within a trial.
pub fn task_seed(trial_seed: u64, task: usize) -> u64 {
    splitmix(trial_seed ^ splitmix(task as u64 ^ 0x5555_5555_5555_5555))
}

fn passes(task: &Task, generated: &[TokenId], vocab: &Vocabulary) -> bool {
    let Some((&last, content)) = generated.split_last() else {
        return false;
    };
    last == vocab.eos() && task.public.check(content, vocab) && task.holdout.check(content, vocab)
}

/// Runs every task once with `params`, seeding task `i` with
/// `task_seed(seed, i)`, and scores the results. A task that fails to run
/// counts as unsolved. `trial` only labels the result.
pub fn evaluate_config(
    lm: &dyn LanguageModel,
    params: &Params,
    space: &SearchSpace,
    suite: &TaskSuite,
    trial: usize,
    seed: u64,
    options: &EvalOptions,
) -> Trial {
    let vocab = lm.vocab();
    let config = options.run_config(params, space);
    let mut solved = 0usize;
    let mut expansions = 0u64;
    let start = Instant::now();
    for (i, task) in suite.tasks().iter().enumerate() {
        let seed = task_seed(seed, i);
        let outcome = suite
            .build_constraint(task, &params.constraints, vocab)
            .and_then(|constraint| {
                run(
                    &Model::new(lm, constraint.as_ref()),
                    &config,
                    &task.prompt,
                    seed,
                )
            });
        let Ok(result) = outcome else { continue };
        expansions += result.expansion_count;
        let candidates = match options.objective {
            Objective::TopOne => &result.sequences[..result.sequences.len().min(1)],
            Objective::AnyReturned => &result.sequences[..],
        };
        if candidates
            .iter()
            .any(|s| s.tier == 1 && passes(task, &s.tokens, vocab))
        {
            solved += 1;
        }
    }
    let n = suite.tasks().len() as f64;
    Trial {
        trial,
        params: params.clone(),
        objective: solved as f64 / n,
        mean_time_ms: options
            .timing
            .then(|| start.elapsed().as_secs_f64() * 1000.0 / n),
        mean_expansions: expansions as f64 / n,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub best: Trial,
    /// Every trial, by trial index.
    pub history: Vec<Trial>,
}

/// Whether `a` beats `b`: higher objective, then fewer mean expansions,
/// then the earlier trial.
fn better(a: &Trial, b: &Trial) -> bool {
    a.objective
        .total_cmp(&b.objective)
        .reverse()
        .then(a.mean_expansions.total_cmp(&b.mean_expansions))
        .then(a.trial.cmp(&b.trial))
        .is_lt()
}

/// Proposes up to `max_iters` points, evaluates them on up to `parallel`
/// threads and returns the best trial. Proposals never depend on results,
/// so the history is the same for any thread count.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    lm: &dyn LanguageModel,
    space: &SearchSpace,
    suite: &TaskSuite,
    strategy: Strategy,
    max_iters: usize,
    seed: u64,
    parallel: usize,
    options: &EvalOptions,
) -> Result<OptimizeResult, DecodeError> {
    if max_iters == 0 {
        return Err(DecodeError::Config("max_iters must be at least 1".into()));
    }
    space.validate(suite)?;
    options.termination.validate()?;
    options.aggregation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proposals: Vec<Params> = Vec::new();
    while proposals.len() < max_iters {
        match propose(space, &proposals, strategy, &mut rng) {
            Some(p) => proposals.push(p),
            None => break,
        }
    }
    let eval = |(i, p): (usize, &Params)| {
        evaluate_config(lm, p, space, suite, i, trial_seed(seed, i), options)
    };
    let history: Vec<Trial> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| DecodeError::Config(format!("thread pool: {e}")))?;
        pool.install(|| proposals.par_iter().enumerate().map(eval).collect())
    } else {
        proposals.iter().enumerate().map(eval).collect()
    };
    let best = history
        .iter()
        .fold(None::<&Trial>, |best, t| match best {
            Some(b) if !better(t, b) => Some(b),
            _ => Some(t),
        })
        .expect("at least one trial")
        .clone();
    Ok(OptimizeResult { best, history })
}

/// Distinct parameter points in a history.
pub fn distinct_points(history: &[Trial]) -> BTreeSet<Params> {
    history.iter().map(|t| t.params.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(kinds: Vec<DecoderKind>, k_max: usize) -> SearchSpace {
        SearchSpace {
            kinds,
            k_min: 1,
            k_max,
            j_range: None,
            subsets: SubsetSpace::Explicit(vec![vec![]]),
            time_limit_ms: None,
            max_expansions: None,
        }
    }

    #[test]
    fn grid_is_exhaustive_then_stops() {
        let s = space(vec![DecoderKind::BeamSearch, DecoderKind::Sampling], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut history = Vec::new();
        while let Some(p) = propose(&s, &history, Strategy::Grid, &mut rng) {
            history.push(p);
        }
        assert_eq!(history.len(), 4);
        assert_eq!(history.iter().collect::<HashSet<_>>().len(), 4);
        assert_eq!(history[0].decoder, DecoderKind::BeamSearch);
        assert_eq!(history[1].k, 2);
        assert!(propose(&s, &history, Strategy::Grid, &mut rng).is_none());
    }

    #[test]
    fn random_is_seeded() {
        let s = space(DecoderKind::ALL.to_vec(), 4);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = Vec::new();
            for _ in 0..10 {
                let p = propose(&s, &h, Strategy::Random, &mut rng).unwrap();
                h.push(p);
            }
            h
        };
        assert_eq!(draw(3), draw(3));
        assert_eq!(draw(3).iter().collect::<HashSet<_>>().len(), 10);
    }

    #[test]
    fn power_set_order() {
        let s = SubsetSpace::PowerSet(vec!["a".into(), "b".into()]);
        let expected: Vec<Vec<String>> = vec![
            vec![],
            vec!["a".into()],
            vec!["b".into()],
            vec!["a".into(), "b".into()],
        ];
        assert_eq!(s.subsets(), expected);
    }

    #[test]
    fn seeds_differ_across_trials_and_tasks() {
        let seeds: HashSet<u64> = (0..4)
            .flat_map(|t| (0..4).map(move |k| task_seed(trial_seed(7, t), k)))
            .collect();
        assert_eq!(seeds.len(), 16);
    }
}
