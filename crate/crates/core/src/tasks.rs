//! Synthetic task registry, prompt rendering and data splits.
//!
//! Every task maps inputs drawn from a 32-symbol alphabet to a single answer
//! symbol. Prompts are integer token sequences: symbols occupy ids `0..32`,
//! followed by structural markers and instruction tokens.
//!
//! Zero-shot queries carry a two-token instruction prefix (a family token and
//! a verb token) that names the task. During model training the prefix is
//! drawn at random, so the model learns to ignore it; the retriever, trained
//! separately, learns to read it.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHABET: u32 = 32;
pub const BOS: u32 = 32;
pub const ARROW: u32 = 33;
pub const SEP: u32 = 34;
pub const EQ: u32 = 35;
pub const COMMA: u32 = 36;
pub const ASK: u32 = 37;
pub const END: u32 = 38;
pub const FAMILY_BASE: u32 = 40;
pub const N_FAMILIES: u32 = 4;
pub const VERB_BASE: u32 = FAMILY_BASE + N_FAMILIES;
pub const VERBS_PER_TASK: usize = 2;
pub const N_VERBS: u32 = 20;
pub const VOCAB_SIZE: usize = (VERB_BASE + N_VERBS) as usize;
/// Longest rendered training sequence: BOS, prefix, 16 five-token demos,
/// a three-token query and the answer.
pub const MAX_SEQUENCE: usize = 1 + 2 + 16 * 5 + 3 + 1;
pub const DEFAULT_CONTEXT: usize = 96;
pub const MAX_TASKS: usize = (N_VERBS as usize) / VERBS_PER_TASK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Mapping,
    Arithmetic,
    Relational,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Mapping, Domain::Arithmetic, Domain::Relational];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Mapping => "mapping",
            Domain::Arithmetic => "arithmetic",
            Domain::Relational => "relational",
        }
    }
}

/// Input-to-answer function of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    Copy,
    Successor,
    Offset { shift: u32 },
    Permutation { table: Vec<u32> },
    Parity,
    PairMax,
}

impl Rule {
    pub fn arity(&self) -> usize {
        match self {
            Rule::PairMax => 2,
            _ => 1,
        }
    }

    pub fn apply(&self, input: &TaskInput) -> u32 {
        let x = input.tokens[0];
        match self {
            Rule::Copy => x,
            Rule::Successor => (x + 1) % ALPHABET,
            Rule::Offset { shift } => (x + shift) % ALPHABET,
            Rule::Permutation { table } => table[x as usize],
            Rule::Parity => x % 2,
            Rule::PairMax => x.max(input.tokens[1]),
        }
    }

    /// Answers for every unary input, or `None` for binary rules.
    fn table(&self) -> Option<Vec<u32>> {
        (self.arity() == 1).then(|| (0..ALPHABET).map(|x| self.apply(&TaskInput::unary(x))).collect())
    }
}

/// One task input: a single symbol or an ordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskInput {
    pub tokens: [u32; 2],
    pub len: u8,
}

impl TaskInput {
    pub fn unary(x: u32) -> Self {
        TaskInput { tokens: [x, 0], len: 1 }
    }

    pub fn pair(a: u32, b: u32) -> Self {
        TaskInput { tokens: [a, b], len: 2 }
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.tokens[..self.len as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub rule: Rule,
    pub domain: Domain,
    /// Library tasks contribute vectors; the rest are held out entirely.
    pub library: bool,
    pub family_token: u32,
    pub verb_tokens: [u32; VERBS_PER_TASK],
}

impl TaskSpec {
    pub fn arity(&self) -> usize {
        self.rule.arity()
    }

    pub fn answer(&self, input: &TaskInput) -> u32 {
        self.rule.apply(input)
    }

    /// All valid inputs in a fixed order.
    pub fn inputs(&self) -> Vec<TaskInput> {
        if self.arity() == 1 {
            (0..ALPHABET).map(TaskInput::unary).collect()
        } else {
            let mut out = Vec::with_capacity((ALPHABET * (ALPHABET - 1)) as usize);
            for a in 0..ALPHABET {
                for b in 0..ALPHABET {
                    if a != b {
                        out.push(TaskInput::pair(a, b));
                    }
                }
            }
            out
        }
    }

    /// Candidate answers used for restricted argmax; shared by every task.
    pub fn answer_alphabet(&self) -> Vec<u32> {
        (0..ALPHABET).collect()
    }

    pub fn instruction(&self, verb: usize) -> [u32; 2] {
        [self.family_token, self.verb_tokens[verb % VERBS_PER_TASK]]
    }
}

/// Builds `n_library` library tasks followed by `n_unseen` held-out tasks.
///
/// Library tasks cycle through copy, antonym (a fixed-point-free involution),
/// successor, constant offset, parity and pair-max. Held-out tasks alternate
/// between a fresh offset (same family as the arithmetic tasks) and a
/// shuffled random labelling with its own instruction family.
pub fn make_tasks(n_library: usize, n_unseen: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if n_library < 4 {
        return Err(Error::Config(format!("need at least 4 library tasks, got {n_library}")));
    }
    if n_unseen < 1 {
        return Err(Error::Config("need at least 1 unseen task".into()));
    }
    if n_library + n_unseen > MAX_TASKS {
        return Err(Error::Config(format!(
            "instruction alphabet supports at most {MAX_TASKS} distinct tasks, requested {}",
            n_library + n_unseen
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free_shifts: Vec<u32> = (2..ALPHABET - 1).collect();
    free_shifts.shuffle(&mut rng);

    let mut tasks: Vec<TaskSpec> = Vec::with_capacity(n_library + n_unseen);
    let mut tables: Vec<Vec<u32>> = Vec::new();
    let total = n_library + n_unseen;
    for id in 0..total {
        let library = id < n_library;
        let (name, domain, family) = if library {
            match id % 6 {
                0 => ("copy", Domain::Mapping, 0),
                1 => ("antonym", Domain::Mapping, 0),
                2 => ("successor", Domain::Arithmetic, 1),
                3 => ("offset", Domain::Arithmetic, 1),
                4 => ("parity", Domain::Relational, 2),
                _ => ("pair_max", Domain::Relational, 2),
            }
        } else if (id - n_library).is_multiple_of(2) {
            ("shifted", Domain::Arithmetic, 1)
        } else {
            ("shuffled", Domain::Mapping, 3)
        };
        // Extra library tasks beyond the six base rules become offsets or
        // permutations so that every rule stays distinct.
        let base_cycle = library && id >= 6;
        let kind = if base_cycle {
            if id % 2 == 0 {
                "offset"
            } else {
                "antonym"
            }
        } else {
            name
        };
        let rule = loop {
            let candidate = match kind {
                "copy" => Rule::Copy,
                "successor" => Rule::Successor,
                "parity" => Rule::Parity,
                "pair_max" => Rule::PairMax,
                "offset" | "shifted" => {
                    let shift = free_shifts
                        .pop()
                        .ok_or_else(|| Error::Config("ran out of distinct offsets".into()))?;
                    Rule::Offset { shift }
                }
                "antonym" => Rule::Permutation {
                    table: random_involution(&mut rng),
                },
                _ => {
                    let mut table: Vec<u32> = (0..ALPHABET).collect();
                    table.shuffle(&mut rng);
                    Rule::Permutation { table }
                }
            };
            match candidate.table() {
                Some(t) if tables.contains(&t) => continue,
                Some(t) => {
                    tables.push(t);
                    break candidate;
                }
                None if tasks.iter().any(|p| p.rule == candidate) => continue,
                None => break candidate,
            }
        };
        let verb0 = VERB_BASE + (id * VERBS_PER_TASK) as u32;
        tasks.push(TaskSpec {
            id,
            name: if base_cycle {
                format!("{kind}_{id}")
            } else {
                name.to_string()
            },
            rule,
            domain,
            library,
            family_token: FAMILY_BASE + family,
            verb_tokens: [verb0, verb0 + 1],
        });
    }
    Ok(tasks)
}

fn random_involution(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut order: Vec<u32> = (0..ALPHABET).collect();
    order.shuffle(rng);
    let mut table = vec![0u32; ALPHABET as usize];
    for pair in order.chunks_exact(2) {
        table[pair[0] as usize] = pair[1];
        table[pair[1] as usize] = pair[0];
    }
    table
}

/// Surface format of demonstrations and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `x -> y ;` (the library format)
    Arrow,
    /// `x = y ,`
    Equals,
    /// `? x y .` with the marker in front of the input
    Ask,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Arrow, Template::Equals, Template::Ask];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Template::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Argument(format!("template id {id} not in 0..3")))
    }

    pub fn push_demo(self, input: &TaskInput, answer: u32, out: &mut Vec<u32>) {
        match self {
            Template::Arrow => {
                out.extend_from_slice(input.as_slice());
                out.extend_from_slice(&[ARROW, answer, SEP]);
            }
            Template::Equals => {
                out.extend_from_slice(input.as_slice());
                out.extend_from_slice(&[EQ, answer, COMMA]);
            }
            Template::Ask => {
                out.push(ASK);
                out.extend_from_slice(input.as_slice());
                out.extend_from_slice(&[answer, END]);
            }
        }
    }

    pub fn push_query(self, input: &TaskInput, out: &mut Vec<u32>) {
        match self {
            Template::Arrow => {
                out.extend_from_slice(input.as_slice());
                out.push(ARROW);
            }
            Template::Equals => {
                out.extend_from_slice(input.as_slice());
                out.push(EQ);
            }
            Template::Ask => {
                out.push(ASK);
                out.extend_from_slice(input.as_slice());
            }
        }
    }

    pub fn demo_len(self, arity: usize) -> usize {
        arity + 3
    }

    pub fn query_len(self, arity: usize) -> usize {
        arity + 1
    }
}

/// A rendered prompt: demonstrations followed by a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task_id: usize,
    pub demos: Vec<(TaskInput, u32)>,
    pub query: TaskInput,
    pub template: Template,
    pub instruction: Option<[u32; 2]>,
    pub tokens: Vec<u32>,
}

impl PromptSpec {
    pub fn render(
        task_id: usize,
        demos: Vec<(TaskInput, u32)>,
        query: TaskInput,
        template: Template,
        instruction: Option<[u32; 2]>,
    ) -> Self {
        let mut tokens = vec![BOS];
        if let Some(ins) = instruction {
            tokens.extend_from_slice(&ins);
        }
        for (x, y) in &demos {
            template.push_demo(x, *y, &mut tokens);
        }
        template.push_query(&query, &mut tokens);
        PromptSpec {
            task_id,
            demos,
            query,
            template,
            instruction,
            tokens,
        }
    }

    pub fn n_demos(&self) -> usize {
        self.demos.len()
    }
}

/// A zero-shot test or validation query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuerySpec {
    pub task_id: usize,
    pub input: TaskInput,
    pub template: Template,
    pub verb: u8,
}

impl QuerySpec {
    pub fn prompt(&self, task: &TaskSpec) -> PromptSpec {
        PromptSpec::render(
            task.id,
            Vec::new(),
            self.input,
            self.template,
            Some(task.instruction(self.verb as usize)),
        )
    }

    pub fn answer(&self, task: &TaskSpec) -> u32 {
        task.answer(&self.input)
    }
}

/// Zero-shot rendering of `x_q` for `task` in the given template, using the
/// task's first instruction verb.
pub fn render_template(x_q: &TaskInput, task: &TaskSpec, template_id: usize) -> Result<Vec<u32>> {
    let template = Template::from_id(template_id)?;
    Ok(PromptSpec::render(task.id, Vec::new(), *x_q, template, Some(task.instruction(0))).tokens)
}

/// Samples `n` demonstrations and a distinct query from `pool`, without
/// replacement.
pub fn build_icl_prompt_from(
    task: &TaskSpec,
    pool: &[TaskInput],
    n: usize,
    template: Template,
    instruction: Option<[u32; 2]>,
    rng: &mut impl Rng,
) -> Result<PromptSpec> {
    if pool.len() < n + 1 {
        return Err(Error::Sampling(format!(
            "task {} has {} inputs, need {} for {n} demonstrations and a query",
            task.id,
            pool.len(),
            n + 1
        )));
    }
    let picks: Vec<TaskInput> = pool.choose_multiple(rng, n + 1).copied().collect();
    let query = picks[n];
    let demos = picks[..n].iter().map(|x| (*x, task.answer(x))).collect();
    Ok(PromptSpec::render(task.id, demos, query, template, instruction))
}

/// ICL prompt over the task's full input alphabet, seeded.
pub fn build_icl_prompt(task: &TaskSpec, n: usize, template_id: usize, seed: u64) -> Result<PromptSpec> {
    let template = Template::from_id(template_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_icl_prompt_from(task, &task.inputs(), n, template, None, &mut rng)
}

/// Prepends `n` demonstrations drawn from `pool` to a zero-shot query,
/// keeping the query's template and instruction.
pub fn icl_prompt_for_query(
    task: &TaskSpec,
    pool: &[TaskInput],
    query: &QuerySpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PromptSpec> {
    let candidates: Vec<TaskInput> = pool.iter().copied().filter(|x| *x != query.input).collect();
    if candidates.len() < n {
        return Err(Error::Sampling(format!(
            "task {} pool has {} usable inputs, need {n}",
            task.id,
            candidates.len()
        )));
    }
    let demos = candidates
        .choose_multiple(rng, n)
        .map(|x| (*x, task.answer(x)))
        .collect();
    Ok(PromptSpec::render(
        task.id,
        demos,
        query.input,
        query.template,
        Some(task.instruction(query.verb as usize)),
    ))
}

/// See [`TaskSuite::sample_prompting_pair`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptingPair {
    pub source: Vec<u32>,
    pub source_pos: usize,
    pub target: Vec<u32>,
    pub target_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_library: usize,
    pub n_unseen: usize,
    pub seed: u64,
    /// Distinct inputs per task reserved for validation queries.
    pub val_inputs: usize,
    /// Distinct inputs per task reserved for test queries.
    pub test_inputs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_library: 6,
            n_unseen: 2,
            seed: 0,
            val_inputs: 6,
            test_inputs: 6,
        }
    }
}

/// Disjoint example collections for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub task_id: usize,
    pub library_pool: Vec<TaskInput>,
    pub validation: Vec<QuerySpec>,
    pub test: Vec<QuerySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub tasks: Vec<TaskSplit>,
}

impl SplitSet {
    pub fn for_task(&self, id: usize) -> &TaskSplit {
        &self.tasks[id]
    }
}

/// Tasks plus splits, regenerable from [`SuiteConfig`] alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub tasks: Vec<TaskSpec>,
    pub splits: SplitSet,
}

impl TaskSuite {
    pub fn new(config: SuiteConfig) -> Result<Self> {
        let tasks = make_tasks(config.n_library, config.n_unseen, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SPLIT_STREAM);
        let mut splits = Vec::with_capacity(tasks.len());
        for task in &tasks {
            let mut inputs = task.inputs();
            let held = config.val_inputs + config.test_inputs;
            if inputs.len() < held + 17 {
                return Err(Error::Config(format!(
                    "task {} has {} inputs; {held} held out leaves fewer than 17 for prompts",
                    task.id,
                    inputs.len()
                )));
            }
            if config.val_inputs == 0 || config.test_inputs == 0 {
                return Err(Error::Config("validation and test inputs must be positive".into()));
            }
            inputs.shuffle(&mut rng);
            let val = &inputs[..config.val_inputs];
            let test = &inputs[config.val_inputs..held];
            let mut pool = inputs[held..].to_vec();
            pool.sort();
            splits.push(TaskSplit {
                task_id: task.id,
                library_pool: pool,
                validation: expand_queries(task.id, val),
                test: expand_queries(task.id, test),
            });
        }
        Ok(TaskSuite {
            config,
            tasks,
            splits: SplitSet { tasks: splits },
        })
    }

    pub fn library_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.library)
    }

    pub fn unseen_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| !t.library)
    }

    pub fn task(&self, id: usize) -> &TaskSpec {
        &self.tasks[id]
    }

    pub fn validation_queries<'a>(&'a self, tasks: impl IntoIterator<Item = &'a TaskSpec>) -> Vec<QuerySpec> {
        tasks
            .into_iter()
            .flat_map(|t| self.splits.for_task(t.id).validation.iter().copied())
            .collect()
    }

    /// Zero-shot queries over the demonstration-pool inputs, which never
    /// appear in validation or test queries.
    pub fn pool_queries<'a>(&'a self, tasks: impl IntoIterator<Item = &'a TaskSpec>) -> Vec<QuerySpec> {
        tasks.into_iter().flat_map(|t| expand_queries(t.id, &self.splits.for_task(t.id).library_pool)).collect()
    }

    pub fn test_queries<'a>(&'a self, tasks: impl IntoIterator<Item = &'a TaskSpec>) -> Vec<QuerySpec> {
        tasks
            .into_iter()
            .flat_map(|t| self.splits.for_task(t.id).test.iter().copied())
            .collect()
    }

    pub fn manifest(&self) -> SuiteManifest {
        SuiteManifest {
            schema_version: 1,
            alphabet_size: ALPHABET as usize,
            vocab_size: VOCAB_SIZE,
            config: self.config.clone(),
            tasks: self.tasks.clone(),
            split_sizes: self
                .splits
                .tasks
                .iter()
                .map(|s| SplitSizes {
                    task_id: s.task_id,
                    library_pool: s.library_pool.len(),
                    validation: s.validation.len(),
                    test: s.test.len(),
                })
                .collect(),
        }
    }

    /// One training sequence: a random library task, a uniform demonstration
    /// count in `0..=max_demos`, a uniform template, a random (uninformative)
    /// instruction prefix half of the time, and the query's answer appended.
    pub fn sample_training_sequence(&self, max_demos: usize, rng: &mut impl Rng) -> Vec<u32> {
        let task = self.random_library_task(rng);
        let n = rng.random_range(0..=max_demos);
        self.training_prompt(task, n, rng).0
    }

    /// Two training sequences of one library task for task-vector prompting:
    /// an ICL prompt with `1..=max_demos` demonstrations and a zero-shot
    /// query, each with its answer appended, plus the position of each
    /// query's final token.
    pub fn sample_prompting_pair(&self, max_demos: usize, rng: &mut impl Rng) -> PromptingPair {
        let task = self.random_library_task(rng);
        let n = rng.random_range(1..=max_demos.max(1));
        let (source, source_pos) = self.training_prompt(task, n, rng);
        let (target, target_pos) = self.training_prompt(task, 0, rng);
        PromptingPair {
            source,
            source_pos,
            target,
            target_pos,
        }
    }

    fn random_library_task(&self, rng: &mut impl Rng) -> &TaskSpec {
        let library: Vec<&TaskSpec> = self.library_tasks().collect();
        library[rng.random_range(0..library.len())]
    }

    fn training_prompt(&self, task: &TaskSpec, n: usize, rng: &mut impl Rng) -> (Vec<u32>, usize) {
        let template = Template::ALL[rng.random_range(0..3)];
        let instruction = rng.random_bool(0.5).then(|| {
            [
                FAMILY_BASE + rng.random_range(0..N_FAMILIES),
                VERB_BASE + rng.random_range(0..N_VERBS),
            ]
        });
        let prompt = build_icl_prompt_from(task, &task.inputs(), n, template, instruction, rng)
            .expect("full alphabet always covers max_demos + 1");
        let mut tokens = prompt.tokens;
        let query_end = tokens.len() - 1;
        tokens.push(task.answer(&prompt.query));
        (tokens, query_end)
    }

    /// Held-out "plain" sequences for the language-modelling probe: training
    /// sequences cut at a random point (at least two tokens long).
    pub fn lm_probe_corpus(&self, n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut seq = self.sample_training_sequence(16, &mut rng);
                let cut = rng.random_range(2..=seq.len());
                seq.truncate(cut);
                seq
            })
            .collect()
    }
}

// Keeps the split stream independent from task construction.
const SPLIT_STREAM: u64 = 0x5eed_5911;

fn expand_queries(task_id: usize, inputs: &[TaskInput]) -> Vec<QuerySpec> {
    let mut out = Vec::with_capacity(inputs.len() * 3 * VERBS_PER_TASK);
    for input in inputs {
        for template in Template::ALL {
            for verb in 0..VERBS_PER_TASK as u8 {
                out.push(QuerySpec {
                    task_id,
                    input: *input,
                    template,
                    verb,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub task_id: usize,
    pub library_pool: usize,
    pub validation: usize,
    pub test: usize,
}

/// JSON-serializable description of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub schema_version: u32,
    pub alphabet_size: usize,
    pub vocab_size: usize,
    pub config: SuiteConfig,
    pub tasks: Vec<TaskSpec>,
    pub split_sizes: Vec<SplitSizes>,
}

impl SuiteManifest {
    /// Rebuilds the suite and checks it matches the recorded tasks.
    pub fn regenerate(&self) -> Result<TaskSuite> {
        let suite = TaskSuite::new(self.config.clone())?;
        if suite.tasks != self.tasks {
            return Err(Error::Config("manifest tasks do not match regenerated suite".into()));
        }
        Ok(suite)
    }
}

/// Distinct rendered query strings shared between two query sets.
pub fn overlapping_queries(suite: &TaskSuite, a: &[QuerySpec], b: &[QuerySpec]) -> usize {
    let render = |q: &QuerySpec| q.prompt(suite.task(q.task_id)).tokens;
    let left: BTreeSet<Vec<u32>> = a.iter().map(render).collect();
    b.iter().map(render).filter(|t| left.contains(t)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_suite_shape() {
        let tasks = make_tasks(6, 2, 0).unwrap();
        assert_eq!(tasks.len(), 8);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.id, i);
            assert_eq!(t.library, i < 6);
        }
        assert_eq!(tasks, make_tasks(6, 2, 0).unwrap());
        let domains: BTreeSet<Domain> = tasks.iter().filter(|t| t.library).map(|t| t.domain).collect();
        assert_eq!(domains.len(), 3);
    }

    #[test]
    fn make_tasks_rejects_bad_sizes() {
        assert!(matches!(make_tasks(3, 1, 0), Err(Error::Config(_))));
        assert!(matches!(make_tasks(6, 0, 0), Err(Error::Config(_))));
        assert!(matches!(make_tasks(9, 2, 0), Err(Error::Config(_))));
        assert!(make_tasks(8, 2, 0).is_ok());
    }

    #[test]
    fn rules_are_pairwise_distinct() {
        for seed in 0..5 {
            let tasks = make_tasks(8, 2, seed).unwrap();
            let unary: Vec<Vec<u32>> = tasks.iter().filter_map(|t| t.rule.table()).collect();
            let set: BTreeSet<_> = unary.iter().cloned().collect();
            assert_eq!(set.len(), unary.len(), "seed {seed}");
        }
    }

    #[test]
    fn permutation_tasks_are_bijections() {
        let tasks = make_tasks(6, 2, 0).unwrap();
        let mut checked = 0;
        for t in tasks.iter().filter(|t| matches!(t.rule, Rule::Permutation { .. })) {
            let mut seen = vec![false; ALPHABET as usize];
            for x in 0..ALPHABET {
                let y = t.answer(&TaskInput::unary(x));
                assert!(!seen[y as usize], "{} maps two inputs to {y}", t.name);
                seen[y as usize] = true;
            }
            checked += 1;
        }
        assert_eq!(checked, 2);
    }

    #[test]
    fn icl_prompt_shape_and_labels() {
        let tasks = make_tasks(6, 2, 0).unwrap();
        for task in &tasks {
            let p = build_icl_prompt(task, 16, 0, 7).unwrap();
            assert_eq!(p.n_demos(), 16);
            assert!(p.demos.iter().all(|(x, _)| *x != p.query));
            assert!(p.demos.iter().all(|(x, y)| task.answer(x) == *y));
            let arity = task.arity();
            assert_eq!(p.tokens.len(), 1 + 16 * (arity + 3) + arity + 1);
            assert!(p.tokens.len() <= DEFAULT_CONTEXT);
        }
        let zero = build_icl_prompt(&tasks[0], 0, 0, 1).unwrap();
        assert_eq!(zero.tokens, vec![BOS, zero.query.tokens[0], ARROW]);
    }

    #[test]
    fn exhausted_pool_is_a_sampling_error() {
        let tasks = make_tasks(6, 2, 0).unwrap();
        let pool: Vec<TaskInput> = (0..5).map(TaskInput::unary).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_icl_prompt_from(&tasks[0], &pool, 5, Template::Arrow, None, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn templates_differ_but_share_answer() {
        let tasks = make_tasks(6, 2, 0).unwrap();
        let x = TaskInput::unary(7);
        let t0 = render_template(&x, &tasks[2], 0).unwrap();
        let t1 = render_template(&x, &tasks[2], 1).unwrap();
        let t2 = render_template(&x, &tasks[2], 2).unwrap();
        assert_ne!(t0, t1);
        assert_ne!(t1, t2);
        assert_eq!(Template::ALL.len(), 3);
        assert!(render_template(&x, &tasks[2], 3).is_err());
        for template in Template::ALL {
            let q = QuerySpec {
                task_id: 2,
                input: x,
                template,
                verb: 0,
            };
            assert_eq!(q.answer(&tasks[2]), 8);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let suite = TaskSuite::new(SuiteConfig::default()).unwrap();
        for split in &suite.splits.tasks {
            let val: BTreeSet<TaskInput> = split.validation.iter().map(|q| q.input).collect();
            let test: BTreeSet<TaskInput> = split.test.iter().map(|q| q.input).collect();
            let pool: BTreeSet<TaskInput> = split.library_pool.iter().copied().collect();
            assert!(val.is_disjoint(&test));
            assert!(val.is_disjoint(&pool));
            assert!(test.is_disjoint(&pool));
            assert!(split.validation.len() >= 20);
            assert!(pool.len() >= 17);
        }
        let val = suite.validation_queries(suite.tasks.iter());
        let test = suite.test_queries(suite.tasks.iter());
        assert_eq!(overlapping_queries(&suite, &val, &test), 0);
    }

    #[test]
    fn manifest_regenerates_suite() {
        let suite = TaskSuite::new(SuiteConfig::default()).unwrap();
        let json = serde_json::to_string(&suite.manifest()).unwrap();
        let back: SuiteManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.regenerate().unwrap(), suite);
    }

    #[test]
    fn training_sequences_fit_context() {
        let suite = TaskSuite::new(SuiteConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = suite.sample_training_sequence(16, &mut rng);
            assert!(s.len() <= MAX_SEQUENCE && s.len() <= DEFAULT_CONTEXT);
            assert!(s.iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
    }

    #[test]
    fn prompting_pairs_share_a_task() {
        let suite = TaskSuite::new(SuiteConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = suite.sample_prompting_pair(16, &mut rng);
            assert_eq!(p.source_pos + 2, p.source.len());
            assert_eq!(p.target_pos + 2, p.target.len());
            assert!(p.source.len() > p.target.len());
            assert!(p.source.len() <= MAX_SEQUENCE);
            // Both answers follow one library rule applied to their queries;
            // the query input ends at the final token or just before it.
            let matching = suite.library_tasks().filter(|t| {
                let ok = |seq: &[u32], pos: usize| {
                    let x = if seq[pos] < ALPHABET {
                        &seq[pos + 1 - t.arity()..=pos]
                    } else {
                        &seq[pos - t.arity()..pos]
                    };
                    let input = if t.arity() == 1 {
                        TaskInput::unary(x[0])
                    } else {
                        TaskInput::pair(x[0], x[1])
                    };
                    x.iter().all(|v| *v < ALPHABET) && t.answer(&input) == seq[pos + 1]
                };
                ok(&p.source, p.source_pos) && ok(&p.target, p.target_pos)
            });
            assert!(matching.count() >= 1);
        }
    }
}
