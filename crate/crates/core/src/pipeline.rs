//! Dialogue ingestion, pool sampling and the tracking loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, EvalReport, TurnTrace};
use crate::lm::{self, CompletionBackend, ScriptedBackend, DEFAULT_MAX_COMPLETION_UNITS};
use crate::ontology::Ontology;
use crate::prompt::{
    build_prompt, completion_head, render_context_within, ExemplarOrder, PromptError,
    PromptExample, PromptFormat, PromptSpec, Representation, TurnContext, DEFAULT_BUDGET,
};
use crate::retrieval::{
    bm25_query, knn, oracle_retrieve, random_retrieve, Bm25Index, Embedder, ExemplarPool,
    ExemplarRecord, HashingEmbedder, RetrievalError, MAX_RETRIEVER_UNITS,
};
use crate::sql::{
    parse_completion, parse_traditional, serialize_change, serialize_traditional,
    MultiDomainStyle, SqlError,
};
use crate::state::{DialogueState, SlotName, StateChange};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dialogue {dialogue} turn {turn}: unknown slot `{slot}`")]
    UnknownSlot {
        dialogue: String,
        turn: usize,
        slot: String,
    },
    #[error("dialogue {dialogue} turn {turn}: state is not reproduced by its changes")]
    Accumulation { dialogue: String, turn: usize },
    #[error("no dialogues to sample from")]
    EmptyInput,
    #[error("the exemplar pool is empty")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub system: String,
    pub user: String,
    pub gold_state: DialogueState,
}

/// A dialogue with gold states and the per-turn changes between them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueRecord {
    pub id: String,
    pub turns: Vec<Turn>,
    pub gold_changes: Vec<StateChange>,
}

impl DialogueRecord {
    /// Derives gold changes and checks that folding them reproduces every state.
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self, PipelineError> {
        let id = id.into();
        let mut prev = DialogueState::new();
        let mut gold_changes = Vec::with_capacity(turns.len());
        for (t, turn) in turns.iter().enumerate() {
            let change = prev.diff(&turn.gold_state);
            let rebuilt = prev.apply(&change);
            if rebuilt != turn.gold_state {
                return Err(PipelineError::Accumulation { dialogue: id, turn: t });
            }
            gold_changes.push(change);
            prev = rebuilt;
        }
        Ok(Self {
            id,
            turns,
            gold_changes,
        })
    }

    pub fn gold_prev_state(&self, turn: usize) -> DialogueState {
        if turn == 0 {
            DialogueState::new()
        } else {
            self.turns[turn - 1].gold_state.clone()
        }
    }

    /// Context for `turn` given the state it should be conditioned on.
    pub fn turn_context(
        &self,
        turn: usize,
        prev_state: DialogueState,
        representation: Representation,
    ) -> TurnContext {
        let t = &self.turns[turn];
        TurnContext {
            prev_state,
            system_utt: t.system.clone(),
            user_utt: t.user.clone(),
            representation,
            history: self.turns[..turn]
                .iter()
                .map(|t| (t.system.clone(), t.user.clone()))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WireTurn {
    #[serde(default)]
    system: String,
    user: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct WireDialogue {
    id: String,
    turns: Vec<WireTurn>,
}

fn squeeze(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_dialogue(raw: WireDialogue, ont: &Ontology) -> Result<DialogueRecord, PipelineError> {
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (t, wt) in raw.turns.into_iter().enumerate() {
        let mut state = DialogueState::new();
        for (key, value) in wt.state {
            let unknown = || PipelineError::UnknownSlot {
                dialogue: raw.id.clone(),
                turn: t,
                slot: key.clone(),
            };
            let slot = SlotName::parse(&key).map_err(|_| unknown())?;
            if !ont.contains(&slot) {
                return Err(unknown());
            }
            state.insert(slot, &value);
        }
        turns.push(Turn {
            system: squeeze(&wt.system),
            user: squeeze(&wt.user),
            gold_state: state,
        });
    }
    DialogueRecord::new(raw.id, turns)
}

/// Reads line-delimited `{id, turns:[{system, user, state}]}` records.
pub fn load_dialogues(path: &Path, ont: &Ontology) -> Result<Vec<DialogueRecord>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: WireDialogue = serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(parse_dialogue(raw, ont)?);
    }
    Ok(out)
}

/// Writes dialogues in the same line format `load_dialogues` reads.
pub fn save_dialogues(dialogues: &[DialogueRecord], path: &Path) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for d in dialogues {
        let wire = WireDialogue {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| WireTurn {
                    system: t.system.clone(),
                    user: t.user.clone(),
                    state: t.gold_state.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                })
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&wire).expect("dialogue serializes")).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Embedding,
    Bm25,
    Random,
    Oracle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Condition on the model's own accumulated state.
    #[default]
    PredictedPrevState,
    /// Condition on the gold previous state.
    GoldPrevState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pool_fraction: f64,
    pub seed: u64,
    pub k_exemplars: usize,
    pub retriever_kind: RetrieverKind,
    pub representation: Representation,
    pub format: PromptFormat,
    pub conditioning: Conditioning,
    pub multi_domain_style: MultiDomainStyle,
    pub budget: usize,
    pub exemplar_order: ExemplarOrder,
    pub parallelism: usize,
    pub max_completion_units: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pool_fraction: 0.05,
            seed: 0,
            k_exemplars: 10,
            retriever_kind: RetrieverKind::Embedding,
            representation: Representation::PrevStatePlusTurn,
            format: PromptFormat::Sql,
            conditioning: Conditioning::PredictedPrevState,
            multi_domain_style: MultiDomainStyle::PerDomainStatements,
            budget: DEFAULT_BUDGET,
            exemplar_order: ExemplarOrder::MostSimilarLast,
            parallelism: 4,
            max_completion_units: DEFAULT_MAX_COMPLETION_UNITS,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(PipelineError::Config(format!(
                "pool_fraction {} is outside (0, 1]",
                self.pool_fraction
            )));
        }
        if self.budget == 0 {
            return Err(PipelineError::Config("budget must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be positive".into()));
        }
        if self.max_completion_units == 0 {
            return Err(PipelineError::Config("max_completion_units must be positive".into()));
        }
        Ok(())
    }

    /// Length cap for one rendered context so that k exemplars and the test
    /// turn can share the budget.
    pub fn context_units(&self) -> f64 {
        self.budget as f64 / (self.k_exemplars + 1) as f64
    }
}

/// Indices of ⌈fraction·n⌉ dialogues drawn without replacement, ascending.
pub fn sample_dialogue_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::EmptyInput);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PipelineError::Config(format!("pool_fraction {fraction} is outside (0, 1]")));
    }
    let take = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Flattens every turn of the sampled dialogues into exemplars conditioned
/// on gold previous states. Record ids are `dialogue:turn`.
pub fn sample_pool(
    dialogues: &[DialogueRecord],
    fraction: f64,
    seed: u64,
    representation: Representation,
    ont: &Ontology,
) -> Result<ExemplarPool, PipelineError> {
    let picked = sample_dialogue_indices(dialogues.len(), fraction, seed)?;
    let mut records = Vec::new();
    for i in picked {
        let d = &dialogues[i];
        for t in 0..d.turns.len() {
            let ctx = d.turn_context(t, d.gold_prev_state(t), representation);
            let text = render_context_within(&ctx, ont, MAX_RETRIEVER_UNITS);
            records.push(ExemplarRecord::new(
                format!("{}:{}", d.id, t),
                &text,
                d.gold_changes[t].clone(),
            ));
        }
    }
    Ok(ExemplarPool::new(records)?)
}

/// Per-turn seed derived from the run seed and the turn's identity.
pub fn turn_seed(seed: u64, dialogue_id: &str, turn: usize) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{dialogue_id}:{turn}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A pool together with whatever index the configured retriever needs.
pub struct Retriever {
    kind: RetrieverKind,
    pool: ExemplarPool,
    embedder: Box<dyn Embedder>,
    bm25: Option<Bm25Index>,
    seed: u64,
}

impl Retriever {
    /// Uses the hashing embedder for queries, and for pool records lacking
    /// vectors.
    pub fn new(kind: RetrieverKind, pool: ExemplarPool, seed: u64) -> Result<Self, PipelineError> {
        Self::with_embedder(kind, pool, seed, Box::new(HashingEmbedder::default()))
    }

    pub fn with_embedder(
        kind: RetrieverKind,
        pool: ExemplarPool,
        seed: u64,
        embedder: Box<dyn Embedder>,
    ) -> Result<Self, PipelineError> {
        let pool = match kind {
            RetrieverKind::Embedding if pool.embedding_dim().is_none() && !pool.is_empty() => {
                pool.with_embeddings(embedder.as_ref())?
            }
            _ => pool,
        };
        if kind == RetrieverKind::Embedding {
            if let Some(dim) = pool.embedding_dim() {
                if dim != embedder.dim() {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: embedder.dim(),
                        found: dim,
                    }
                    .into());
                }
            }
        }
        let bm25 = (kind == RetrieverKind::Bm25).then(|| Bm25Index::new(&pool));
        Ok(Self {
            kind,
            pool,
            embedder,
            bm25,
            seed,
        })
    }

    pub fn pool(&self) -> &ExemplarPool {
        &self.pool
    }

    /// Pool indices, best first. `k` is capped at the pool size.
    pub fn retrieve(
        &self,
        query_text: &str,
        gold_change: &StateChange,
        dialogue_id: &str,
        turn: usize,
        k: usize,
    ) -> Result<Vec<usize>, RetrievalError> {
        let k = k.min(self.pool.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let hits = match self.kind {
            RetrieverKind::Embedding => knn(&self.pool, &self.embedder.embed(query_text), k)?,
            RetrieverKind::Bm25 => match &self.bm25 {
                Some(index) => index.query(query_text, k),
                None => bm25_query(&self.pool, query_text, k),
            },
            RetrieverKind::Oracle => oracle_retrieve(&self.pool, gold_change, k),
            RetrieverKind::Random => {
                return random_retrieve(self.pool.len(), k, turn_seed(self.seed, dialogue_id, turn));
            }
        };
        Ok(hits.into_iter().map(|h| h.index).collect())
    }
}

/// What a predictor sees for one turn.
pub struct TurnStep<'a> {
    pub dialogue_id: &'a str,
    pub turn: usize,
    pub test_context: String,
    /// Best first.
    pub exemplars: Vec<PromptExample>,
    pub gold_change: &'a StateChange,
}

/// A predicted change and the raw text it came from.
pub struct Prediction {
    pub change: StateChange,
    pub completion: String,
}

/// A failed prediction. `completion` keeps whatever raw text was produced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepFailure {
    pub message: String,
    pub completion: String,
}

impl StepFailure {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            completion: String::new(),
        }
    }
}

/// Turns are processed in order. The state a turn is conditioned on is the
/// accumulated prediction, or the gold previous state in gold mode. A failed
/// prediction counts as the empty change and is logged in the trace.
pub fn track_with<F>(
    d: &DialogueRecord,
    cfg: &RunConfig,
    ont: &Ontology,
    retriever: &Retriever,
    predict: F,
) -> Vec<TurnTrace>
where
    F: Fn(&TurnStep) -> Result<Prediction, StepFailure>,
{
    let mut prev_pred = DialogueState::new();
    let mut out = Vec::with_capacity(d.turns.len());
    for t in 0..d.turns.len() {
        let base = match cfg.conditioning {
            Conditioning::PredictedPrevState => prev_pred.clone(),
            Conditioning::GoldPrevState => d.gold_prev_state(t),
        };
        let ctx = d.turn_context(t, base.clone(), cfg.representation);
        let test_context = render_context_within(&ctx, ont, cfg.context_units());
        let gold_change = &d.gold_changes[t];
        let outcome = retriever
            .retrieve(&test_context, gold_change, &d.id, t, cfg.k_exemplars)
            .map_err(|e| StepFailure::new(format!("retrieval: {e}")))
            .and_then(|hits| {
                let exemplars = hits
                    .into_iter()
                    .map(|i| {
                        let r = retriever.pool().get(i);
                        PromptExample {
                            context: r.context_text.clone(),
                            change: r.change.clone(),
                        }
                    })
                    .collect();
                predict(&TurnStep {
                    dialogue_id: &d.id,
                    turn: t,
                    test_context,
                    exemplars,
                    gold_change,
                })
            });
        let (pred_change, completion, error) = match outcome {
            Ok(p) => (p.change, p.completion, None),
            Err(f) => {
                log::warn!("dialogue {} turn {t}: {}", d.id, f.message);
                (StateChange::new(), f.completion, Some(f.message))
            }
        };
        let pred_state = base.apply(&pred_change);
        out.push(TurnTrace {
            dialogue_id: d.id.clone(),
            turn: t,
            gold_state: d.turns[t].gold_state.clone(),
            pred_state: pred_state.clone(),
            gold_change: gold_change.clone(),
            pred_change,
            completion,
            error,
        });
        prev_pred = pred_state;
    }
    out
}

/// Prompt for one step under the run configuration.
pub fn step_prompt(step: &TurnStep, cfg: &RunConfig, ont: &Ontology) -> Result<String, PromptError> {
    let mut spec = match cfg.format {
        PromptFormat::Sql => PromptSpec::few_shot(ont, step.exemplars.clone(), step.test_context.clone()),
        PromptFormat::Traditional => {
            PromptSpec::traditional(ont, step.exemplars.clone(), step.test_context.clone())
        }
    };
    spec.max_prompt_units = cfg.budget;
    spec.exemplar_order = cfg.exemplar_order;
    spec.multi_domain_style = cfg.multi_domain_style;
    Ok(build_prompt(&spec, ont)?.text)
}

/// Parses a completion in the configured format.
pub fn parse_prediction(raw: &str, format: PromptFormat, ont: &Ontology) -> Result<StateChange, SqlError> {
    match format {
        PromptFormat::Sql => parse_completion(raw, ont),
        PromptFormat::Traditional => parse_traditional(raw, ont),
    }
}

/// The completion a perfect model would write after the prompt's head.
pub fn gold_completion(
    change: &StateChange,
    format: PromptFormat,
    style: MultiDomainStyle,
    ont: &Ontology,
) -> Result<String, SqlError> {
    match format {
        PromptFormat::Sql => {
            let sql = serialize_change(change, ont, style)?;
            let head = completion_head(PromptFormat::Sql);
            Ok(sql.strip_prefix(head).map(str::to_string).unwrap_or(sql))
        }
        PromptFormat::Traditional => Ok(format!(" {}", serialize_traditional(change))),
    }
}

fn lm_predict(
    step: &TurnStep,
    cfg: &RunConfig,
    ont: &Ontology,
    backend: &dyn CompletionBackend,
) -> Result<Prediction, StepFailure> {
    let prompt = step_prompt(step, cfg, ont).map_err(|e| StepFailure::new(format!("prompt: {e}")))?;
    let mut req = lm::default_request(&prompt);
    req.max_completion_units = cfg.max_completion_units;
    let result = lm::complete(backend, &req).map_err(|e| StepFailure::new(format!("lm: {e}")))?;
    match parse_prediction(&result.text, cfg.format, ont) {
        Ok(change) => Ok(Prediction {
            change,
            completion: result.text,
        }),
        Err(e) => Err(StepFailure {
            message: format!("parse: {e}"),
            completion: result.text,
        }),
    }
}

/// Tracks one dialogue with a language model.
pub fn track_dialogue(
    d: &DialogueRecord,
    cfg: &RunConfig,
    ont: &Ontology,
    retriever: &Retriever,
    backend: &dyn CompletionBackend,
) -> Vec<TurnTrace> {
    track_with(d, cfg, ont, retriever, |step| lm_predict(step, cfg, ont, backend))
}

/// Scored traces of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub report: EvalReport,
    pub traces: Vec<TurnTrace>,
}

fn track_all<F>(
    test: &[DialogueRecord],
    cfg: &RunConfig,
    ont: &Ontology,
    retriever: &Retriever,
    predict: F,
) -> Result<RunOutput, PipelineError>
where
    F: Fn(&TurnStep) -> Result<Prediction, StepFailure> + Sync,
{
    cfg.validate()?;
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let per_dialogue: Vec<Vec<TurnTrace>> = workers.install(|| {
        test.par_iter()
            .map(|d| track_with(d, cfg, ont, retriever, &predict))
            .collect()
    });
    let traces: Vec<TurnTrace> = per_dialogue.into_iter().flatten().collect();
    Ok(RunOutput {
        report: eval::score(&traces, ont),
        traces,
    })
}

/// Tracks every test dialogue, up to `cfg.parallelism` at a time, and scores
/// the result. Output order follows the input order.
pub fn run_experiment(
    test: &[DialogueRecord],
    cfg: &RunConfig,
    ont: &Ontology,
    retriever: &Retriever,
    backend: &dyn CompletionBackend,
) -> Result<RunOutput, PipelineError> {
    track_all(test, cfg, ont, retriever, |step| lm_predict(step, cfg, ont, backend))
}

/// Predicts each turn by copying the change of the top retrieved exemplar.
pub fn copy_baseline(
    test: &[DialogueRecord],
    cfg: &RunConfig,
    ont: &Ontology,
    retriever: &Retriever,
) -> Result<RunOutput, PipelineError> {
    if retriever.pool().is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let cfg = RunConfig {
        k_exemplars: 1,
        ..cfg.clone()
    };
    track_all(test, &cfg, ont, retriever, |step| match step.exemplars.first() {
        Some(top) => Ok(Prediction {
            change: top.change.clone(),
            completion: String::new(),
        }),
        None => Err(StepFailure::new("no exemplar retrieved")),
    })
}

/// A scripted backend answering every prompt of a run with the gold
/// completion, so the run reproduces the gold states.
pub fn gold_echo_script(
    test: &[DialogueRecord],
    cfg: &RunConfig,
    ont: &Ontology,
    retriever: &Retriever,
) -> Result<ScriptedBackend, PipelineError> {
    let script = Mutex::new(ScriptedBackend::new());
    track_all(test, cfg, ont, retriever, |step| {
        let prompt = step_prompt(step, cfg, ont).map_err(|e| StepFailure::new(format!("prompt: {e}")))?;
        let completion = gold_completion(step.gold_change, cfg.format, cfg.multi_domain_style, ont)
            .map_err(|e| StepFailure::new(format!("serialize: {e}")))?;
        script.lock().expect("script lock").insert(&prompt, completion.clone());
        Ok(Prediction {
            change: step.gold_change.clone(),
            completion,
        })
    })?;
    Ok(script.into_inner().expect("script lock"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub stdev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<EvalReport>,
    pub summary: Vec<MetricSummary>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summarizes headline and per-domain metrics over several runs.
pub fn summarize(runs: &[EvalReport]) -> Vec<MetricSummary> {
    let mut metrics: Vec<(String, Vec<f64>)> = vec![
        ("jga_all".into(), runs.iter().map(|r| r.jga_all).collect()),
        ("change_jga".into(), runs.iter().map(|r| r.change_jga).collect()),
        ("slot_value_f1".into(), runs.iter().map(|r| r.slot_value_f1).collect()),
    ];
    if let Some(first) = runs.first() {
        for domain in first.jga_per_domain.keys() {
            metrics.push((
                format!("jga_{domain}"),
                runs.iter()
                    .map(|r| r.jga_per_domain.get(domain).map_or(1.0, |s| s.jga))
                    .collect(),
            ));
        }
    }
    metrics
        .into_iter()
        .map(|(metric, values)| {
            let (mean, stdev) = mean_stdev(&values);
            MetricSummary { metric, mean, stdev }
        })
        .collect()
}

/// Repeats a run with pool seeds `seed, seed + 1, ...`, resampling the pool
/// from `train` each time.
pub fn run_repeated(
    train: &[DialogueRecord],
    test: &[DialogueRecord],
    cfg: &RunConfig,
    ont: &Ontology,
    backend: &dyn CompletionBackend,
    repeats: usize,
) -> Result<RepeatedReport, PipelineError> {
    if repeats == 0 {
        return Err(PipelineError::Config("repeats must be positive".into()));
    }
    let mut seeds = Vec::with_capacity(repeats);
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats as u64 {
        let seed = cfg.seed.wrapping_add(r);
        let run_cfg = RunConfig { seed, ..cfg.clone() };
        let pool = sample_pool(train, run_cfg.pool_fraction, seed, run_cfg.representation, ont)?;
        let retriever = Retriever::new(run_cfg.retriever_kind, pool, seed)?;
        runs.push(run_experiment(test, &run_cfg, ont, &retriever, backend)?.report);
        seeds.push(seed);
    }
    let summary = summarize(&runs);
    Ok(RepeatedReport { seeds, runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::EchoBackend;

    fn st(pairs: &[(&str, &str)]) -> DialogueState {
        pairs
            .iter()
            .map(|(k, v)| (SlotName::parse(k).unwrap(), v.to_string()))
            .collect()
    }

    fn turn(system: &str, user: &str, state: &[(&str, &str)]) -> Turn {
        Turn {
            system: system.into(),
            user: user.into(),
            gold_state: st(state),
        }
    }

    fn dialogue(id: &str) -> DialogueRecord {
        DialogueRecord::new(
            id,
            vec![
                turn("", "i need a cheap hotel", &[("hotel-pricerange", "cheap")]),
                turn(
                    "what area ?",
                    "the east please",
                    &[("hotel-pricerange", "cheap"), ("hotel-area", "east")],
                ),
                turn("booked .", "thanks , bye", &[("hotel-pricerange", "cheap"), ("hotel-area", "east")]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gold_changes_are_diffs() {
        let d = dialogue("d1");
        assert_eq!(d.gold_changes[0].len(), 1);
        assert_eq!(d.gold_changes[1].len(), 1);
        assert!(d.gold_changes[2].is_empty());
    }

    #[test]
    fn pool_fraction_arithmetic() {
        assert_eq!(sample_dialogue_indices(8438, 0.01, 1).unwrap().len(), 85);
        assert_eq!(sample_dialogue_indices(10, 1.0, 1).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(
            sample_dialogue_indices(100, 0.05, 7).unwrap(),
            sample_dialogue_indices(100, 0.05, 7).unwrap()
        );
        assert!(matches!(sample_dialogue_indices(0, 0.5, 1), Err(PipelineError::EmptyInput)));
        assert!(sample_dialogue_indices(5, 0.0, 1).is_err());
        assert!(sample_dialogue_indices(5, 1.5, 1).is_err());
    }

    #[test]
    fn pool_records_every_turn() {
        let ont = Ontology::multiwoz();
        let ds = vec![dialogue("a"), dialogue("b")];
        let pool = sample_pool(&ds, 1.0, 0, Representation::PrevStatePlusTurn, &ont).unwrap();
        assert_eq!(pool.len(), 6);
        assert_eq!(pool.get(1).id, "a:1");
        assert_eq!(
            pool.get(1).context_text,
            "[context] hotel-pricerange: cheap\n[system] what area ?\nQ: [user] the east please"
        );
    }

    #[test]
    fn gold_echo_reproduces_gold() {
        let ont = Ontology::multiwoz();
        let train = vec![dialogue("a"), dialogue("b")];
        let test = vec![dialogue("t")];
        let pool = sample_pool(&train, 1.0, 0, Representation::PrevStatePlusTurn, &ont).unwrap();
        for kind in [RetrieverKind::Embedding, RetrieverKind::Bm25, RetrieverKind::Random, RetrieverKind::Oracle] {
            let cfg = RunConfig {
                retriever_kind: kind,
                ..RunConfig::default()
            };
            let retriever = Retriever::new(kind, pool.clone(), 3).unwrap();
            let script = gold_echo_script(&test, &cfg, &ont, &retriever).unwrap();
            let out = run_experiment(&test, &cfg, &ont, &retriever, &script).unwrap();
            assert_eq!(out.report.jga_all, 1.0, "{kind:?}");
            assert!(out.report.error_log.is_empty());
        }
    }

    #[test]
    fn garbage_completion_logs_and_keeps_raw_text() {
        let ont = Ontology::multiwoz();
        let pool = sample_pool(&[dialogue("a")], 1.0, 0, Representation::PrevStatePlusTurn, &ont).unwrap();
        let retriever = Retriever::new(RetrieverKind::Bm25, pool, 0).unwrap();
        let traces = track_dialogue(
            &dialogue("t"),
            &RunConfig::default(),
            &ont,
            &retriever,
            &EchoBackend::new(" spaceship WHERE warp = 9"),
        );
        assert!(traces.iter().all(|t| t.pred_state.is_empty()));
        assert_eq!(traces[0].completion, " spaceship WHERE warp = 9");
        assert!(traces[0].error.as_deref().unwrap().starts_with("parse:"));
    }

    #[test]
    fn copy_baseline_needs_a_pool() {
        let ont = Ontology::multiwoz();
        let retriever = Retriever::new(RetrieverKind::Oracle, ExemplarPool::default(), 0).unwrap();
        assert!(matches!(
            copy_baseline(&[dialogue("t")], &RunConfig::default(), &ont, &retriever),
            Err(PipelineError::EmptyPool)
        ));
    }

    #[test]
    fn copy_baseline_with_oracle_copies_twin() {
        let ont = Ontology::multiwoz();
        let pool = sample_pool(&[dialogue("a")], 1.0, 0, Representation::PrevStatePlusTurn, &ont).unwrap();
        let retriever = Retriever::new(RetrieverKind::Oracle, pool, 0).unwrap();
        let out = copy_baseline(&[dialogue("t")], &RunConfig::default(), &ont, &retriever).unwrap();
        assert_eq!(out.report.change_jga, 1.0);
    }

    #[test]
    fn stdev_is_sample_stdev() {
        let (m, s) = mean_stdev(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_stdev(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = RunConfig {
            pool_fraction: 0.0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: RunConfig = toml::from_str("k_exemplars = 5\nretriever_kind = \"bm25\"").unwrap();
        assert_eq!(parsed.k_exemplars, 5);
        assert_eq!(parsed.retriever_kind, RetrieverKind::Bm25);
        assert!(toml::from_str::<RunConfig>("nonsense = 1").is_err());
    }

    #[test]
    fn turn_seeds_differ_by_turn() {
        assert_ne!(turn_seed(1, "d", 0), turn_seed(1, "d", 1));
        assert_eq!(turn_seed(1, "d", 0), turn_seed(1, "d", 0));
    }
}
