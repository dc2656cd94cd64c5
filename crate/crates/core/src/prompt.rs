//! Turn-context rendering and prompt assembly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::Ontology;
use crate::sql::{serialize_change, serialize_traditional, MultiDomainStyle, SqlError};
use crate::state::{DialogueState, SlotName, StateChange};

/// Instruction line for SQL-format prompts.
pub const SQL_INSTRUCTION: &str =
    "Using valid SQLite, answer the following multi-turn conversational questions for the tables provided above.";

/// Instruction line for traditional-format prompts.
pub const TRADITIONAL_INSTRUCTION: &str =
    "answer the following multi-turn conversational questions for the ontology provided above.";

/// Default prompt budget in length units.
pub const DEFAULT_BUDGET: usize = 3600;

/// Length units per whitespace-delimited token.
pub const UNITS_PER_TOKEN: f64 = 1.35;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt needs {needed:.1} units with no exemplars, budget is {budget}")]
    BudgetTooSmall { needed: f64, budget: usize },
    #[error("budget must be positive")]
    ZeroBudget,
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("ontology has no `{0}` domain")]
    MissingDomain(String),
}

/// Approximate LM token count of `text`.
pub fn length_units(text: &str) -> f64 {
    text.split_whitespace().count() as f64 * UNITS_PER_TOKEN
}

/// Keeps the trailing words of `text` so that it fits in `max_units`. The
/// kept suffix is sliced from the original, so line breaks survive.
pub fn truncate_front(text: &str, max_units: f64) -> String {
    if length_units(text) <= max_units {
        return text.to_string();
    }
    let keep = (max_units / UNITS_PER_TOKEN + 1e-9).floor() as usize;
    if keep == 0 {
        return String::new();
    }
    let starts: Vec<usize> = text
        .char_indices()
        .filter(|&(i, c)| {
            !c.is_whitespace() && text[..i].chars().next_back().map_or(true, char::is_whitespace)
        })
        .map(|(i, _)| i)
        .collect();
    text[starts[starts.len() - keep]..].to_string()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Previous state plus the latest system/user exchange.
    #[default]
    PrevStatePlusTurn,
    /// All earlier utterances plus the latest exchange.
    FullHistory,
    /// The latest exchange only.
    SingleTurn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormat {
    #[default]
    Sql,
    Traditional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarOrder {
    /// The best exemplar sits right above the test turn.
    #[default]
    MostSimilarLast,
    MostSimilarFirst,
}

/// The dialogue context of one turn.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TurnContext {
    pub prev_state: DialogueState,
    pub system_utt: String,
    pub user_utt: String,
    pub representation: Representation,
    /// Earlier `(system, user)` pairs, oldest first. Used by `FullHistory`.
    pub history: Vec<(String, String)>,
}

impl TurnContext {
    pub fn new(prev_state: DialogueState, system_utt: &str, user_utt: &str) -> Self {
        Self {
            prev_state,
            system_utt: system_utt.to_string(),
            user_utt: user_utt.to_string(),
            representation: Representation::PrevStatePlusTurn,
            history: Vec::new(),
        }
    }
}

/// `domain-slot: value` pairs in ontology order.
pub fn render_state(state: &DialogueState, ont: &Ontology) -> String {
    let mut pairs: Vec<(&SlotName, &str)> = state.iter().collect();
    pairs.sort_by_key(|(k, _)| (ont.order_key(k), (*k).clone()));
    pairs
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn render_history(history: &[(String, String)]) -> String {
    history
        .iter()
        .map(|(sys, user)| {
            if sys.is_empty() {
                format!("[user] {user}")
            } else {
                format!("[system] {sys} [user] {user}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `[context] ...\n[system] ...\nQ: [user] ...`
pub fn render_context(ctx: &TurnContext, ont: &Ontology) -> String {
    let context = match ctx.representation {
        Representation::PrevStatePlusTurn => render_state(&ctx.prev_state, ont),
        Representation::FullHistory => render_history(&ctx.history),
        Representation::SingleTurn => String::new(),
    };
    format!(
        "[context] {context}\n[system] {}\nQ: [user] {}",
        ctx.system_utt, ctx.user_utt
    )
}

/// Renders `ctx`, dropping the oldest history pairs until it fits in
/// `max_units`. Other representations are returned unchanged.
pub fn render_context_within(ctx: &TurnContext, ont: &Ontology, max_units: f64) -> String {
    let mut rendered = render_context(ctx, ont);
    if ctx.representation != Representation::FullHistory {
        return rendered;
    }
    let mut trimmed = ctx.clone();
    while length_units(&rendered) > max_units && !trimmed.history.is_empty() {
        trimmed.history.remove(0);
        rendered = render_context(&trimmed, ont);
    }
    rendered
}

/// A labeled example placed in a prompt. The context is already rendered,
/// as stored in the exemplar pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptExample {
    pub context: String,
    pub change: StateChange,
}

#[derive(Clone, Debug)]
pub struct PromptSpec {
    pub schema_text: String,
    pub instruction: String,
    /// Best first.
    pub exemplars: Vec<PromptExample>,
    pub test_context: String,
    pub format: PromptFormat,
    pub max_prompt_units: usize,
    pub exemplar_order: ExemplarOrder,
    pub multi_domain_style: MultiDomainStyle,
    /// Blank lines between example blocks.
    pub block_gap: usize,
}

impl PromptSpec {
    /// SQL few-shot layout: two blank lines between examples.
    pub fn few_shot(ont: &Ontology, exemplars: Vec<PromptExample>, test_context: String) -> Self {
        Self {
            schema_text: crate::ontology::render_schema_sql(ont),
            instruction: SQL_INSTRUCTION.to_string(),
            exemplars,
            test_context,
            format: PromptFormat::Sql,
            max_prompt_units: DEFAULT_BUDGET,
            exemplar_order: ExemplarOrder::MostSimilarLast,
            multi_domain_style: MultiDomainStyle::PerDomainStatements,
            block_gap: 2,
        }
    }

    /// SQL zero-shot layout: the single formatting example, one blank line.
    pub fn zero_shot(ont: &Ontology, test_context: String) -> Result<Self, PromptError> {
        let example = zero_shot_formatting_example(ont)?;
        Ok(Self {
            block_gap: 1,
            ..Self::few_shot(ont, vec![example], test_context)
        })
    }

    /// Traditional `domain-slot: value` layout.
    pub fn traditional(ont: &Ontology, exemplars: Vec<PromptExample>, test_context: String) -> Self {
        Self {
            schema_text: crate::ontology::render_schema_traditional(ont),
            instruction: TRADITIONAL_INSTRUCTION.to_string(),
            format: PromptFormat::Traditional,
            ..Self::few_shot(ont, exemplars, test_context)
        }
    }
}

/// Text the LM is asked to continue after the test context.
pub fn completion_head(format: PromptFormat) -> &'static str {
    match format {
        PromptFormat::Sql => "SQL: SELECT * FROM",
        PromptFormat::Traditional => "A:",
    }
}

/// A built prompt and how many exemplars survived the budget.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltPrompt {
    pub text: String,
    pub exemplars_used: usize,
    pub units: f64,
}

/// Assembles schema, instruction, numbered examples and the test turn. When
/// over budget, the least similar exemplars are dropped one at a time.
pub fn build_prompt(spec: &PromptSpec, ont: &Ontology) -> Result<BuiltPrompt, PromptError> {
    if spec.max_prompt_units == 0 {
        return Err(PromptError::ZeroBudget);
    }
    let labels = spec
        .exemplars
        .iter()
        .map(|ex| label(&ex.change, spec, ont))
        .collect::<Result<Vec<_>, _>>()?;
    let budget = spec.max_prompt_units as f64;
    let mut n = spec.exemplars.len();
    loop {
        let text = render_prompt(spec, &labels, n);
        let units = length_units(&text);
        if units <= budget {
            return Ok(BuiltPrompt {
                text,
                exemplars_used: n,
                units,
            });
        }
        if n == 0 {
            return Err(PromptError::BudgetTooSmall {
                needed: units,
                budget: spec.max_prompt_units,
            });
        }
        n -= 1;
    }
}

fn label(change: &StateChange, spec: &PromptSpec, ont: &Ontology) -> Result<String, SqlError> {
    match spec.format {
        PromptFormat::Sql => serialize_change(change, ont, spec.multi_domain_style),
        PromptFormat::Traditional => Ok(serialize_traditional(change)),
    }
}

fn render_prompt(spec: &PromptSpec, labels: &[String], n: usize) -> String {
    let mut chosen: Vec<usize> = (0..n).collect();
    if spec.exemplar_order == ExemplarOrder::MostSimilarLast {
        chosen.reverse();
    }
    let label_prefix = match spec.format {
        PromptFormat::Sql => "SQL:",
        PromptFormat::Traditional => "A:",
    };
    let mut blocks: Vec<String> = chosen
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            format!(
                "Example #{}\n{}\n{label_prefix} {}",
                i + 1,
                spec.exemplars[idx].context,
                labels[idx]
            )
        })
        .collect();
    blocks.push(format!(
        "Example #{}\n{}\n{}",
        n + 1,
        spec.test_context,
        completion_head(spec.format)
    ));
    let gap = "\n".repeat(spec.block_gap + 1);
    let mut out = String::new();
    if !spec.schema_text.is_empty() {
        out.push_str(&spec.schema_text);
        out.push_str("\n\n");
    }
    out.push_str("-- ");
    out.push_str(&spec.instruction);
    out.push_str("\n\n");
    out.push_str(&blocks.join(&gap));
    out
}

/// The fixed hotel turn that shows the output format in zero-shot prompts.
pub fn zero_shot_formatting_example(ont: &Ontology) -> Result<PromptExample, PromptError> {
    let hotel = ont
        .domain("hotel")
        .ok_or_else(|| PromptError::MissingDomain("hotel".into()))?;
    let mut change = StateChange::new();
    for (slot, value) in [("type", "guest house"), ("area", "west"), ("internet", "no")] {
        let def = hotel
            .slot(slot)
            .ok_or_else(|| PromptError::MissingDomain(format!("hotel-{slot}")))?;
        change.set(def.slot_name(), value);
    }
    Ok(PromptExample {
        context: "[context]\n[system]\nQ: [user] i am looking for a guest house to stay in the west. i do not need internet .".into(),
        change,
    })
}
