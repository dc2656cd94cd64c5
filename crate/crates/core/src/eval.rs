//! Joint goal accuracy, change accuracy, slot-value F1 and per-turn curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::Ontology;
use crate::state::{DialogueState, SlotName, StateChange};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold turns")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
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
    #[error("writing table: {0}")]
    Table(#[from] csv::Error),
}

fn aligned(preds: usize, golds: usize) -> Result<(), EvalError> {
    if preds == golds {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { preds, golds })
    }
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of turns whose predicted state equals the gold state.
pub fn jga(preds: &[DialogueState], golds: &[DialogueState]) -> Result<f64, EvalError> {
    aligned(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(rate(hits, golds.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub jga: f64,
    /// Turns where either projection is non-empty.
    pub count: usize,
}

/// JGA over the domain's slots, counting only turns where the gold or the
/// predicted projection is non-empty.
pub fn per_domain_jga(
    preds: &[DialogueState],
    golds: &[DialogueState],
    domain: &str,
    ont: &Ontology,
) -> Result<DomainScore, EvalError> {
    aligned(preds.len(), golds.len())?;
    if ont.domain(domain).is_none() {
        return Err(EvalError::UnknownDomain(domain.to_string()));
    }
    let mut hits = 0;
    let mut count = 0;
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (p.project(domain), g.project(domain));
        if p.is_empty() && g.is_empty() {
            continue;
        }
        count += 1;
        if p == g {
            hits += 1;
        }
    }
    Ok(DomainScore {
        jga: rate(hits, count),
        count,
    })
}

/// Fraction of turns whose predicted change equals the gold change.
pub fn change_jga(preds: &[StateChange], golds: &[StateChange]) -> Result<f64, EvalError> {
    aligned(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(rate(hits, golds.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn pairs(state: &DialogueState) -> BTreeSet<(&SlotName, &str)> {
    state.iter().collect()
}

/// Micro-averaged precision, recall and F1 over pooled (slot, value) pairs.
pub fn slot_value_prf(preds: &[DialogueState], golds: &[DialogueState]) -> Result<Prf, EvalError> {
    aligned(preds.len(), golds.len())?;
    let (mut matched, mut predicted, mut gold) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (pairs(p), pairs(g));
        matched += p.intersection(&g).count();
        predicted += p.len();
        gold += g.len();
    }
    if predicted == 0 && gold == 0 {
        // Nothing to find and nothing claimed.
        return Ok(Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
    }
    let precision = if predicted == 0 { 0.0 } else { matched as f64 / predicted as f64 };
    let recall = if gold == 0 { 0.0 } else { matched as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

pub fn slot_value_f1(preds: &[DialogueState], golds: &[DialogueState]) -> Result<f64, EvalError> {
    Ok(slot_value_prf(preds, golds)?.f1)
}

/// Everything recorded about one tracked turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub dialogue_id: String,
    pub turn: usize,
    pub gold_state: DialogueState,
    pub pred_state: DialogueState,
    pub gold_change: StateChange,
    pub pred_change: StateChange,
    #[serde(default)]
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnIndexScore {
    pub turn: usize,
    pub state_jga: f64,
    pub change_jga: f64,
    pub count: usize,
}

/// State and change JGA bucketed by position in the dialogue.
pub fn per_turn_index(traces: &[TurnTrace]) -> Vec<TurnIndexScore> {
    let mut buckets: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for t in traces {
        let b = buckets.entry(t.turn).or_default();
        b.0 += (t.pred_state == t.gold_state) as usize;
        b.1 += (t.pred_change == t.gold_change) as usize;
        b.2 += 1;
    }
    buckets
        .into_iter()
        .map(|(turn, (s, c, n))| TurnIndexScore {
            turn,
            state_jga: rate(s, n),
            change_jga: rate(c, n),
            count: n,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub dialogue_id: String,
    pub turn: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga_all: f64,
    pub jga_per_domain: BTreeMap<String, DomainScore>,
    pub change_jga: f64,
    pub slot_value_f1: f64,
    pub slot_value_precision: f64,
    pub slot_value_recall: f64,
    pub per_turn_index_jga: Vec<TurnIndexScore>,
    pub n_dialogues: usize,
    pub n_turns: usize,
    pub error_log: Vec<ErrorEntry>,
    /// Set when there were no turns to score and every rate is a vacuous 1.0.
    pub vacuous: bool,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer_pretty(&mut out, self).expect("report serializes");
        writeln!(out).map_err(io)?;
        out.flush().map_err(io)
    }

    pub fn read_json(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Scores a full trace. Per-domain scores cover every ontology domain.
pub fn score(traces: &[TurnTrace], ont: &Ontology) -> EvalReport {
    let preds: Vec<DialogueState> = traces.iter().map(|t| t.pred_state.clone()).collect();
    let golds: Vec<DialogueState> = traces.iter().map(|t| t.gold_state.clone()).collect();
    let pred_changes: Vec<StateChange> = traces.iter().map(|t| t.pred_change.clone()).collect();
    let gold_changes: Vec<StateChange> = traces.iter().map(|t| t.gold_change.clone()).collect();

    let jga_per_domain = ont
        .domains()
        .iter()
        .map(|d| {
            let s = per_domain_jga(&preds, &golds, &d.name, ont).expect("aligned, known domain");
            (d.name.clone(), s)
        })
        .collect();
    let prf = slot_value_prf(&preds, &golds).expect("aligned");
    let dialogues: BTreeSet<&str> = traces.iter().map(|t| t.dialogue_id.as_str()).collect();
    let error_log = traces
        .iter()
        .filter_map(|t| {
            t.error.as_ref().map(|m| ErrorEntry {
                dialogue_id: t.dialogue_id.clone(),
                turn: t.turn,
                message: m.clone(),
            })
        })
        .collect();

    EvalReport {
        jga_all: jga(&preds, &golds).expect("aligned"),
        jga_per_domain,
        change_jga: change_jga(&pred_changes, &gold_changes).expect("aligned"),
        slot_value_f1: prf.f1,
        slot_value_precision: prf.precision,
        slot_value_recall: prf.recall,
        per_turn_index_jga: per_turn_index(traces),
        n_dialogues: dialogues.len(),
        n_turns: traces.len(),
        error_log,
        vacuous: traces.is_empty(),
    }
}

/// One JSON object per turn.
pub fn write_trace(traces: &[TurnTrace], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for t in traces {
        writeln!(out, "{}", serde_json::to_string(t).expect("trace serializes")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Vec<TurnTrace>, EvalError> {
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TableRow<'a> {
    dialogue_id: &'a str,
    turn: usize,
    gold_state: String,
    pred_state: String,
    state_correct: bool,
    change_correct: bool,
}

/// Flat tab-separated per-turn table for plotting.
pub fn write_turn_table(traces: &[TurnTrace], out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for t in traces {
        w.serialize(TableRow {
            dialogue_id: &t.dialogue_id,
            turn: t.turn,
            gold_state: serde_json::to_string(&t.gold_state).expect("state serializes"),
            pred_state: serde_json::to_string(&t.pred_state).expect("state serializes"),
            state_correct: t.pred_state == t.gold_state,
            change_correct: t.pred_change == t.gold_change,
        })?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: "turn table".into(),
        source,
    })
}
