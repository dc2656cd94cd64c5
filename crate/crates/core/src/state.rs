//! Dialogue states, state changes and the apply/diff algebra.
//!
//! A [`DialogueState`] is the set of slot-value pairs accumulated after a
//! turn. A [`StateChange`] is the delta between two consecutive states:
//! every entry either sets a slot (addition or value change) or deletes it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Reserved value meaning "the user accepts any value".
pub const DONTCARE: &str = "dontcare";

/// Reserved token for a slot deletion in serialized changes.
pub const DELETE_TOKEN: &str = "NONE";

#[derive(Debug, Error)]
pub enum StateError {
    #[error("invalid slot name {0:?}: expected `domain-slot`")]
    InvalidSlotName(String),
    #[error("reading normalization table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("normalization table line {line}: expected `raw<TAB>canonical`")]
    BadReplacement { line: usize },
}

/// A `(domain, slot)` pair such as `hotel-area`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotName {
    domain: String,
    slot: String,
}

impl SlotName {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            slot: slot.into(),
        }
    }

    /// Parses `domain-slot`, splitting on the first `-`.
    pub fn parse(key: &str) -> Result<Self, StateError> {
        let key = key.trim();
        match key.split_once('-') {
            Some((d, s)) if !d.trim().is_empty() && !s.trim().is_empty() => {
                Ok(Self::new(d.trim(), s.trim()))
            }
            _ => Err(StateError::InvalidSlotName(key.to_string())),
        }
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn slot(&self) -> &str {
        &self.slot
    }
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.slot)
    }
}

/// One entry of a state change.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotUpdate {
    Set(String),
    Delete,
}

impl SlotUpdate {
    /// Surface form: the value, or [`DELETE_TOKEN`] for a deletion.
    pub fn as_str(&self) -> &str {
        match self {
            SlotUpdate::Set(v) => v,
            SlotUpdate::Delete => DELETE_TOKEN,
        }
    }
}

/// Accumulated dialogue state `y_t`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DialogueState {
    slots: BTreeMap<SlotName, String>,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a normalized value. Values that normalize to the empty string
    /// or to `none` mean "slot absent" and are ignored.
    pub fn insert(&mut self, slot: SlotName, raw_value: &str) {
        self.insert_with(slot, raw_value, Normalizer::global());
    }

    pub fn insert_with(&mut self, slot: SlotName, raw_value: &str, norm: &Normalizer) {
        let value = norm.normalize(raw_value);
        if value.is_empty() || value == "none" {
            return;
        }
        self.slots.insert(slot, value);
    }

    pub fn get(&self, slot: &SlotName) -> Option<&str> {
        self.slots.get(slot).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SlotName, &str)> {
        self.slots.iter().map(|(k, v)| (k, v.as_str()))
    }

    /// Keeps only the slots of `domain`.
    pub fn project(&self, domain: &str) -> DialogueState {
        DialogueState {
            slots: self
                .slots
                .iter()
                .filter(|(k, _)| k.domain() == domain)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies `self` and applies every entry of `change`. Deleting an absent
    /// slot is a no-op.
    pub fn apply(&self, change: &StateChange) -> DialogueState {
        let mut next = self.clone();
        for (slot, update) in &change.updates {
            match update {
                SlotUpdate::Set(v) => {
                    next.slots.insert(slot.clone(), v.clone());
                }
                SlotUpdate::Delete => {
                    next.slots.remove(slot);
                }
            }
        }
        next
    }

    /// The minimal change taking `self` to `next`.
    pub fn diff(&self, next: &DialogueState) -> StateChange {
        let mut updates = BTreeMap::new();
        for (slot, value) in &next.slots {
            if self.slots.get(slot) != Some(value) {
                updates.insert(slot.clone(), SlotUpdate::Set(value.clone()));
            }
        }
        for slot in self.slots.keys() {
            if !next.slots.contains_key(slot) {
                updates.insert(slot.clone(), SlotUpdate::Delete);
            }
        }
        StateChange { updates }
    }
}

impl FromIterator<(SlotName, String)> for DialogueState {
    fn from_iter<I: IntoIterator<Item = (SlotName, String)>>(iter: I) -> Self {
        let mut state = DialogueState::new();
        for (k, v) in iter {
            state.insert(k, &v);
        }
        state
    }
}

/// `apply_change(prev, change)`.
pub fn apply_change(prev: &DialogueState, change: &StateChange) -> DialogueState {
    prev.apply(change)
}

/// `diff_states(prev, curr)`; inverse of [`apply_change`].
pub fn diff_states(prev: &DialogueState, curr: &DialogueState) -> StateChange {
    prev.diff(curr)
}

/// State change `c_t`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct StateChange {
    updates: BTreeMap<SlotName, SlotUpdate>,
}

impl StateChange {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `slot` to a normalized value. A raw value equal to
    /// [`DELETE_TOKEN`] records a deletion instead.
    pub fn set(&mut self, slot: SlotName, raw_value: &str) {
        if raw_value.trim() == DELETE_TOKEN {
            self.updates.insert(slot, SlotUpdate::Delete);
        } else {
            self.updates
                .insert(slot, SlotUpdate::Set(normalize_value(raw_value)));
        }
    }

    pub fn delete(&mut self, slot: SlotName) {
        self.updates.insert(slot, SlotUpdate::Delete);
    }

    pub fn insert(&mut self, slot: SlotName, update: SlotUpdate) {
        self.updates.insert(slot, update);
    }

    pub fn get(&self, slot: &SlotName) -> Option<&SlotUpdate> {
        self.updates.get(slot)
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// Entries in `(domain, slot)` lexical order.
    pub fn iter(&self) -> impl Iterator<Item = (&SlotName, &SlotUpdate)> {
        self.updates.iter()
    }

    pub fn slots(&self) -> impl Iterator<Item = &SlotName> {
        self.updates.keys()
    }
}

impl FromIterator<(SlotName, SlotUpdate)> for StateChange {
    fn from_iter<I: IntoIterator<Item = (SlotName, SlotUpdate)>>(iter: I) -> Self {
        Self {
            updates: iter.into_iter().collect(),
        }
    }
}

// Both types serialize as a flat `{"domain-slot": "value"}` object.

impl Serialize for DialogueState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(self.slots.iter().map(|(k, v)| (k.to_string(), v)))
    }
}

impl<'de> Deserialize<'de> for DialogueState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        let mut state = DialogueState::new();
        for (k, v) in raw {
            state.insert(SlotName::parse(&k).map_err(D::Error::custom)?, &v);
        }
        Ok(state)
    }
}

impl Serialize for StateChange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(self.updates.iter().map(|(k, v)| (k.to_string(), v.as_str())))
    }
}

impl<'de> Deserialize<'de> for StateChange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        let mut change = StateChange::new();
        for (k, v) in raw {
            change.set(SlotName::parse(&k).map_err(D::Error::custom)?, &v);
        }
        Ok(change)
    }
}

/// Value canonicalizer: lowercase, trim, collapse whitespace, then apply a
/// whole-word replacement table.
#[derive(Clone, Debug)]
pub struct Normalizer {
    replacements: Vec<(String, String)>,
}

const DEFAULT_REPLACEMENTS: &str = include_str!("../fixtures/normalization.tsv");

impl Default for Normalizer {
    fn default() -> Self {
        Self::parse_table(DEFAULT_REPLACEMENTS).expect("bundled normalization table is valid")
    }
}

impl Normalizer {
    /// The bundled table, shared process-wide.
    pub fn global() -> &'static Normalizer {
        static GLOBAL: OnceLock<Normalizer> = OnceLock::new();
        GLOBAL.get_or_init(Normalizer::default)
    }

    pub fn empty() -> Self {
        Self {
            replacements: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, StateError> {
        let text = std::fs::read_to_string(path).map_err(|source| StateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_table(&text)
    }

    /// Parses `raw<TAB>canonical` lines; blank lines and `#` comments are skipped.
    pub fn parse_table(text: &str) -> Result<Self, StateError> {
        let mut replacements = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (raw, canon) = line
                .split_once('\t')
                .ok_or(StateError::BadReplacement { line: i + 1 })?;
            let raw = collapse(raw);
            if raw.is_empty() {
                return Err(StateError::BadReplacement { line: i + 1 });
            }
            replacements.push((raw, collapse(canon)));
        }
        Ok(Self { replacements })
    }

    pub fn extend(&mut self, other: &Normalizer) {
        self.replacements.extend(other.replacements.iter().cloned());
    }

    pub fn normalize(&self, raw: &str) -> String {
        let mut value = collapse(raw);
        for (from, to) in &self.replacements {
            value = replace_words(&value, from, to);
        }
        value
    }
}

/// Normalizes with the bundled replacement table.
pub fn normalize_value(raw: &str) -> String {
    Normalizer::global().normalize(raw)
}

/// Lowercase, trim, single-space.
pub fn collapse(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn replace_words(value: &str, from: &str, to: &str) -> String {
    if !value.contains(from) {
        return value.to_string();
    }
    let mut padded = format!(" {value} ");
    let needle = format!(" {from} ");
    let repl = format!(" {to} ");
    while let Some(pos) = padded.find(&needle) {
        padded.replace_range(pos..pos + needle.len(), &repl);
    }
    collapse(&padded)
}
