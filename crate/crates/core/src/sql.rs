//! State changes as SQL `SELECT` statements over the schema tables, and the
//! flat `domain-slot: value` alternative. Serializers emit canonical text;
//! parsers accept the looser output of a language model.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Domain, Ontology, SlotDef};
use crate::state::{normalize_value, SlotName, SlotUpdate, StateChange, DELETE_TOKEN};

/// Byte range into the parsed text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SqlError {
    #[error("unknown table `{table}` at {span}")]
    UnknownTable { table: String, span: Span },
    #[error("unknown column `{column}` at {span}")]
    UnknownColumn { column: String, span: Span },
    #[error("malformed SQL at {span}: {reason}")]
    MalformedSql { reason: String, span: Span },
    #[error("slot `{0}` is not in the ontology")]
    UnknownSlot(SlotName),
}

/// How a change touching several domains is rendered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiDomainStyle {
    /// `SELECT * FROM a WHERE ...; SELECT * FROM b WHERE ...;`
    #[default]
    PerDomainStatements,
    /// `SELECT * FROM a AS d_1, b AS d_2 WHERE d_1.x = ... AND d_2.y = ...;`
    RenamedAliases,
}

/// Table name standing for "no state change".
pub const EMPTY_TABLE: &str = "none";

/// Renders a change as SQL. The empty change is `SELECT * FROM none;`.
pub fn serialize_change(
    change: &StateChange,
    ont: &Ontology,
    style: MultiDomainStyle,
) -> Result<String, SqlError> {
    let groups = domain_conditions(change, ont)?;
    if groups.is_empty() {
        return Ok(format!("SELECT * FROM {EMPTY_TABLE};"));
    }
    if groups.len() == 1 || style == MultiDomainStyle::PerDomainStatements {
        let statements: Vec<String> = groups
            .iter()
            .map(|(domain, conds)| {
                let wheres: Vec<String> = conds
                    .iter()
                    .map(|(col, value)| format!("{col} = {value}"))
                    .collect();
                format!("SELECT * FROM {domain} WHERE {};", wheres.join(" AND "))
            })
            .collect();
        return Ok(statements.join(" "));
    }
    let tables: Vec<String> = groups
        .iter()
        .enumerate()
        .map(|(i, (domain, _))| format!("{domain} AS d_{}", i + 1))
        .collect();
    let wheres: Vec<String> = groups
        .iter()
        .enumerate()
        .flat_map(|(i, (_, conds))| {
            conds
                .iter()
                .map(move |(col, value)| format!("d_{}.{col} = {value}", i + 1))
        })
        .collect();
    Ok(format!(
        "SELECT * FROM {} WHERE {};",
        tables.join(", "),
        wheres.join(" AND ")
    ))
}

type Conditions = Vec<(String, Vec<(String, String)>)>;

fn domain_conditions(change: &StateChange, ont: &Ontology) -> Result<Conditions, SqlError> {
    let mut ordered = Vec::with_capacity(change.len());
    for (name, update) in change.iter() {
        let slot = ont
            .slot(name)
            .ok_or_else(|| SqlError::UnknownSlot(name.clone()))?;
        ordered.push((ont.order_key(name), slot, update.as_str()));
    }
    ordered.sort_by_key(|(key, _, _)| *key);
    let mut out: Conditions = Vec::new();
    for (_, slot, value) in ordered {
        let cond = (slot.column().to_string(), value.to_string());
        match out.last_mut() {
            Some((d, conds)) if *d == slot.domain => conds.push(cond),
            _ => out.push((slot.domain.clone(), vec![cond])),
        }
    }
    Ok(out)
}

/// Parses an LM completion strictly: the first problem is returned as an error.
pub fn parse_completion(raw: &str, ont: &Ontology) -> Result<StateChange, SqlError> {
    let (change, mut errors) = parse_completion_lenient(raw, ont);
    if errors.is_empty() {
        Ok(change)
    } else {
        Err(errors.swap_remove(0))
    }
}

/// Parses an LM completion, dropping unusable statements or conditions and
/// reporting each one. Completions may omit the `SELECT * FROM` head.
pub fn parse_completion_lenient(raw: &str, ont: &Ontology) -> (StateChange, Vec<SqlError>) {
    let mut change = StateChange::new();
    let mut errors = Vec::new();
    let region = &raw[..completion_end(raw)];
    let mut any = false;
    for (start, stmt) in split_outside_quotes(region, |b| b == b';') {
        if stmt.trim().is_empty() {
            continue;
        }
        any = true;
        parse_statement(stmt, start, ont, &mut change, &mut errors);
    }
    if !any {
        errors.push(SqlError::MalformedSql {
            reason: "empty completion".into(),
            span: Span {
                start: 0,
                end: raw.len(),
            },
        });
    }
    (change, errors)
}

/// Completions stop at the first line that starts a new prompt block.
fn completion_end(raw: &str) -> usize {
    let mut offset = 0;
    for (i, line) in raw.split_inclusive('\n').enumerate() {
        let t = line.trim_start();
        let marker = ["--", "Example", "[context]", "[system]", "Q:"]
            .iter()
            .any(|m| t.starts_with(m));
        if i > 0 && marker {
            return offset;
        }
        offset += line.len();
    }
    raw.len()
}

fn parse_statement(
    stmt: &str,
    base: usize,
    ont: &Ontology,
    change: &mut StateChange,
    errors: &mut Vec<SqlError>,
) {
    let span_of = |s: &str| {
        let start = base + (s.as_ptr() as usize - stmt.as_ptr() as usize);
        Span {
            start,
            end: start + s.len(),
        }
    };
    let malformed = |reason: &str, s: &str| SqlError::MalformedSql {
        reason: reason.to_string(),
        span: span_of(s),
    };

    let body = match strip_select_head(stmt) {
        Ok(body) => body,
        Err(()) => {
            errors.push(malformed("expected `SELECT * FROM`", stmt.trim()));
            return;
        }
    };
    let where_pos = keyword_positions(body, "WHERE", true).into_iter().next();
    let (table_part, cond_part) = match where_pos {
        Some(p) => (&body[..p], Some(&body[p + 5..])),
        None => (body, None),
    };

    // alias or table name -> domain
    let mut tables: Vec<(String, Option<&Domain>)> = Vec::new();
    let mut named_none = false;
    for (_, entry) in split_outside_quotes(table_part, |b| b == b',') {
        let entry_str = entry.trim();
        let words: Vec<&str> = entry_str.split_whitespace().collect();
        let (name, alias) = match words.as_slice() {
            [name] => (*name, None),
            [name, kw, alias] if kw.eq_ignore_ascii_case("as") => (*name, Some(*alias)),
            [name, alias] => (*name, Some(*alias)),
            [] => {
                errors.push(malformed("missing table name", if entry_str.is_empty() { table_part } else { entry_str }));
                return;
            }
            _ => {
                errors.push(malformed("no recognizable table", entry_str));
                return;
            }
        };
        let lname = name.to_ascii_lowercase();
        if lname == EMPTY_TABLE {
            named_none = true;
            continue;
        }
        match ont.domain(&lname) {
            Some(domain) => {
                tables.push((lname.clone(), Some(domain)));
                if let Some(alias) = alias {
                    tables.push((alias.to_string(), Some(domain)));
                }
            }
            None => {
                let sub = &entry_str[..name.len()];
                errors.push(SqlError::UnknownTable {
                    table: lname.clone(),
                    span: span_of(sub),
                });
                tables.push((lname, None));
                if let Some(alias) = alias {
                    tables.push((alias.to_string(), None));
                }
            }
        }
    }
    let real: Vec<&Domain> = {
        let mut v: Vec<&Domain> = Vec::new();
        for (_, d) in &tables {
            if let Some(d) = d {
                if !v.iter().any(|x| x.name == d.name) {
                    v.push(d);
                }
            }
        }
        v
    };
    if tables.is_empty() && !named_none {
        errors.push(malformed("no recognizable table", stmt.trim()));
        return;
    }
    let Some(cond_part) = cond_part else {
        return;
    };
    if tables.is_empty() {
        // `none` with a WHERE clause still means no change.
        return;
    }

    for (_, cond) in split_keyword(cond_part, "AND") {
        let cond_trim = cond.trim();
        if cond_trim.is_empty() {
            errors.push(malformed("empty condition", cond));
            continue;
        }
        let Some(eq) = find_outside_quotes(cond_trim, b'=') else {
            errors.push(malformed("expected `column = value`", cond_trim));
            continue;
        };
        let lhs = cond_trim[..eq].trim();
        let rhs = cond_trim[eq + 1..].trim();
        if lhs.is_empty() || rhs.is_empty() {
            errors.push(malformed("expected `column = value`", cond_trim));
            continue;
        }
        let resolved = match lhs.split_once('.') {
            Some((qual, col)) => match tables.iter().find(|(n, _)| n.eq_ignore_ascii_case(qual)) {
                Some((_, Some(domain))) => domain.column(&col.to_ascii_lowercase()),
                Some((_, None)) => continue, // table already reported
                None => None,
            },
            None => {
                let col = lhs.to_ascii_lowercase();
                let hits: Vec<&SlotDef> = real.iter().filter_map(|d| d.column(&col)).collect();
                if hits.len() == 1 {
                    Some(hits[0])
                } else if real.is_empty() {
                    continue; // only unknown tables in FROM, already reported
                } else {
                    None
                }
            }
        };
        let Some(slot) = resolved else {
            errors.push(SqlError::UnknownColumn {
                column: lhs.to_string(),
                span: span_of(lhs),
            });
            continue;
        };
        let value = unquote(rhs);
        if value.trim().is_empty() {
            errors.push(malformed("empty value", rhs));
            continue;
        }
        if value.trim().eq_ignore_ascii_case(DELETE_TOKEN) {
            change.delete(slot.slot_name());
        } else {
            change.insert(slot.slot_name(), SlotUpdate::Set(normalize_value(value)));
        }
    }
}

/// Strips an optional `SELECT * FROM` head; errors if `SELECT` is present
/// but the rest of the head is not.
fn strip_select_head(stmt: &str) -> Result<&str, ()> {
    let s = stmt.trim_start();
    let Some(rest) = strip_prefix_ci(s, "select") else {
        return Ok(s);
    };
    let rest = rest.trim_start();
    let rest = rest.strip_prefix('*').ok_or(())?.trim_start();
    let rest = strip_prefix_ci(rest, "from").ok_or(())?;
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return Err(());
    }
    Ok(rest)
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    if s.len() >= prefix.len() && s.as_bytes()[..prefix.len()].eq_ignore_ascii_case(prefix.as_bytes()) {
        Some(&s[prefix.len()..])
    } else {
        None
    }
}

fn unquote(v: &str) -> &str {
    let b = v.as_bytes();
    if b.len() >= 2 && (b[0] == b'\'' || b[0] == b'"') && b[b.len() - 1] == b[0] {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

/// Byte positions of bytes outside quoted values. A quote opens only after
/// whitespace, `=`, `,` or at the start, and closes only before whitespace,
/// `;`, `,` or the end, so apostrophes inside words are literal.
fn unquoted_mask(s: &str) -> Vec<bool> {
    let b = s.as_bytes();
    let mut mask = vec![true; b.len()];
    let mut open: Option<u8> = None;
    for i in 0..b.len() {
        let c = b[i];
        match open {
            None => {
                let prev_ok = i == 0 || matches!(b[i - 1], b' ' | b'\t' | b'\n' | b'=' | b',');
                if (c == b'\'' || c == b'"') && prev_ok {
                    open = Some(c);
                    mask[i] = false;
                }
            }
            Some(q) => {
                mask[i] = false;
                let next_ok =
                    i + 1 == b.len() || matches!(b[i + 1], b' ' | b'\t' | b'\n' | b';' | b',');
                if c == q && next_ok {
                    open = None;
                }
            }
        }
    }
    mask
}

fn split_outside_quotes(s: &str, is_sep: impl Fn(u8) -> bool) -> Vec<(usize, &str)> {
    let mask = unquoted_mask(s);
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &b) in s.as_bytes().iter().enumerate() {
        if mask[i] && is_sep(b) {
            out.push((start, &s[start..i]));
            start = i + 1;
        }
    }
    out.push((start, &s[start..]));
    out
}

fn find_outside_quotes(s: &str, needle: u8) -> Option<usize> {
    let mask = unquoted_mask(s);
    s.as_bytes()
        .iter()
        .enumerate()
        .find(|(i, &b)| mask[*i] && b == needle)
        .map(|(i, _)| i)
}

/// Whitespace-bounded occurrences of `kw` outside quotes.
fn keyword_positions(s: &str, kw: &str, case_insensitive: bool) -> Vec<usize> {
    let mask = unquoted_mask(s);
    let b = s.as_bytes();
    let k = kw.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + k.len() <= b.len() {
        let matches = if case_insensitive {
            b[i..i + k.len()].eq_ignore_ascii_case(k)
        } else {
            &b[i..i + k.len()] == k
        };
        let before = i == 0 || b[i - 1].is_ascii_whitespace();
        let after = i + k.len() == b.len() || b[i + k.len()].is_ascii_whitespace();
        if matches && before && after && mask[i] {
            out.push(i);
            i += k.len();
        } else {
            i += 1;
        }
    }
    out
}

/// Splits on an uppercase keyword; lowercase `and` inside values is kept.
fn split_keyword<'a>(s: &'a str, kw: &str) -> Vec<(usize, &'a str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for p in keyword_positions(s, kw, false) {
        out.push((start, &s[start..p]));
        start = p + kw.len();
    }
    out.push((start, &s[start..]));
    out
}

/// Renders `domain-slot: value, ...;` in `(domain, slot)` lexical order.
pub fn serialize_traditional(change: &StateChange) -> String {
    let pairs: Vec<String> = change
        .iter()
        .map(|(k, v)| format!("{k}: {}", v.as_str()))
        .collect();
    format!("{};", pairs.join(", "))
}

pub fn parse_traditional(raw: &str, ont: &Ontology) -> Result<StateChange, SqlError> {
    let (change, mut errors) = parse_traditional_lenient(raw, ont);
    if errors.is_empty() {
        Ok(change)
    } else {
        Err(errors.swap_remove(0))
    }
}

/// Parses `domain-slot: value, ...` with an optional trailing `;`. Values may
/// contain commas as long as the following text does not look like a new
/// `domain-slot:` key.
pub fn parse_traditional_lenient(raw: &str, ont: &Ontology) -> (StateChange, Vec<SqlError>) {
    let mut change = StateChange::new();
    let mut errors = Vec::new();
    let region = &raw[..completion_end(raw)];
    let body = match region.find(';') {
        Some(p) => &region[..p],
        None => region,
    };
    let span_of = |s: &str| {
        let start = s.as_ptr() as usize - raw.as_ptr() as usize;
        Span {
            start,
            end: start + s.len(),
        }
    };
    if body.trim().is_empty() {
        if region.contains(';') {
            return (change, errors);
        }
        errors.push(SqlError::MalformedSql {
            reason: "empty completion".into(),
            span: span_of(region),
        });
        return (change, errors);
    }

    // Merge comma pieces that do not start a new key into the previous value.
    let mut items: Vec<&str> = Vec::new();
    let mut item_start: Option<usize> = None;
    let pieces = split_outside_quotes(body, |b| b == b',');
    for (i, (off, piece)) in pieces.iter().enumerate() {
        if looks_like_key(piece) || item_start.is_none() {
            if let Some(s) = item_start {
                let (prev_off, _) = pieces[i - 1];
                let end = prev_off + pieces[i - 1].1.len();
                items.push(&body[s..end]);
            }
            item_start = Some(*off);
        }
    }
    if let Some(s) = item_start {
        items.push(&body[s..]);
    }

    for item in items {
        let item = item.trim();
        let Some((key, value)) = item.split_once(':') else {
            errors.push(SqlError::MalformedSql {
                reason: "expected `domain-slot: value`".into(),
                span: span_of(item),
            });
            continue;
        };
        let key = key.trim();
        let Some((domain, column)) = key.split_once('-') else {
            errors.push(SqlError::MalformedSql {
                reason: "expected `domain-slot`".into(),
                span: span_of(key),
            });
            continue;
        };
        let domain_name = domain.trim().to_ascii_lowercase();
        let Some(domain) = ont.domain(&domain_name) else {
            errors.push(SqlError::UnknownTable {
                table: domain_name,
                span: span_of(domain),
            });
            continue;
        };
        let Some(slot) = domain.column(&column.trim().to_ascii_lowercase()) else {
            errors.push(SqlError::UnknownColumn {
                column: key.to_string(),
                span: span_of(key),
            });
            continue;
        };
        let value = unquote(value.trim());
        if value.is_empty() {
            errors.push(SqlError::MalformedSql {
                reason: "empty value".into(),
                span: span_of(item),
            });
        } else if value.eq_ignore_ascii_case(DELETE_TOKEN) {
            change.delete(slot.slot_name());
        } else {
            change.insert(slot.slot_name(), SlotUpdate::Set(normalize_value(value)));
        }
    }
    (change, errors)
}

fn looks_like_key(piece: &str) -> bool {
    let Some((key, _)) = piece.split_once(':') else {
        return false;
    };
    let key = key.trim();
    match key.split_once('-') {
        Some((d, s)) => {
            !d.is_empty()
                && !s.is_empty()
                && d.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ' ')
        }
        None => false,
    }
}
