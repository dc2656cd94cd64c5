//! Task schema: domains, slots and value inventories, plus the two prompt
//! renderings (SQL tables and the flat `domain-slot: values` listing).

use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::state::{collapse, SlotName, DONTCARE};

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("reading ontology {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ontology parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),
    #[error("duplicate slot `{0}`")]
    DuplicateSlot(SlotName),
    #[error("categorical slot `{0}` has an empty value inventory")]
    EmptyInventory(SlotName),
    #[error("slot `{slot}`: value {value:?} is not lowercase, trimmed and single-spaced")]
    UnnormalizedValue { slot: SlotName, value: String },
    #[error("domain `{domain}` example row {row}: expected {expected} values, found {found}")]
    RowArity {
        domain: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("domain `{domain}` example row {row}: {value:?} is not a valid value of `{slot}`")]
    RowValue {
        domain: String,
        row: usize,
        slot: SlotName,
        value: String,
    },
    #[error("invalid identifier {0:?}")]
    BadIdentifier(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Categorical,
    Open,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotDef {
    pub domain: String,
    pub name: String,
    pub kind: SlotKind,
    /// Full closed set for categorical slots, sample values for open ones.
    pub values: Vec<String>,
    pub display_name: Option<String>,
    pub int_like: bool,
    pub sql_column: Option<String>,
}

impl SlotDef {
    pub fn slot_name(&self) -> SlotName {
        SlotName::new(&self.domain, &self.name)
    }

    /// Column name shown in prompts.
    pub fn column(&self) -> &str {
        self.display_name.as_deref().unwrap_or(&self.name)
    }

    /// Membership is only defined for categorical slots; open slots accept
    /// anything. `dontcare` is accepted everywhere.
    pub fn accepts(&self, value: &str) -> bool {
        match self.kind {
            SlotKind::Open => true,
            SlotKind::Categorical => value == DONTCARE || self.values.iter().any(|v| v == value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum ExampleRow {
    Verbatim(String),
    Values(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub name: String,
    pub slots: Vec<SlotDef>,
    pub example_header: Option<String>,
    pub example_rows: Vec<ExampleRow>,
}

impl Domain {
    pub fn slot(&self, name: &str) -> Option<&SlotDef> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Resolves a prompt column (display name or canonical name).
    pub fn column(&self, column: &str) -> Option<&SlotDef> {
        self.slots
            .iter()
            .find(|s| s.display_name.as_deref() == Some(column))
            .or_else(|| self.slot(column))
    }
}

/// Immutable after construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ontology {
    domains: Vec<Domain>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OntologyFile {
    #[serde(default)]
    domains: Vec<DomainFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainFile {
    name: String,
    #[serde(default)]
    slots: Vec<SlotFile>,
    #[serde(default)]
    example_header: Option<String>,
    #[serde(default)]
    example_rows: Vec<ExampleRow>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotFile {
    name: String,
    kind: SlotKind,
    #[serde(default)]
    values: Vec<String>,
    #[serde(default)]
    display_name: Option<String>,
    #[serde(default)]
    int_like: bool,
    #[serde(default)]
    sql_column: Option<String>,
}

const MULTIWOZ: &str = include_str!("../fixtures/multiwoz.toml");
const MULTIWOZ_ZERO_SHOT: &str = include_str!("../fixtures/multiwoz_zero_shot.toml");

impl Ontology {
    /// The bundled five-domain MultiWOZ schema.
    pub fn multiwoz() -> Self {
        Self::from_toml(MULTIWOZ).expect("bundled ontology is valid")
    }

    /// The bundled MultiWOZ schema with zero-shot display names.
    pub fn multiwoz_zero_shot() -> Self {
        Self::from_toml(MULTIWOZ_ZERO_SHOT).expect("bundled ontology is valid")
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let text = std::fs::read_to_string(path).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|span| line_col(text, span.start))
                .unwrap_or((0, 0));
            OntologyError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        Self::from_domains(file.domains.into_iter().map(|d| Domain {
            slots: d
                .slots
                .into_iter()
                .map(|s| SlotDef {
                    domain: d.name.clone(),
                    name: s.name,
                    kind: s.kind,
                    values: s.values,
                    display_name: s.display_name,
                    int_like: s.int_like,
                    sql_column: s.sql_column,
                })
                .collect(),
            name: d.name,
            example_header: d.example_header,
            example_rows: d.example_rows,
        }))
    }

    /// Validates and assembles an ontology.
    pub fn from_domains(domains: impl IntoIterator<Item = Domain>) -> Result<Self, OntologyError> {
        let domains: Vec<Domain> = domains.into_iter().collect();
        let mut seen_domains = HashSet::new();
        let mut seen_slots = HashSet::new();
        for domain in &domains {
            check_identifier(&domain.name)?;
            if !seen_domains.insert(domain.name.as_str()) {
                return Err(OntologyError::DuplicateDomain(domain.name.clone()));
            }
            for slot in &domain.slots {
                check_identifier(&slot.name)?;
                let key = slot.slot_name();
                if !seen_slots.insert(key.clone()) {
                    return Err(OntologyError::DuplicateSlot(key));
                }
                if slot.kind == SlotKind::Categorical && slot.values.is_empty() {
                    return Err(OntologyError::EmptyInventory(key));
                }
                if let Some(value) = slot.values.iter().find(|v| collapse(v) != **v) {
                    return Err(OntologyError::UnnormalizedValue {
                        slot: key,
                        value: value.clone(),
                    });
                }
            }
            for (i, row) in domain.example_rows.iter().enumerate() {
                let ExampleRow::Values(values) = row else {
                    continue;
                };
                if values.len() != domain.slots.len() {
                    return Err(OntologyError::RowArity {
                        domain: domain.name.clone(),
                        row: i + 1,
                        expected: domain.slots.len(),
                        found: values.len(),
                    });
                }
                for (slot, value) in domain.slots.iter().zip(values) {
                    if !slot.accepts(value) {
                        return Err(OntologyError::RowValue {
                            domain: domain.name.clone(),
                            row: i + 1,
                            slot: slot.slot_name(),
                            value: value.clone(),
                        });
                    }
                }
            }
        }
        Ok(Self { domains })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn slots(&self) -> impl Iterator<Item = &SlotDef> {
        self.domains.iter().flat_map(|d| d.slots.iter())
    }

    pub fn slot(&self, name: &SlotName) -> Option<&SlotDef> {
        self.domain(name.domain())?.slot(name.slot())
    }

    pub fn contains(&self, name: &SlotName) -> bool {
        self.slot(name).is_some()
    }

    /// Sort key placing slots in ontology order; unknown slots sort last.
    pub fn order_key(&self, name: &SlotName) -> (usize, usize) {
        let Some(d) = self.domain_index(name.domain()) else {
            return (usize::MAX, usize::MAX);
        };
        let s = self.domains[d]
            .slots
            .iter()
            .position(|s| s.name == name.slot())
            .unwrap_or(usize::MAX);
        (d, s)
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

fn check_identifier(id: &str) -> Result<(), OntologyError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    if ok {
        Ok(())
    } else {
        Err(OntologyError::BadIdentifier(id.to_string()))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

/// Renders every domain as a `CREATE TABLE` block followed by a commented
/// `SELECT * FROM <domain> LIMIT n;` sample of example rows.
pub fn render_schema_sql(ont: &Ontology) -> String {
    ont.domains
        .iter()
        .map(render_table)
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_table(domain: &Domain) -> String {
    let columns = domain
        .slots
        .iter()
        .map(|s| format!("  {}", column_definition(s)))
        .collect::<Vec<_>>()
        .join(",\n");
    let mut out = format!("CREATE TABLE {}(\n{columns}\n)", domain.name);
    if !domain.example_rows.is_empty() {
        let n = domain.example_rows.len();
        let header = domain.example_header.clone().unwrap_or_else(|| {
            domain
                .slots
                .iter()
                .map(SlotDef::column)
                .collect::<Vec<_>>()
                .join(" ")
        });
        out.push_str(&format!(
            "\n/*\n{n} example rows:\nSELECT * FROM {} LIMIT {n};\n{header}\n",
            domain.name
        ));
        for row in &domain.example_rows {
            match row {
                ExampleRow::Verbatim(line) => out.push_str(line),
                ExampleRow::Values(values) => out.push_str(&values.join(" ")),
            }
            out.push('\n');
        }
        out.push_str("*/");
    }
    out
}

fn column_definition(slot: &SlotDef) -> String {
    if let Some(verbatim) = &slot.sql_column {
        return verbatim.clone();
    }
    let column = slot.column();
    let ty = if slot.int_like { "int" } else { "text" };
    match slot.kind {
        SlotKind::Open => format!("{column} {ty}"),
        SlotKind::Categorical => {
            let inventory = dontcare_first(&slot.values).join(", ");
            format!("{column} {ty} CHECK ({column} IN ({inventory}))")
        }
    }
}

fn dontcare_first(values: &[String]) -> Vec<&str> {
    let mut out: Vec<&str> = values
        .iter()
        .filter(|v| *v == DONTCARE)
        .map(String::as_str)
        .collect();
    out.extend(values.iter().filter(|v| *v != DONTCARE).map(String::as_str));
    out
}

/// Renders one `domain-slot: v1, v2, ...` line per slot, blank line between
/// domains. Open slots end with `, etc.`.
pub fn render_schema_traditional(ont: &Ontology) -> String {
    ont.domains
        .iter()
        .map(|d| {
            d.slots
                .iter()
                .map(|s| {
                    let values = match s.kind {
                        SlotKind::Categorical => dontcare_first(&s.values),
                        SlotKind::Open => s.values.iter().map(String::as_str).collect(),
                    };
                    let mut line = format!("{}-{}: {}", d.name, s.name, values.join(", "));
                    if s.kind == SlotKind::Open {
                        line.push_str(if values.is_empty() { "etc." } else { ", etc." });
                    }
                    line
                })
                .collect::<Vec<_>>()
                .join("\n")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}
