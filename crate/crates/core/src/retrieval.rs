//! Exemplar pools and retrievers: cosine k-NN over embeddings, BM25 over
//! context text, uniform random sampling and the state-change oracle. Also
//! mines contrastive training pairs for an external embedding trainer.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::truncate_front;
use crate::state::{collapse, StateChange};

/// Retriever input cap in length units.
pub const MAX_RETRIEVER_UNITS: f64 = 512.0;

/// BM25 term-frequency saturation.
pub const BM25_K1: f64 = 1.2;
/// BM25 length normalization.
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("vector dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cosine similarity is undefined for an all-zero vector")]
    ZeroVector,
    #[error("record `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("duplicate exemplar id `{0}`")]
    DuplicateId(String),
    #[error("pool has {size} records, need at least {needed}")]
    PoolTooSmall { size: usize, needed: usize },
    #[error("cannot draw {k} records from a pool of {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("unknown exemplar id `{0}`")]
    UnknownId(String),
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
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A labeled turn `(e_i, c_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub id: String,
    pub context_text: String,
    pub change: StateChange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl ExemplarRecord {
    /// Builds a record, keeping only the last [`MAX_RETRIEVER_UNITS`] of the
    /// context text.
    pub fn new(id: impl Into<String>, context_text: &str, change: StateChange) -> Self {
        Self {
            id: id.into(),
            context_text: truncate_front(context_text, MAX_RETRIEVER_UNITS),
            change,
            embedding: None,
        }
    }
}

/// Immutable after construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExemplarPool {
    records: Vec<ExemplarRecord>,
    embedding_dim: Option<usize>,
}

impl ExemplarPool {
    pub fn new(records: Vec<ExemplarRecord>) -> Result<Self, RetrievalError> {
        let mut ids = HashSet::new();
        let mut dim = None;
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(RetrievalError::DuplicateId(r.id.clone()));
            }
            if let Some(v) = &r.embedding {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(RetrievalError::DimensionMismatch {
                            expected: d,
                            found: v.len(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            records,
            embedding_dim: dim,
        })
    }

    pub fn records(&self) -> &[ExemplarRecord] {
        &self.records
    }

    pub fn get(&self, index: usize) -> &ExemplarRecord {
        &self.records[index]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    fn embedding(&self, index: usize) -> Result<&[f64], RetrievalError> {
        self.records[index]
            .embedding
            .as_deref()
            .ok_or_else(|| RetrievalError::MissingEmbedding(self.records[index].id.clone()))
    }

    /// Embeds every record's context text.
    pub fn with_embeddings(&self, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let records = self
            .records
            .iter()
            .map(|r| ExemplarRecord {
                embedding: Some(embedder.embed(&r.context_text)),
                ..r.clone()
            })
            .collect();
        Self::new(records)
    }

    /// Reads line-delimited JSON records.
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ExemplarRecord =
                serde_json::from_str(&line).map_err(|e| RetrievalError::Format {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }
}

/// A retrieved record: its pool index and score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
}

fn rank(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    hits.sort_by(compare_hits);
    hits.truncate(k);
    hits
}

/// `cos(x, e)`.
pub fn cosine_score(x: &[f64], e: &[f64]) -> Result<f64, RetrievalError> {
    if x.len() != e.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: x.len(),
            found: e.len(),
        });
    }
    let dot: f64 = x.iter().zip(e).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ne = e.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ne == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nx * ne)).clamp(-1.0, 1.0))
}

/// Top-`k` records by cosine similarity to `query`.
pub fn knn(pool: &ExemplarPool, query: &[f64], k: usize) -> Result<Vec<Hit>, RetrievalError> {
    let hits = (0..pool.len())
        .map(|i| {
            Ok(Hit {
                index: i,
                score: cosine_score(query, pool.embedding(i)?)?,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(rank(hits, k))
}

/// Okapi BM25 index over the records' context text.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    docs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

fn tokenize(text: &str) -> Vec<String> {
    collapse(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

impl Bm25Index {
    pub fn new(pool: &ExemplarPool) -> Self {
        Self::from_texts(pool.records().iter().map(|r| r.context_text.as_str()))
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut docs = Vec::new();
        let mut lengths = Vec::new();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            let tokens = tokenize(text);
            lengths.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            docs.push(tf);
        }
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
        };
        Self {
            docs,
            lengths,
            doc_freq,
            avg_len,
        }
    }

    /// `ln((N - n + 0.5) / (n + 0.5) + 1)`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = *self.doc_freq.get(term).unwrap_or(&0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of document `doc`. Repeated query terms count once per occurrence.
    pub fn score(&self, query_tokens: &[String], doc: usize) -> f64 {
        if self.avg_len == 0.0 {
            return 0.0;
        }
        let len_norm = 1.0 - BM25_B + BM25_B * self.lengths[doc] as f64 / self.avg_len;
        query_tokens
            .iter()
            .map(|t| {
                let tf = *self.docs[doc].get(t).unwrap_or(&0) as f64;
                if tf == 0.0 {
                    0.0
                } else {
                    self.idf(t) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * len_norm)
                }
            })
            .sum()
    }

    pub fn query(&self, text: &str, k: usize) -> Vec<Hit> {
        let tokens = tokenize(text);
        let hits = (0..self.docs.len())
            .map(|i| Hit {
                index: i,
                score: self.score(&tokens, i),
            })
            .collect();
        rank(hits, k)
    }
}

/// One-off BM25 query; build a [`Bm25Index`] to reuse it.
pub fn bm25_query(pool: &ExemplarPool, query_text: &str, k: usize) -> Vec<Hit> {
    Bm25Index::new(pool).query(query_text, k)
}

fn set_f1<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

/// Mean of the slot-name F1 and the slot-value-pair F1 of two changes.
/// Two empty changes score 1, one empty change scores 0.
pub fn change_similarity(a: &StateChange, b: &StateChange) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let slots_a: BTreeSet<_> = a.slots().collect();
    let slots_b: BTreeSet<_> = b.slots().collect();
    let pairs_a: BTreeSet<_> = a.iter().collect();
    let pairs_b: BTreeSet<_> = b.iter().collect();
    (set_f1(&slots_a, &slots_b) + set_f1(&pairs_a, &pairs_b)) / 2.0
}

/// Top-`k` records by [`change_similarity`] to the gold change.
pub fn oracle_retrieve(pool: &ExemplarPool, gold: &StateChange, k: usize) -> Vec<Hit> {
    let hits = pool
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| Hit {
            index: i,
            score: change_similarity(gold, &r.change),
        })
        .collect();
    rank(hits, k)
}

/// `k` distinct pool indices drawn uniformly at random.
pub fn random_retrieve(pool_size: usize, k: usize, seed: u64) -> Result<Vec<usize>, RetrievalError> {
    if k > pool_size {
        return Err(RetrievalError::KTooLarge { k, size: pool_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool_size, k).into_vec())
}

/// Neighborhood and selection sizes for pair mining. Fractions are of the
/// `N - 1` other records, rounded up; absolute counts override them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub neighbor_frac: f64,
    pub select_frac: f64,
    pub neighbor_count: Option<usize>,
    pub select_count: Option<usize>,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            neighbor_frac: 0.10,
            select_frac: 0.05,
            neighbor_count: None,
            select_count: None,
        }
    }
}

fn frac_count(frac: f64, others: usize) -> usize {
    (frac * others as f64 - 1e-9).ceil().max(0.0) as usize
}

impl MineConfig {
    pub fn neighbors(&self, pool_size: usize) -> usize {
        let others = pool_size.saturating_sub(1);
        self.neighbor_count
            .unwrap_or_else(|| frac_count(self.neighbor_frac, others))
            .min(others)
    }

    pub fn selected(&self, pool_size: usize) -> usize {
        self.select_count
            .unwrap_or_else(|| frac_count(self.select_frac, pool_size.saturating_sub(1)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub query_id: String,
    /// Best first.
    pub positives: Vec<String>,
    /// Worst first.
    pub negatives: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub entries: Vec<PairEntry>,
}

/// For every record, takes its nearest embedding neighbors, ranks them by
/// state-change similarity to the record's own change and keeps the top
/// and bottom of that ranking as positives and negatives.
pub fn mine_contrastive_pairs(
    pool: &ExemplarPool,
    cfg: &MineConfig,
) -> Result<MinedPairs, RetrievalError> {
    let n = pool.len();
    if n < 2 {
        return Err(RetrievalError::PoolTooSmall { size: n, needed: 2 });
    }
    let neighbors = cfg.neighbors(n);
    let select = cfg.selected(n);
    let entries = (0..n)
        .into_par_iter()
        .map(|q| {
            let query = pool.embedding(q)?;
            let mut near = Vec::with_capacity(n - 1);
            for j in (0..n).filter(|&j| j != q) {
                near.push(Hit {
                    index: j,
                    score: cosine_score(query, pool.embedding(j)?)?,
                });
            }
            let near = rank(near, neighbors);
            let own = &pool.get(q).change;
            let by_change = rank(
                near.iter()
                    .map(|h| Hit {
                        index: h.index,
                        score: change_similarity(own, &pool.get(h.index).change),
                    })
                    .collect(),
                usize::MAX,
            );
            let take = if by_change.len() < 2 * select {
                by_change.len() / 2
            } else {
                select
            };
            let id = |h: &Hit| pool.get(h.index).id.clone();
            Ok(PairEntry {
                query_id: pool.get(q).id.clone(),
                positives: by_change[..take].iter().map(id).collect(),
                negatives: by_change[by_change.len() - take..].iter().rev().map(id).collect(),
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(MinedPairs { entries })
}

#[derive(Serialize, Deserialize)]
struct PairsHeader {
    format: String,
    version: u32,
    entries: usize,
}

const PAIRS_FORMAT: &str = "icdst-mined-pairs";

/// Writes a header line followed by one JSON entry per query.
pub fn export_pairs(pairs: &MinedPairs, path: &Path) -> Result<(), RetrievalError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_pairs(pairs, &mut out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn write_pairs(pairs: &MinedPairs, out: &mut impl Write) -> std::io::Result<()> {
    let header = PairsHeader {
        format: PAIRS_FORMAT.into(),
        version: 1,
        entries: pairs.entries.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for e in &pairs.entries {
        writeln!(out, "{}", serde_json::to_string(e).expect("entry serializes"))?;
    }
    Ok(())
}

pub fn import_pairs(path: &Path) -> Result<MinedPairs, RetrievalError> {
    let file = File::open(path).map_err(io_err(path))?;
    let format_err = |line: usize, message: String| RetrievalError::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: PairsHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line.map_err(io_err(path))?)
            .map_err(|e| format_err(1, e.to_string()))?,
        None => return Err(format_err(1, "missing header".into())),
    };
    if header.format != PAIRS_FORMAT {
        return Err(format_err(1, format!("unexpected format {:?}", header.format)));
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| format_err(i + 1, e.to_string()))?);
    }
    if entries.len() != header.entries {
        return Err(format_err(1, format!("header announces {} entries, found {}", header.entries, entries.len())));
    }
    Ok(MinedPairs { entries })
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

/// Attaches vectors from a `{id, vector}` line file. Every record must get
/// exactly one vector and all vectors must have the same length.
pub fn import_embeddings(pool: &ExemplarPool, path: &Path) -> Result<ExemplarPool, RetrievalError> {
    let file = File::open(path).map_err(io_err(path))?;
    let index: HashMap<&str, usize> = pool
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut vectors: Vec<Option<Vec<f64>>> = vec![None; pool.len()];
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: EmbeddingLine = serde_json::from_str(&line).map_err(|e| RetrievalError::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match dim {
            None => dim = Some(entry.vector.len()),
            Some(d) if d != entry.vector.len() => {
                return Err(RetrievalError::DimensionMismatch {
                    expected: d,
                    found: entry.vector.len(),
                })
            }
            _ => {}
        }
        let slot = *index
            .get(entry.id.as_str())
            .ok_or_else(|| RetrievalError::UnknownId(entry.id.clone()))?;
        if vectors[slot].replace(entry.vector).is_some() {
            return Err(RetrievalError::DuplicateId(entry.id));
        }
    }
    let records = pool
        .records()
        .iter()
        .zip(vectors)
        .map(|(r, v)| match v {
            Some(v) => Ok(ExemplarRecord {
                embedding: Some(v),
                ..r.clone()
            }),
            None => Err(RetrievalError::MissingEmbedding(r.id.clone())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    ExemplarPool::new(records)
}

pub fn export_embeddings(pool: &ExemplarPool, path: &Path) -> Result<(), RetrievalError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for (i, r) in pool.records().iter().enumerate() {
        let line = EmbeddingLine {
            id: r.id.clone(),
            vector: pool.embedding(i)?.to_vec(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("vectors serialize")).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Maps context text to a fixed-length vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of lowercase word unigrams. A stand-in for a
/// trained sentence encoder in tests and offline runs.
#[derive(Clone, Copy, Debug)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let h = fnv1a(token.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        v
    }
}

/// Descending score, ties by ascending pool index.
pub fn compare_hits(a: &Hit, b: &Hit) -> Ordering {
    // Adding zero folds -0.0 into 0.0 so the two tie.
    (b.score + 0.0).total_cmp(&(a.score + 0.0)).then(a.index.cmp(&b.index))
}
