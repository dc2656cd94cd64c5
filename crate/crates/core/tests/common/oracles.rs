//! Exhaustive re-implementations used as test oracles.

use std::collections::BTreeSet;

use icdst::retrieval::ExemplarRecord;
use icdst::state::{SlotName, SlotUpdate, StateChange};
use rand::Rng;

pub fn record(id: usize, text: &str, change: StateChange, embedding: Option<Vec<f64>>) -> ExemplarRecord {
    ExemplarRecord {
        embedding,
        ..ExemplarRecord::new(format!("r{id}"), text, change)
    }
}

pub fn random_change(rng: &mut impl Rng) -> StateChange {
    let mut c = StateChange::new();
    for slot in ["area", "food", "pricerange"] {
        match rng.gen_range(0..4) {
            0 => {}
            1 => c.insert(SlotName::new("restaurant", slot), SlotUpdate::Set("x".into())),
            2 => c.insert(SlotName::new("restaurant", slot), SlotUpdate::Set("y".into())),
            _ => c.insert(SlotName::new("restaurant", slot), SlotUpdate::Delete),
        }
    }
    c
}

pub fn random_text(rng: &mut impl Rng) -> String {
    const WORDS: [&str; 6] = ["cheap", "hotel", "east", "taxi", "to", "the"];
    (0..rng.gen_range(1..8)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1..=1) as f64).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

/// Sorts (index, score) by score descending, index ascending, and keeps k.
pub fn brute_rank(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn brute_bm25(docs: &[Vec<&str>], query: &[&str], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let df = |t: &str| docs.iter().filter(|d| d.contains(&t)).count() as f64;
    docs.iter()
        .map(|d| {
            let norm = 1.0 - b + b * d.len() as f64 / avg;
            query
                .iter()
                .map(|t| {
                    let tf = d.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let idf = ((n - df(t) + 0.5) / (df(t) + 0.5) + 1.0).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * norm)
                })
                .sum()
        })
        .collect()
}

pub fn brute_similarity(a: &StateChange, b: &StateChange) -> f64 {
    fn f1<T: Ord>(x: &BTreeSet<T>, y: &BTreeSet<T>) -> f64 {
        if x.is_empty() && y.is_empty() {
            return 1.0;
        }
        let inter = x.intersection(y).count() as f64;
        let p = if x.is_empty() { 0.0 } else { inter / x.len() as f64 };
        let r = if y.is_empty() { 0.0 } else { inter / y.len() as f64 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
    if a.is_empty() != b.is_empty() {
        return 0.0;
    }
    let sa: BTreeSet<_> = a.iter().map(|(s, _)| s.clone()).collect();
    let sb: BTreeSet<_> = b.iter().map(|(s, _)| s.clone()).collect();
    let pa: BTreeSet<_> = a.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
    let pb: BTreeSet<_> = b.iter().map(|(s, v)| (s.clone(), v.clone())).collect();
    (f1(&sa, &sb) + f1(&pa, &pb)) / 2.0
}

/// Top-neighbor positives and negatives by direct N² enumeration.
pub fn brute_mine(records: &[ExemplarRecord], neighbors: usize, select: usize) -> Vec<(Vec<String>, Vec<String>)> {
    (0..records.len())
        .map(|q| {
            let near = brute_rank(
                (0..records.len())
                    .filter(|&j| j != q)
                    .map(|j| {
                        (j, brute_cosine(records[q].embedding.as_ref().unwrap(), records[j].embedding.as_ref().unwrap()))
                    })
                    .collect(),
                neighbors,
            );
            let by_change = brute_rank(
                near.iter().map(|&(j, _)| (j, brute_similarity(&records[q].change, &records[j].change))).collect(),
                usize::MAX,
            );
            let take = if by_change.len() < 2 * select { by_change.len() / 2 } else { select };
            let ids: Vec<String> = by_change.iter().map(|(j, _)| records[*j].id.clone()).collect();
            let pos = ids[..take].to_vec();
            let neg = ids[ids.len() - take..].iter().rev().cloned().collect();
            (pos, neg)
        })
        .collect()
}
