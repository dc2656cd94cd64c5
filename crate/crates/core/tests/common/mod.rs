#![allow(dead_code)]

pub mod oracles;

use icdst::ontology::Ontology;
use icdst::pipeline::{DialogueRecord, Turn};
use icdst::state::{DialogueState, SlotName};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn state(pairs: &[(&str, &str)]) -> DialogueState {
    pairs
        .iter()
        .map(|(k, v)| (SlotName::parse(k).unwrap(), v.to_string()))
        .collect()
}

/// Dialogues over the bundled ontology. Each turn adds, changes or removes
/// slots at random. Every user utterance carries a `d{i}t{t}` tag so a test
/// backend can tell which turn a prompt is for.
pub fn synthetic_dialogues(n: usize, seed: u64, ont: &Ontology) -> Vec<DialogueRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<_> = ont.slots().collect();
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=6);
            let mut current = DialogueState::new();
            let mut turns = Vec::with_capacity(len);
            for t in 0..len {
                let mut next = current.clone();
                for _ in 0..rng.gen_range(0..=2) {
                    let def = slots.choose(&mut rng).unwrap();
                    let value = def.values.choose(&mut rng).unwrap();
                    next.insert(def.slot_name(), value);
                }
                if t > 0 && rng.gen_bool(0.15) {
                    if let Some((slot, _)) = current.iter().next() {
                        next = next.iter().filter(|(s, _)| *s != slot).map(|(s, v)| (s.clone(), v.to_string())).collect();
                    }
                }
                let mentioned: Vec<String> = next.iter().map(|(_, v)| v.to_string()).collect();
                turns.push(Turn {
                    system: if t == 0 { String::new() } else { format!("anything else for d{i}t{t} ?") },
                    user: format!("d{i}t{t} i want {}", mentioned.join(" ")),
                    gold_state: next.clone(),
                });
                current = next;
            }
            DialogueRecord::new(format!("syn-{seed}-{i}"), turns).unwrap()
        })
        .collect()
}

/// Writes dialogues as a line file the CLI can read.
pub fn write_dialogues(dialogues: &[DialogueRecord], path: &std::path::Path) {
    icdst::pipeline::save_dialogues(dialogues, path).unwrap();
}

/// Answers by the `d{i}t{t}` tag of the test turn, which is the first word
/// after the last `Q: [user]` in the prompt. Untagged prompts get garbage.
pub struct TaggedBackend {
    pub answers: std::collections::HashMap<String, String>,
}

impl TaggedBackend {
    pub fn tag_of(prompt: &str) -> Option<&str> {
        let rest = &prompt[prompt.rfind("Q: [user] ")? + "Q: [user] ".len()..];
        rest.split_whitespace().next()
    }
}

impl icdst::lm::CompletionBackend for TaggedBackend {
    fn complete(&self, req: &icdst::lm::CompletionRequest) -> Result<icdst::lm::CompletionResult, icdst::lm::LmError> {
        let text = Self::tag_of(&req.prompt)
            .and_then(|t| self.answers.get(t))
            .cloned()
            .unwrap_or_else(|| "<garbage>".into());
        Ok(icdst::lm::CompletionResult {
            text,
            finish_reason: icdst::lm::FinishReason::Stop,
            latency_ms: 0,
        })
    }
}

/// Gold completions for every tagged turn of the synthetic dialogues.
pub fn gold_answers(
    dialogues: &[DialogueRecord],
    ont: &Ontology,
) -> std::collections::HashMap<String, String> {
    let mut out = std::collections::HashMap::new();
    for (i, d) in dialogues.iter().enumerate() {
        for (t, change) in d.gold_changes.iter().enumerate() {
            let text = icdst::pipeline::gold_completion(
                change,
                icdst::prompt::PromptFormat::Sql,
                icdst::sql::MultiDomainStyle::PerDomainStatements,
                ont,
            )
            .unwrap();
            out.insert(format!("d{i}t{t}"), text);
        }
    }
    out
}
