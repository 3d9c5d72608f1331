//! Closed-world tokenizer over the template and attribute vocabulary.
//!
//! The vocabulary is fixed at build time (well under 512 symbols) and covers
//! the task templates, target grammar, synthetic attribute words, and the four
//! special tokens. Splitting treats `,.?:` as standalone tokens and special
//! tokens as indivisible even when glued to words (`<p>the`).

use std::collections::HashMap;

use crate::error::{Result, X2Error};
use crate::prompt::{TOK_P_CLOSE, TOK_P_OPEN, TOK_REGION, TOK_SEG};

pub const TOK_PAD: &str = "<pad>";
pub const TOK_BOS: &str = "<bos>";
pub const TOK_EOS: &str = "<eos>";
pub const TOK_UNK: &str = "<unk>";

const SPECIALS: [&str; 8] = [
    TOK_PAD, TOK_BOS, TOK_EOS, TOK_UNK, TOK_P_OPEN, TOK_P_CLOSE, TOK_SEG, TOK_REGION,
];

const PUNCT: [char; 4] = [',', '.', '?', ':'];

/// Every plain word the templates, targets, and synthetic annotations can emit.
const WORDS: &[&str] = &[
    // template words
    "can", "you", "segment", "the", "image", "based", "on", "following", "categories",
    "please", "output", "segmentation", "masks", "provide", "for", "this", "video", "these",
    "could", "create", "according", "to", "specified", "identify", "and", "in", "what", "is",
    "corresponding", "mask", "brief", "description", "of", "interleaved", "phrases", "give",
    "me", "explanation", "respond", "with", "regions", "that", "highlight",
    // target grammar
    "sure", "result", "shows", "there",
    // attributes and categories of the synthetic world
    "red", "green", "blue", "small", "large", "square", "circle", "triangle",
    "leftmost", "rightmost", "topmost", "bottommost",
    // reasoning-question words
    "object", "found", "be", "a", "an",
];

/// Fixed vocabulary with deterministic ids.
pub struct Vocab {
    id_of: HashMap<String, u32>,
    tok_of: Vec<String>,
}

impl Vocab {
    pub fn core() -> Self {
        let mut tok_of: Vec<String> = Vec::new();
        for s in SPECIALS {
            tok_of.push(s.to_string());
        }
        for p in PUNCT {
            tok_of.push(p.to_string());
        }
        for w in WORDS {
            tok_of.push((*w).to_string());
        }
        assert!(tok_of.len() <= 512, "vocabulary exceeds the closed-world budget");
        let id_of = tok_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { id_of, tok_of }
    }

    pub fn len(&self) -> usize {
        self.tok_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tok_of.is_empty()
    }

    pub fn id(&self, tok: &str) -> u32 {
        // Words are matched case-insensitively; specials and punctuation as-is.
        self.id_of
            .get(tok)
            .or_else(|| self.id_of.get(tok.to_lowercase().as_str()))
            .copied()
            .unwrap_or(self.id_of[TOK_UNK])
    }

    pub fn token(&self, id: u32) -> &str {
        self.tok_of
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(TOK_UNK)
    }

    pub fn pad_id(&self) -> u32 {
        self.id_of[TOK_PAD]
    }
    pub fn bos_id(&self) -> u32 {
        self.id_of[TOK_BOS]
    }
    pub fn eos_id(&self) -> u32 {
        self.id_of[TOK_EOS]
    }
    pub fn seg_id(&self) -> u32 {
        self.id_of[TOK_SEG]
    }
    pub fn region_id(&self) -> u32 {
        self.id_of[TOK_REGION]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Encode, but reject any token outside the closed vocabulary.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        let toks = split_tokens(text);
        let unk = self.id_of[TOK_UNK];
        let mut ids = Vec::with_capacity(toks.len());
        for t in &toks {
            let id = self.id(t);
            if id == unk && t != TOK_UNK {
                return Err(X2Error::Prompt(format!("token `{t}` not in vocabulary")));
            }
            ids.push(id);
        }
        Ok(ids)
    }
}

/// Split text into tokens: whitespace-separated, punctuation split off, and
/// the four structural special tokens kept whole even when glued to words.
pub fn split_tokens(text: &str) -> Vec<String> {
    let specials = [TOK_P_OPEN, TOK_P_CLOSE, TOK_SEG, TOK_REGION];
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let hit = specials
                .iter()
                .filter_map(|s| rest.find(s).map(|i| (i, *s)))
                .min_by_key(|(i, _)| *i);
            match hit {
                Some((i, s)) => {
                    push_plain(&mut out, &rest[..i]);
                    out.push(s.to_string());
                    rest = &rest[i + s.len()..];
                }
                None => {
                    push_plain(&mut out, rest);
                    rest = "";
                }
            }
        }
    }
    out
}

fn push_plain(out: &mut Vec<String>, piece: &str) {
    let mut word = String::new();
    for c in piece.chars() {
        if PUNCT.contains(&c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{render_prompt, render_target, Condition, TaskId, ALL_TASKS};

    #[test]
    fn splits_glued_specials_and_punctuation() {
        let toks = split_tokens("segment the <p>the right man</p> in this image.");
        assert_eq!(
            toks,
            vec!["segment", "the", "<p>", "the", "right", "man", "</p>", "in", "this", "image", "."]
        );
    }

    #[test]
    fn all_templates_encode_without_unknowns() {
        let vocab = Vocab::core();
        for task in ALL_TASKS {
            let (conds, phrases): (Vec<Condition>, Vec<String>) = if task.is_gcg() {
                (vec![], vec!["a small red square".into()])
            } else if task.is_region_task() {
                (vec![Condition::RegionPlaceholder { prompt_ref: 0 }], vec![])
            } else if matches!(task, TaskId::IRef | TaskId::VRef | TaskId::IRea | TaskId::VRea) {
                (vec![Condition::FreeText("the leftmost blue triangle".into())], vec![])
            } else {
                (vec![Condition::CategoryName("circle".into())], vec![])
            };
            let rec = render_prompt(task, &conds).unwrap();
            vocab.encode_strict(&rec.instruction_text).unwrap_or_else(|e| {
                panic!("{}: {e}", task.name());
            });
            let tgt = render_target(task, &conds, &phrases).unwrap();
            vocab.encode_strict(&tgt).unwrap();
        }
    }

    #[test]
    fn vocab_within_budget_and_stable() {
        let v = Vocab::core();
        assert!(v.len() <= 512);
        assert_eq!(v.id(TOK_SEG), v.seg_id());
        assert_eq!(v.token(v.region_id()), TOK_REGION);
        // round trip on a plain sentence
        let ids = v.encode("Please segment the video.");
        assert_eq!(v.decode(&ids), vec!["please", "segment", "the", "video", "."]);
    }
}
