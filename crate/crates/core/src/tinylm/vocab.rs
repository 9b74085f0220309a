//! Word-level vocabulary with fixed reserved ids.
//!
//! Reserved ids are stable across runs: PAD, UNK, BOS, EOS, the option
//! letters A-Z, the digits 0-9, then the template words in a fixed order.
//! Corpus words follow, assigned by (frequency desc, lexicographic).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
const FIRST_LETTER_ID: u32 = 4;
const FIRST_FREE_ID: u32 = 40;

/// Token id for option letter `index` (0 = "A").
pub fn letter_id(index: usize) -> u32 {
    debug_assert!(index < 26);
    FIRST_LETTER_ID + index as u32
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Split text into word-level tokens: alphabetic runs stay whole, digits
/// split one per token, punctuation becomes single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if ch.is_ascii_digit() || ".,:;!?".contains(ch) {
                out.push(ch.to_string());
            }
            // everything else separates tokens
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocabulary {
    /// Build from a corpus. `template_words` are reserved immediately after
    /// the fixed specials so their ids do not depend on corpus statistics.
    pub fn build(corpus: &[String], template_words: &[&str], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("vocabulary corpus is empty".into()));
        }
        let mut tokens: Vec<String> = vec![
            "<pad>".to_string(),
            "<unk>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
        ];
        for c in b'A'..=b'Z' {
            tokens.push((c as char).to_string());
        }
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        debug_assert_eq!(tokens.len() as u32, FIRST_FREE_ID);
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let push = |tok: String, tokens: &mut Vec<String>, index: &mut HashMap<String, u32>| {
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), tokens.len() as u32);
                tokens.push(tok);
            }
        };
        for w in template_words {
            for t in tokenize(w) {
                push(t, &mut tokens, &mut index);
            }
        }

        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for t in tokenize(line) {
                if !index.contains_key(&t) {
                    *freq.entry(t).or_insert(0) += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(_, f)| *f >= min_freq.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (w, _) in words {
            push(w, &mut tokens, &mut index);
        }

        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id_of(t)).collect()
    }

    /// Space-joined tokens, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    pub fn has_unknown(&self, text: &str) -> bool {
        self.encode(text).contains(&UNK_ID)
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < FIRST_FREE_ID as usize {
            return Err(Error::Parse(format!(
                "{}: vocabulary too short to hold the reserved ids",
                path.display()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!(
                    "{}: line {}: duplicate token {t:?}",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}
