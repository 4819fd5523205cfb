//! Joint subword vocabulary learned by byte-pair-style merges over the union
//! of the clean and noisy corpora.
//!
//! Non-initial pieces of a word carry a `##` prefix, so word boundaries are
//! recoverable from the token sequence alone. Encoding is greedy
//! longest-match per word.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hash::fnv1a;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];
const CONTINUATION: &str = "##";
/// What `decode` writes for an UNK id.
pub const UNK_MARKER: &str = "⟨unk⟩";

const HEADER: &str = "CODIST-VOCAB v1";
const MERGES_SENTINEL: &str = "#MERGES";

/// Content token ids of one caption (no BOS/EOS).
pub type TokenSeq = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: Vec<(String, String)>,
}

/// Lowercase, collapse whitespace runs, trim.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip(sym: &str) -> &str {
    sym.strip_prefix(CONTINUATION).unwrap_or(sym)
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

/// Ordering key for equal-frequency pairs: the bare character content first,
/// the marked symbols second.
fn tie_key(pair: &(String, String)) -> (&str, &str, &str, &str) {
    (strip(&pair.0), strip(&pair.1), &pair.0, &pair.1)
}

impl Vocab {
    /// Learns merges over all `corpora` until the vocabulary reaches
    /// `target_size` or no adjacent pair is left.
    pub fn train<S: AsRef<str>>(corpora: &[&[S]], target_size: usize) -> Result<Vocab> {
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for corpus in corpora {
            for text in corpus.iter() {
                for w in normalize(text.as_ref())
                    .split(' ')
                    .filter(|w| !w.is_empty())
                {
                    *word_freq.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        if word_freq.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .into_iter()
            .map(|(w, f)| (word_symbols(&w), f))
            .collect();
        let base: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
        if target_size < base.len() + SPECIALS.len() {
            return Err(Error::VocabTooSmall {
                target: target_size,
                base: base.len(),
            });
        }

        let mut vocab = Vocab {
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
            merges: Vec::new(),
        };
        for s in SPECIALS {
            vocab.push_token(s.to_string());
        }
        for s in base {
            vocab.push_token(s);
        }

        while vocab.tokens.len() < target_size {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (syms, f) in &words {
                for pair in syms.windows(2) {
                    *counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_default() += f;
                }
            }
            let Some((best, _)) = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| tie_key(pb).cmp(&tie_key(pa)))
            }) else {
                break;
            };
            let best = best.clone();
            let merged = format!("{}{}", best.0, strip(&best.1));
            for (syms, _) in words.iter_mut() {
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == best.0 && syms[i + 1] == best.1 {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if !vocab.token_to_id.contains_key(&merged) {
                vocab.push_token(merged);
            }
            vocab.merges.push(best);
        }
        Ok(vocab)
    }

    fn push_token(&mut self, tok: String) {
        let id = self.tokens.len() as u32;
        self.token_to_id.insert(tok.clone(), id);
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let norm = normalize(text);
        let mut ids = Vec::new();
        let mut buf = String::new();
        for word in norm.split(' ').filter(|w| !w.is_empty()) {
            let chars: Vec<char> = word.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let mut matched = None;
                for j in (i + 1..=chars.len()).rev() {
                    buf.clear();
                    if i > 0 {
                        buf.push_str(CONTINUATION);
                    }
                    buf.extend(&chars[i..j]);
                    if let Some(&id) = self.token_to_id.get(buf.as_str()) {
                        if id as usize >= SPECIALS.len() {
                            matched = Some((id, j));
                            break;
                        }
                    }
                }
                match matched {
                    Some((id, j)) => {
                        ids.push(id);
                        i = j;
                    }
                    None => {
                        ids.push(UNK);
                        i += 1;
                    }
                }
            }
        }
        ids
    }

    /// Joins pieces back into words. PAD/BOS/EOS are skipped; UNK becomes
    /// [`UNK_MARKER`].
    pub fn decode(&self, seq: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in seq {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            match id {
                PAD | BOS | EOS => continue,
                UNK => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(UNK_MARKER);
                }
                _ => match tok.strip_prefix(CONTINUATION) {
                    Some(rest) => out.push_str(rest),
                    None => {
                        if !out.is_empty() {
                            out.push(' ');
                        }
                        out.push_str(tok);
                    }
                },
            }
        }
        Ok(out)
    }

    /// Subword strings of an encoded caption, used by the hashed embedder.
    pub fn pieces<'a>(&'a self, seq: &[u32]) -> Vec<&'a str> {
        seq.iter().filter_map(|&id| self.token(id)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s.push_str(MERGES_SENTINEL);
        s.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::VocabFormat("missing header".into()));
        }
        let mut vocab = Vocab {
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
            merges: Vec::new(),
        };
        let mut in_merges = false;
        for line in lines {
            if in_merges {
                let (l, r) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::VocabFormat(format!("bad merge line {line:?}")))?;
                vocab.merges.push((l.to_string(), r.to_string()));
            } else if line == MERGES_SENTINEL {
                in_merges = true;
            } else {
                if vocab.token_to_id.contains_key(line) {
                    return Err(Error::VocabFormat(format!("duplicate token {line:?}")));
                }
                vocab.push_token(line.to_string());
            }
        }
        if !in_merges {
            return Err(Error::VocabFormat("missing #MERGES sentinel".into()));
        }
        if vocab.tokens.len() < SPECIALS.len()
            || vocab.tokens[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::VocabFormat("special tokens missing".into()));
        }
        Ok(vocab)
    }

    /// Content hash of the serialized vocabulary.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}
