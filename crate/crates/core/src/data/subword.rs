//! Byte-pair-style subword vocabulary learned over tokenizer output.
//!
//! Each token is split into characters, the last one carrying an
//! end-of-token marker, and frequent adjacent pairs are merged greedily.
//! Every character seen in training is in the base alphabet in both its plain
//! and end-of-token form, so any string over that alphabet encodes without
//! `<unk>`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::tokenize::{detokenize, group_tokenize};
use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, UNK};

/// Suffix marking the final piece of a token.
pub const END_MARK: &str = "</w>";
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const MERGES_SENTINEL: &str = "#MERGES";

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn initial_symbols(token: &str) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_MARK}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_word(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let merged = format!("{a}{b}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl SubwordVocab {
    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {p:?}")));
            }
        }
        if pieces.len() < SPECIALS.len()
            || pieces[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "vocabulary must start with <pad> <s> </s> <unk>".into(),
            ));
        }
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        Ok(SubwordVocab {
            pieces,
            index,
            merges,
            ranks,
        })
    }

    /// Learns merges from `corpus` (already normalised sentences) until the
    /// vocabulary holds `target_size` entries or no pair occurs twice.
    pub fn learn<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config(
                "cannot learn a vocabulary from an empty corpus".into(),
            ));
        }
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for tok in group_tokenize(sentence.as_ref())? {
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        // Characters come from the raw text so a space that the tokenizer
        // drops between words still encodes where it stands alone.
        let mut chars: Vec<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in &chars {
            pieces.push(c.to_string());
            pieces.push(format!("{c}{END_MARK}"));
        }
        if target_size < pieces.len() {
            return Err(Error::Config(format!(
                "target size {target_size} is below the base alphabet plus specials ({})",
                pieces.len()
            )));
        }
        let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        let mut words: Vec<(Vec<String>, usize)> = order
            .iter()
            .map(|t| (initial_symbols(t), counts[t]))
            .collect();
        let mut merges = Vec::new();
        while pieces.len() < target_size {
            let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *pair_counts
                        .entry((w[0].as_str(), w[1].as_str()))
                        .or_insert(0) += n;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, &n) in &pair_counts {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((*pair, n));
                }
            }
            let Some(((a, b), n)) = best else { break };
            if n < 2 {
                break;
            }
            let (a, b) = (a.to_string(), b.to_string());
            for (syms, _) in &mut words {
                merge_word(syms, &a, &b);
            }
            let merged = format!("{a}{b}");
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
            merges.push((a, b));
        }
        SubwordVocab::from_parts(pieces, merges)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    fn encode_token(&self, token: &str, out: &mut Vec<usize>) {
        let mut syms = initial_symbols(token);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank].clone();
            merge_word(&mut syms, &a, &b);
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    /// Subword ids for a sentence (no BOS/EOS).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for tok in group_tokenize(text)? {
            self.encode_token(&tok, &mut ids);
        }
        Ok(ids)
    }

    /// Tokens (tokenizer units) for a sequence of ids. Special tokens other
    /// than `<unk>` are skipped; `<unk>` becomes its own token.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut current = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => continue,
                UNK => {
                    if !current.is_empty() {
                        tokens.push(std::mem::take(&mut current));
                    }
                    tokens.push(SPECIALS[UNK].to_string());
                }
                _ => {
                    let Some(p) = self.piece(id) else { continue };
                    match p.strip_suffix(END_MARK) {
                        Some(stem) => {
                            current.push_str(stem);
                            tokens.push(std::mem::take(&mut current));
                        }
                        None => current.push_str(p),
                    }
                }
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
        tokens
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        detokenize(&self.decode_tokens(ids))
    }

    /// `token<TAB>id` lines, then `#MERGES`, then `left<TAB>right` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.pieces.iter().enumerate() {
            s.push_str(&format!("{p}\t{i}\n"));
        }
        s.push_str(MERGES_SENTINEL);
        s.push('\n');
        for (a, b) in &self.merges {
            s.push_str(&format!("{a}\t{b}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (n, line) in text.lines().enumerate() {
            if !in_merges && line == MERGES_SENTINEL {
                in_merges = true;
                continue;
            }
            let bad = || Error::Format(format!("vocabulary line {}: {line:?}", n + 1));
            let (a, b) = line.rsplit_once('\t').ok_or_else(bad)?;
            if in_merges {
                merges.push((a.to_string(), b.to_string()));
            } else {
                let id: usize = b.parse().map_err(|_| bad())?;
                if id != pieces.len() {
                    return Err(Error::Format(format!(
                        "vocabulary ids must be dense; expected {} got {id}",
                        pieces.len()
                    )));
                }
                pieces.push(a.to_string());
            }
        }
        if !in_merges {
            return Err(Error::Format(
                "vocabulary file has no #MERGES section".into(),
            ));
        }
        SubwordVocab::from_parts(pieces, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SubwordVocab::from_text(&text)
    }
}
