//! Byte-level BPE.
//!
//! Text is split into pieces before merging: a new piece starts at every
//! space and newline, and after every newline, so a word carries its leading
//! space (shown as `▁`) and merges never cross word boundaries. Base symbols
//! are the bytes seen in the training corpus; bytes outside that alphabet
//! encode to UNK.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{bail, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const BOS: u32 = 3;
pub const N_SPECIAL: u32 = 4;
pub const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<mask>", "<unk>", "<bos>"];

const HEADER: &str = "HLM-BPE v1";

/// Token ↔ id tables. Specials hold the lowest ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, u32>,
}

impl Vocab {
    fn new() -> Self {
        let tokens = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        Vocab { tokens, ids: HashMap::new() }
    }

    fn push(&mut self, bytes: Vec<u8>) -> u32 {
        let id = self.tokens.len() as u32;
        self.ids.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIAL
    }

    /// Byte content of a non-special token.
    pub fn bytes(&self, id: u32) -> Option<&[u8]> {
        if Self::is_special(id) {
            return None;
        }
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn id(&self, bytes: &[u8]) -> Option<u32> {
        self.ids.get(bytes).copied()
    }

    /// Printable form: specials by name, other tokens escaped.
    pub fn display(&self, id: u32) -> String {
        match id {
            i if Self::is_special(i) => SPECIAL_NAMES[i as usize].to_string(),
            i => escape(&self.tokens[i as usize]),
        }
    }

    /// Looks a token up by its printable form (see [`Vocab::display`]).
    pub fn lookup(&self, shown: &str) -> Option<u32> {
        if let Some(i) = SPECIAL_NAMES.iter().position(|s| *s == shown) {
            return Some(i as u32);
        }
        unescape(shown).ok().and_then(|b| self.id(&b))
    }
}

/// Escapes a byte string: space as `▁`, printable ASCII other than `<` as
/// itself, everything else as `<0xNN>`.
pub fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        match b {
            b' ' => s.push('▁'),
            0x21..=0x7e if b != b'<' => s.push(b as char),
            _ => write!(s, "<0x{b:02X}>").unwrap(),
        }
    }
    s
}

pub fn unescape(s: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(c) = rest.chars().next() {
        if c == '▁' {
            out.push(b' ');
            rest = &rest[c.len_utf8()..];
        } else if c == '<' {
            let hex = rest.get(3..5).filter(|_| rest.starts_with("<0x") && rest.get(5..6) == Some(">"));
            let Some(hex) = hex else { bail!(Format, "bad byte escape in {s:?}") };
            let b = u8::from_str_radix(hex, 16).map_err(|_| crate::HlmError::Format(format!("bad byte escape in {s:?}")))?;
            out.push(b);
            rest = &rest[6..];
        } else if c.is_ascii_graphic() {
            out.push(c as u8);
            rest = &rest[1..];
        } else {
            bail!(Format, "unexpected character {c:?} in token {s:?}");
        }
    }
    if out.is_empty() {
        bail!(Format, "empty token");
    }
    Ok(out)
}

/// Splits text into merge-isolated pieces; concatenating them gives `text` back.
pub fn pieces(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= text.len() {
            return None;
        }
        let mut i = start + 1;
        if text[start] != b'\n' {
            while i < text.len() && text[i] != b' ' && text[i] != b'\n' {
                i += 1;
            }
        }
        let piece = &text[start..i];
        start = i;
        Some(piece)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    alphabet: Vec<u8>,
    merges: Vec<Merge>,
    vocab: Vocab,
    byte_ids: [u32; 256],
    ranks: HashMap<(u32, u32), u32>,
}

/// Heap key: highest count first, then the lexicographically smallest
/// (left bytes, right bytes).
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.count, &self.key).cmp(&(other.count, &other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn pairs_of(symbols: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

fn apply_merge(symbols: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy most-frequent-pair BPE training.
///
/// A pair whose concatenation already exists as a token is never merged, so
/// every non-special token has a unique byte string.
pub fn train_bpe<'a>(docs: impl IntoIterator<Item = &'a [u8]>, target_vocab: usize) -> Result<Tokenizer> {
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    let mut seen = [false; 256];
    let mut any = false;
    for doc in docs {
        for p in pieces(doc) {
            *counts.entry(p).or_default() += 1;
            for &b in p {
                seen[b as usize] = true;
            }
            any = true;
        }
    }
    if !any {
        bail!(Data, "tokenizer corpus is empty");
    }
    let alphabet: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
    let base = N_SPECIAL as usize + alphabet.len();
    if target_vocab < base {
        bail!(Config, "vocab_size {target_vocab} is below the {} base symbols plus {N_SPECIAL} specials", alphabet.len());
    }
    let mut tok = Tokenizer::from_parts(alphabet, Vec::new())?;

    let mut words: Vec<(Vec<u32>, u64)> = counts.into_iter().map(|(p, c)| (tok.byte_symbols(p), c)).collect();
    words.sort();
    let mut pair_count: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, (syms, c)) in words.iter().enumerate() {
        for p in pairs_of(syms) {
            *pair_count.entry(p).or_default() += c;
            pair_words.entry(p).or_default().insert(w);
        }
    }
    let candidate = |tok: &Tokenizer, pair: (u32, u32), count: u64| Candidate {
        count,
        key: Reverse((tok.vocab.tokens[pair.0 as usize].clone(), tok.vocab.tokens[pair.1 as usize].clone())),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_count.iter().map(|(&p, &c)| candidate(&tok, p, c)).collect();

    while tok.vocab.len() < target_vocab {
        let Some(top) = heap.pop() else {
            bail!(Config, "corpus supports only {} merges; vocab_size {target_vocab} is unreachable", tok.merges.len());
        };
        if pair_count.get(&top.pair).copied().unwrap_or(0) != top.count || top.count == 0 {
            continue;
        }
        let (lb, rb) = top.key.0;
        let joined = [lb, rb].concat();
        if tok.vocab.id(&joined).is_some() {
            pair_count.remove(&top.pair);
            continue;
        }
        let id = tok.vocab.push(joined);
        tok.merges.push(Merge { left: top.pair.0, right: top.pair.1, id });
        tok.ranks.insert(top.pair, id);

        let mut touched: Vec<usize> = pair_words.remove(&top.pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for w in touched {
            let (syms, c) = &mut words[w];
            for p in pairs_of(syms) {
                *pair_count.get_mut(&p).unwrap() -= *c;
                changed.insert(p);
            }
            apply_merge(syms, top.pair, id);
            for p in pairs_of(syms) {
                *pair_count.entry(p).or_default() += *c;
                pair_words.entry(p).or_default().insert(w);
                changed.insert(p);
            }
        }
        let mut changed: Vec<_> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            match pair_count.get(&p).copied() {
                Some(0) | None => {
                    pair_count.remove(&p);
                }
                Some(c) => heap.push(candidate(&tok, p, c)),
            }
        }
    }
    Ok(tok)
}

impl Tokenizer {
    fn from_parts(alphabet: Vec<u8>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut vocab = Vocab::new();
        let mut byte_ids = [UNK; 256];
        for (i, &b) in alphabet.iter().enumerate() {
            if i > 0 && alphabet[i - 1] >= b {
                bail!(Format, "alphabet must be strictly increasing");
            }
            byte_ids[b as usize] = vocab.push(vec![b]);
        }
        let mut tok = Tokenizer { alphabet, merges: Vec::new(), vocab, byte_ids, ranks: HashMap::new() };
        for (left, right) in merges {
            tok.push_merge(left, right)?;
        }
        Ok(tok)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> Result<u32> {
        let n = self.vocab.len() as u32;
        if left >= n || right >= n || Vocab::is_special(left) || Vocab::is_special(right) {
            bail!(Format, "merge ({left}, {right}) references an unknown token");
        }
        let joined = [self.vocab.tokens[left as usize].clone(), self.vocab.tokens[right as usize].clone()].concat();
        if self.vocab.id(&joined).is_some() || self.ranks.contains_key(&(left, right)) {
            bail!(Format, "merge ({left}, {right}) duplicates an existing token");
        }
        let id = self.vocab.push(joined);
        self.merges.push(Merge { left, right, id });
        self.ranks.insert((left, right), id);
        Ok(id)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn alphabet(&self) -> &[u8] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    fn byte_symbols(&self, piece: &[u8]) -> Vec<u32> {
        piece.iter().map(|&b| self.byte_ids[b as usize]).collect()
    }

    /// Encodes one piece by repeatedly merging its lowest-rank adjacent pair.
    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut syms = self.byte_symbols(piece);
        while syms.len() > 1 {
            let best = pairs_of(&syms).filter_map(|p| self.ranks.get(&p).map(|&id| (id, p))).min();
            let Some((id, pair)) = best else { break };
            apply_merge(&mut syms, pair, id);
        }
        out.extend_from_slice(&syms);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, text: &[u8]) -> Vec<u32> {
        let mut cache: HashMap<&[u8], (usize, usize)> = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 3);
        for p in pieces(text) {
            if let Some(&(s, e)) = cache.get(p) {
                out.extend_from_within(s..e);
            } else {
                let s = out.len();
                self.encode_piece(p, &mut out);
                cache.insert(p, (s, out.len()));
            }
        }
        out
    }

    /// Encodes documents in parallel; output order follows input order.
    pub fn encode_docs(&self, docs: &[Vec<u8>]) -> Vec<Vec<u32>> {
        docs.par_iter().map(|d| self.encode_bytes(d)).collect()
    }

    /// Concatenated bytes of `ids`. PAD, MASK and BOS decode to nothing and
    /// UNK to U+FFFD.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab.len() {
                bail!(Index, "token id {id} out of range for vocabulary of {}", self.vocab.len());
            }
            match id {
                UNK => out.extend_from_slice("\u{FFFD}".as_bytes()),
                i if Vocab::is_special(i) => {}
                i => out.extend_from_slice(&self.vocab.tokens[i as usize]),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "specials {}", SPECIAL_NAMES.join(" ")).unwrap();
        let shown: Vec<String> = self.alphabet.iter().map(|&b| escape(&[b])).collect();
        writeln!(s, "alphabet {} {}", shown.len(), shown.join(" ")).unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for m in &self.merges {
            writeln!(s, "{} {} {}", self.vocab.display(m.left), self.vocab.display(m.right), m.id).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| crate::HlmError::Format(format!("missing {what} line")));
        if next("header")? != HEADER {
            bail!(Format, "not an {HEADER} tokenizer file");
        }
        let specials: Vec<&str> = next("specials")?.split(' ').collect();
        if specials[0] != "specials" || specials[1..] != SPECIAL_NAMES {
            bail!(Format, "unexpected specials line");
        }
        let alpha_line = next("alphabet")?;
        let mut parts = alpha_line.split(' ');
        if parts.next() != Some("alphabet") {
            bail!(Format, "expected alphabet line");
        }
        let n: usize = parts.next().and_then(|n| n.parse().ok()).ok_or_else(|| crate::HlmError::Format("bad alphabet count".into()))?;
        let mut alphabet = Vec::with_capacity(n);
        for p in parts {
            match unescape(p)?.as_slice() {
                [b] => alphabet.push(*b),
                _ => bail!(Format, "alphabet entry {p:?} is not a single byte"),
            }
        }
        if alphabet.len() != n {
            bail!(Format, "alphabet lists {} bytes, header says {n}", alphabet.len());
        }
        let merge_line = next("merges")?;
        let m: usize = merge_line
            .strip_prefix("merges ")
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| crate::HlmError::Format("bad merges line".into()))?;
        let mut tok = Tokenizer::from_parts(alphabet, Vec::new())?;
        for i in 0..m {
            let line = next("merge")?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 {
                bail!(Format, "merge line {i} has {} fields", f.len());
            }
            let left = tok.vocab.lookup(f[0]).ok_or_else(|| crate::HlmError::Format(format!("unknown token {:?}", f[0])))?;
            let right = tok.vocab.lookup(f[1]).ok_or_else(|| crate::HlmError::Format(format!("unknown token {:?}", f[1])))?;
            let id: u32 = f[2].parse().map_err(|_| crate::HlmError::Format(format!("bad id {:?}", f[2])))?;
            if id as usize != tok.vocab.len() {
                bail!(Format, "merge line {i} assigns id {id}, expected {}", tok.vocab.len());
            }
            tok.push_merge(left, right)?;
        }
        if lines.next().is_some() {
            bail!(Format, "trailing content after {m} merges");
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Tokenizer::from_text(&std::fs::read_to_string(path)?)
    }
}
