//! Reversible text ↔ token-id mapping.
//!
//! Ids `0..4` are reserved for `<bos>`, `<eos>`, `<pad>` and `<unk>`. In
//! byte-level BPE mode ids `4..260` are the 256 single bytes and every
//! later id comes from a merge, so any byte string is encodable. Text is
//! first split into pieces at every whitespace character that follows a
//! non-whitespace one (`"a b  c"` → `"a"`, `" b"`, `"  c"`); merges never
//! cross a piece boundary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;
const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<bos>", "<eos>", "<pad>", "<unk>"];
const BYTE_BASE: usize = NUM_SPECIAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    ByteLevelBpe,
    WordLevel,
}

impl TokenizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerMode::ByteLevelBpe => "ByteLevelBPE",
            TokenizerMode::WordLevel => "WordLevel",
        }
    }
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bytelevelbpe" | "bpe" => Ok(TokenizerMode::ByteLevelBpe),
            "wordlevel" | "word" => Ok(TokenizerMode::WordLevel),
            other => Err(Error::contract(format!("unknown tokenizer mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    /// Bytes of every non-special token, indexed by id; specials hold their names.
    vocab: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    merges: Vec<(usize, usize)>,
    ranks: HashMap<(usize, usize), (usize, usize)>,
}

fn is_ws(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Splits before each whitespace byte that follows a non-whitespace byte.
fn split_pieces(text: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        if is_ws(text[i]) && !is_ws(text[i - 1]) {
            pieces.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Collapses every whitespace run to one space; the WordLevel round-trip is
/// exact up to this normalization.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_ws = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if !in_ws {
                out.push(' ');
            }
            in_ws = true;
        } else {
            out.push(c);
            in_ws = false;
        }
    }
    out
}

/// Word-level pieces: an optional single leading space plus either a run of
/// alphanumerics or one other character.
fn word_pieces(text: &str) -> Vec<String> {
    let norm = normalize_whitespace(text);
    let mut out = Vec::new();
    let mut chars = norm.chars().peekable();
    while let Some(c) = chars.next() {
        let mut piece = String::new();
        let mut first = c;
        if c == ' ' {
            piece.push(' ');
            match chars.next() {
                Some(n) => first = n,
                None => {
                    out.push(piece);
                    break;
                }
            }
        }
        piece.push(first);
        if first.is_alphanumeric() {
            while let Some(&n) = chars.peek() {
                if n.is_alphanumeric() {
                    piece.push(n);
                    chars.next();
                } else {
                    break;
                }
            }
        }
        out.push(piece);
    }
    out
}

fn merge_pair(symbols: &[usize], pair: (usize, usize), new_id: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn unescape(s: &str, line: usize) -> Result<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    let bad = || Error::Parse {
        line,
        msg: format!("bad escape in token `{s}`"),
    };
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') => {
                let hex = s.get(i + 2..i + 4).ok_or_else(bad)?;
                out.push(u8::from_str_radix(hex, 16).map_err(|_| bad())?);
                i += 4;
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

impl Tokenizer {
    fn base(mode: TokenizerMode) -> Self {
        let mut vocab: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        let mut index = HashMap::new();
        if mode == TokenizerMode::ByteLevelBpe {
            for b in 0..=255u8 {
                index.insert(vec![b], vocab.len());
                vocab.push(vec![b]);
            }
        }
        Tokenizer {
            mode,
            vocab,
            index,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// `train_tokenizer`: learns a vocabulary of at most `vocab_size` ids.
    pub fn train(corpus: &str, vocab_size: usize, mode: TokenizerMode) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("tokenizer corpus is empty"));
        }
        match mode {
            TokenizerMode::ByteLevelBpe => Self::train_bpe(corpus, vocab_size),
            TokenizerMode::WordLevel => Self::train_words(corpus, vocab_size),
        }
    }

    fn train_bpe(corpus: &str, vocab_size: usize) -> Result<Self> {
        let floor = NUM_SPECIAL + 256;
        if vocab_size <= floor {
            return Err(Error::contract(format!(
                "byte-level BPE needs a vocabulary larger than {floor}, got {vocab_size}"
            )));
        }
        let mut tok = Tokenizer::base(TokenizerMode::ByteLevelBpe);
        let mut counts: HashMap<&[u8], usize> = HashMap::new();
        for p in split_pieces(corpus.as_bytes()) {
            *counts.entry(p).or_default() += 1;
        }
        let mut words: Vec<(Vec<usize>, usize)> = counts
            .into_iter()
            .map(|(p, c)| (p.iter().map(|&b| BYTE_BASE + b as usize).collect(), c))
            .collect();
        words.sort();

        while tok.vocab.len() < vocab_size {
            let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Lexicographically smaller pair wins, so it must compare greater here.
                    let ka = (&tok.vocab[pa.0], &tok.vocab[pa.1]);
                    let kb = (&tok.vocab[pb.0], &tok.vocab[pb.1]);
                    kb.cmp(&ka)
                })
            });
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let mut merged = tok.vocab[pair.0].clone();
            merged.extend_from_slice(&tok.vocab[pair.1]);
            let new_id = match tok.index.get(&merged) {
                Some(&id) => id,
                None => {
                    tok.index.insert(merged.clone(), tok.vocab.len());
                    tok.vocab.push(merged);
                    tok.vocab.len() - 1
                }
            };
            tok.ranks.insert(pair, (tok.merges.len(), new_id));
            tok.merges.push(pair);
            for (syms, _) in words.iter_mut() {
                if syms.len() > 1 {
                    *syms = merge_pair(syms, pair, new_id);
                }
            }
        }
        Ok(tok)
    }

    fn train_words(corpus: &str, vocab_size: usize) -> Result<Self> {
        if vocab_size <= NUM_SPECIAL {
            return Err(Error::contract(format!(
                "vocabulary of {vocab_size} leaves no room beyond the {NUM_SPECIAL} special tokens"
            )));
        }
        let mut tok = Tokenizer::base(TokenizerMode::WordLevel);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for p in word_pieces(corpus) {
            *counts.entry(p).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (piece, _) in ranked.into_iter().take(vocab_size - NUM_SPECIAL) {
            let bytes = piece.into_bytes();
            tok.index.insert(bytes.clone(), tok.vocab.len());
            tok.vocab.push(bytes);
        }
        Ok(tok)
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    /// Bytes of a non-special token.
    pub fn token_bytes(&self, id: usize) -> Option<&[u8]> {
        (id >= NUM_SPECIAL).then(|| self.vocab.get(id).map(Vec::as_slice)).flatten()
    }

    fn encode_piece(&self, piece: &[u8]) -> Vec<usize> {
        let mut syms: Vec<usize> = piece.iter().map(|&b| BYTE_BASE + b as usize).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| ((w[0], w[1]), *r)))
                .min_by_key(|(_, (rank, _))| *rank);
            let Some((pair, (_, new_id))) = best else { break };
            syms = merge_pair(&syms, pair, new_id);
        }
        syms
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        match self.mode {
            TokenizerMode::ByteLevelBpe => split_pieces(bytes)
                .into_iter()
                .flat_map(|p| self.encode_piece(p))
                .collect(),
            TokenizerMode::WordLevel => {
                self.encode(&String::from_utf8_lossy(bytes))
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.mode {
            TokenizerMode::ByteLevelBpe => self.encode_bytes(text.as_bytes()),
            TokenizerMode::WordLevel => word_pieces(text)
                .into_iter()
                .map(|p| self.index.get(p.as_bytes()).copied().unwrap_or(UNK))
                .collect(),
        }
    }

    /// Concatenated bytes; `<bos>`, `<eos>` and `<pad>` decode to nothing.
    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                BOS | EOS | PAD => {}
                UNK => out.extend_from_slice(SPECIAL_NAMES[UNK].as_bytes()),
                _ => out.extend_from_slice(self.vocab.get(id).ok_or(Error::TokenId {
                    id,
                    vocab: self.vocab.len(),
                })?),
            }
        }
        Ok(out)
    }

    /// Decodes to text; invalid UTF-8 (possible in raw generations) is replaced.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Header line, then `id<TAB>token` for every id, then `left<TAB>right` merges.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\t{}\n", self.mode.as_str(), self.vocab.len());
        for (id, tok) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{}", escape(tok));
        }
        for &(l, r) in &self.merges {
            let _ = writeln!(s, "{}\t{}", escape(&self.vocab[l]), escape(&self.vocab[r]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty tokenizer file".into(),
        })?;
        let (mode, size) = header.split_once('\t').ok_or(Error::Parse {
            line: 1,
            msg: "header must be `mode<TAB>vocab size`".into(),
        })?;
        let mode: TokenizerMode = mode.parse().map_err(|e: Error| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let size: usize = size.trim().parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("bad vocabulary size `{size}`"),
        })?;
        let mut tok = Tokenizer::base(mode);
        tok.vocab.truncate(NUM_SPECIAL);
        tok.index.clear();
        for expected in 0..size {
            let (line, raw) = lines.next().ok_or(Error::Parse {
                line: expected + 2,
                msg: format!("file ends before vocabulary entry {expected}"),
            })?;
            let (id, token) = raw.split_once('\t').ok_or(Error::Parse {
                line,
                msg: "vocabulary line must be `id<TAB>token`".into(),
            })?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected id {expected}, found `{id}`"),
                });
            }
            if expected < NUM_SPECIAL {
                continue;
            }
            let bytes = unescape(token, line)?;
            if tok.index.insert(bytes.clone(), expected).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate token `{token}`"),
                });
            }
            tok.vocab.push(bytes);
        }
        if mode == TokenizerMode::ByteLevelBpe
            && (0..=255u8).any(|b| tok.index.get(&vec![b]) != Some(&(BYTE_BASE + b as usize)))
        {
            return Err(Error::Parse {
                line: 2,
                msg: "byte-level vocabulary must map byte b to id 4+b".into(),
            });
        }
        for (line, raw) in lines {
            if raw.is_empty() {
                continue;
            }
            let (l, r) = raw.split_once('\t').ok_or(Error::Parse {
                line,
                msg: "merge line must be `left<TAB>right`".into(),
            })?;
            let lookup = |s: &str| -> Result<usize> {
                let bytes = unescape(s, line)?;
                tok.index.get(&bytes).copied().ok_or(Error::Parse {
                    line,
                    msg: format!("merge references unknown token `{s}`"),
                })
            };
            let pair = (lookup(l)?, lookup(r)?);
            let mut merged = tok.vocab[pair.0].clone();
            merged.extend_from_slice(&tok.vocab[pair.1]);
            let new_id = *tok.index.get(&merged).ok_or(Error::Parse {
                line,
                msg: "merge result is not in the vocabulary".into(),
            })?;
            tok.ranks.insert(pair, (tok.merges.len(), new_id));
            tok.merges.push(pair);
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
