//! Shared symbol inventory across all tasks.
//!
//! Ids 0..4 are reserved for PAD, BOS, EOS and UNK; corpus tokens follow in
//! lexicographic order. The default unit is the character (space included, so
//! word boundaries survive encoding); [`Vocabulary::build_subword`] adds
//! merged multi-character tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Rendered in place of UNK by [`Vocabulary::decode`].
pub const UNK_CHAR: char = '\u{FFFD}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    max_token_chars: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: BTreeSet<String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let max_token_chars =
            id_to_token[NUM_SPECIALS..].iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Self { token_to_id, id_to_token, max_token_chars }
    }

    /// Specials plus every distinct character of every corpus.
    pub fn build_universal<S: AsRef<str>>(corpora: &[Vec<S>]) -> Self {
        let chars: BTreeSet<String> = corpora
            .iter()
            .flatten()
            .flat_map(|line| line.as_ref().chars())
            .map(String::from)
            .collect();
        Self::from_tokens(chars)
    }

    /// Character inventory extended with up to `merges` subword tokens, each
    /// formed by joining the most frequent adjacent token pair inside words.
    /// Ties go to the lexicographically smallest pair. Spaces never merge.
    pub fn build_subword<S: AsRef<str>>(corpora: &[Vec<S>], merges: usize) -> Self {
        let mut tokens: BTreeSet<String> = BTreeSet::new();
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpora.iter().flatten() {
            let line = line.as_ref();
            tokens.extend(line.chars().map(String::from));
            for w in line.split(' ').filter(|w| !w.is_empty()) {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();
        for _ in 0..merges {
            let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (segs, c) in &words {
                for w in segs.windows(2) {
                    *pairs.entry((w[0].clone(), w[1].clone())).or_default() += c;
                }
            }
            // BTreeMap iteration is lexicographic; keep the first maximum
            let Some((best, _)) = pairs
                .into_iter()
                .fold(None::<((String, String), usize)>, |acc, (p, c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                })
            else {
                break;
            };
            let joined = format!("{}{}", best.0, best.1);
            for (segs, _) in &mut words {
                let mut out = Vec::with_capacity(segs.len());
                let mut i = 0;
                while i < segs.len() {
                    if i + 1 < segs.len() && segs[i] == best.0 && segs[i + 1] == best.1 {
                        out.push(joined.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut segs[i]));
                        i += 1;
                    }
                }
                *segs = out;
            }
            tokens.insert(joined);
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange { id, size: self.len() })
    }

    /// Corpus tokens in id order (specials excluded).
    pub fn corpus_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    /// Greedy longest-match segmentation; characters with no matching token
    /// become UNK. With a character-level vocabulary this is one id per char.
    pub fn encode(&self, text: &str, wrap: bool) -> Vec<usize> {
        let chars: Vec<char> = text.chars().collect();
        let mut ids = Vec::with_capacity(chars.len() + 2);
        if wrap {
            ids.push(BOS);
        }
        let mut i = 0;
        let mut buf = String::new();
        while i < chars.len() {
            let mut matched = None;
            let longest = self.max_token_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if let Some(&id) = self.token_to_id.get(buf.as_str()) {
                    matched = Some((id, len));
                    break;
                }
            }
            let (id, len) = matched.unwrap_or((UNK, 1));
            ids.push(id);
            i += len;
        }
        if wrap {
            ids.push(EOS);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => out.push(UNK_CHAR),
                _ => out.push_str(self.token(id)?),
            }
        }
        Ok(out)
    }

    /// One corpus token per line; line `n` (0-based) holds id `n + 4`.
    /// Backslash and newline are escaped.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.corpus_tokens() {
            s.push_str(&t.replace('\\', "\\\\").replace('\n', "\\n"));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut tok = String::new();
            let mut it = line.chars();
            while let Some(c) = it.next() {
                if c == '\\' {
                    match it.next() {
                        Some('n') => tok.push('\n'),
                        Some('\\') => tok.push('\\'),
                        other => {
                            return Err(Error::Parse {
                                path: "<vocab>".into(),
                                line: n + 1,
                                msg: format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default()),
                            })
                        }
                    }
                } else {
                    tok.push(c);
                }
            }
            tokens.push(tok);
        }
        let set: BTreeSet<String> = tokens.iter().cloned().collect();
        if set.len() != tokens.len() || set.iter().ne(tokens.iter()) {
            return Err(Error::Parse {
                path: "<vocab>".into(),
                line: 0,
                msg: "tokens must be unique and sorted".into(),
            });
        }
        Ok(Self::from_tokens(set))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { path: path.to_path_buf(), line, msg },
            other => other,
        })
    }
}
