use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary; ids are dense in `0..len()`, specials first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Vocabulary of the specials followed by `words` in the given order.
    /// Duplicates and special names are skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    /// Build from normalized texts: most frequent first, ties alphabetical,
    /// truncated to `max_size` entries including specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split(' ').filter(|w| !w.is_empty()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.saturating_sub(SPECIALS.len());
        Self::from_words(words.into_iter().take(room).map(|(w, _)| w))
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid("vocab file must start with <bos>, <eos>, <unk>"));
        }
        let v = Self::from_words(&tokens[SPECIALS.len()..]);
        if v.len() != tokens.len() {
            return Err(Error::invalid("vocab file contains duplicate tokens"));
        }
        Ok(v)
    }
}

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '-'
}

/// Lowercase, split punctuation into standalone tokens, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if is_split_punct(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.extend(c.to_lowercase());
        }
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `BOS w1 .. wn EOS`; unknown words map to [`UNK`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ids = Vec::with_capacity(norm.len() / 4 + 2);
    ids.push(BOS);
    ids.extend(norm.split(' ').map(|w| vocab.id(w)));
    ids.push(EOS);
    Ok(ids)
}

/// Inverse of [`tokenize`]: drops a leading BOS, stops at the first EOS.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    let mut words = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        if id == BOS && i == 0 {
            continue;
        }
        if id == EOS {
            break;
        }
        if id == BOS {
            continue;
        }
        words.push(vocab.token(id).unwrap_or(SPECIALS[UNK as usize]));
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_an_error() {
        let v = Vocab::from_words(["a"]);
        assert!(matches!(tokenize("", &v), Err(Error::EmptyInput)));
        assert!(matches!(tokenize("  \t ", &v), Err(Error::EmptyInput)));
    }

    #[test]
    fn forced_small_example() {
        let v = Vocab::from_words(["a"]);
        assert_eq!(v.id("a"), 3);
        assert_eq!(tokenize("a a", &v).unwrap(), vec![0, 3, 3, 1]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::from_words(["hello"]);
        assert_eq!(tokenize("Hello world", &v).unwrap(), vec![BOS, 3, UNK, EOS]);
    }

    #[test]
    fn normalize_splits_punctuation() {
        assert_eq!(normalize("Deep sea, or FRESH water?"), "deep sea , or fresh water ?");
        assert_eq!(normalize("i'm  a   well-known chef."), "i'm a well-known chef .");
    }

    #[test]
    fn vocab_lines_roundtrip() {
        let v = Vocab::from_words(["x", "y"]);
        assert_eq!(Vocab::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocab::from_lines("x\ny\n").is_err());
    }

    #[test]
    fn build_orders_by_frequency_then_alpha() {
        let v = Vocab::build(["b a", "a c", "c d"], 10);
        assert_eq!(&v.tokens()[3..], &["a", "c", "b", "d"]);
        let small = Vocab::build(["b a", "a c", "c d"], 4);
        assert_eq!(small.len(), 4);
    }
}
