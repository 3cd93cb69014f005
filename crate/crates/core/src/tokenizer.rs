//! Character-level vocabulary with reserved pad/sos/eos ids.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    /// Vocabulary over a fixed symbol inventory (sorted, deduplicated).
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let set: BTreeSet<char> = symbols.into_iter().collect();
        if set.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one symbol"));
        }
        let symbols: Vec<char> = set.into_iter().collect();
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i + RESERVED.len())).collect();
        Ok(Self { symbols, index })
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + RESERVED.len()
    }

    pub fn pad_id(&self) -> usize {
        PAD_ID
    }

    pub fn sos_id(&self) -> usize {
        SOS_ID
    }

    pub fn eos_id(&self) -> usize {
        EOS_ID
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED.len()).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id_of(c).ok_or(Error::OutOfVocabulary(c)))
            .collect()
    }

    /// Reserved ids are dropped; ids outside the vocabulary are rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id >= self.size() {
                return Err(Error::InvalidToken {
                    id,
                    vocab_size: self.size(),
                });
            }
            if let Some(c) = self.symbol(id) {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Decoder input `[sos, y...]` and targets `[y..., eos]`.
    pub fn teacher_forcing(&self, text: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids = self.encode(text)?;
        let mut inputs = Vec::with_capacity(ids.len() + 1);
        inputs.push(SOS_ID);
        inputs.extend_from_slice(&ids);
        let mut targets = ids;
        targets.push(EOS_ID);
        Ok((inputs, targets))
    }

    /// One symbol per line, reserved entries first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in RESERVED {
            s.push_str(r);
            s.push('\n');
        }
        for c in &self.symbols {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "vocabulary", detail };
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(bad("missing reserved header".into()));
        }
        let mut symbols = Vec::new();
        for line in &lines[RESERVED.len()..] {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(bad(format!("entry {line:?} is not a single character"))),
            }
        }
        let vocab = Self::from_symbols(symbols.iter().copied())?;
        if vocab.symbols != symbols {
            return Err(bad("symbols are not sorted and unique".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Character inventory of `corpus`, sorted.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    Vocabulary::from_symbols(corpus.iter().flat_map(|l| l.as_ref().chars()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn enumeration() {
        let v = build_vocab(&["ab", "ba"]).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id_of('a'), Some(3));
        assert_eq!(build_vocab(&["a"]).unwrap().size(), 4);
        assert_eq!(build_vocab(&["ba", "ab"]).unwrap(), v);
        assert!(build_vocab::<&str>(&[]).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(&["hello world"]).unwrap();
        assert_eq!(v.encode("").unwrap(), Vec::<usize>::new());
        assert_eq!(v.decode(&v.encode("hello").unwrap()).unwrap(), "hello");
        assert!(matches!(v.encode("help"), Err(Error::OutOfVocabulary('p'))));
        assert!(matches!(v.decode(&[99]), Err(Error::InvalidToken { id: 99, .. })));
        assert_eq!(v.decode(&[SOS_ID, 3, EOS_ID, PAD_ID]).unwrap(), " ");
    }

    #[test]
    fn teacher_forcing_layout() {
        let v = build_vocab(&["ab"]).unwrap();
        let (inp, tgt) = v.teacher_forcing("ab").unwrap();
        assert_eq!(inp, vec![SOS_ID, 3, 4]);
        assert_eq!(tgt, vec![3, 4, EOS_ID]);
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocab(&["xyz"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_no_reserved(text in "[a-f ]{0,40}") {
            let v = build_vocab(&["abcdef "]).unwrap();
            let ids = v.encode(&text).unwrap();
            prop_assert!(ids.iter().all(|&i| !v.is_reserved(i) && i < v.size()));
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }
}
