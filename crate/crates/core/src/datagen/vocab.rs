use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::datagen::{Manifest, BOS_ID, EOS_ID, PAD_ID, RESERVED, UNK_ID};
use crate::error::{Error, Result};

/// Word list; the word on line `i` has id `i + 4`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + RESERVED))
            .collect();
        Self { words, ids }
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            BOS_ID => Some("<bos>"),
            EOS_ID => Some("<eos>"),
            UNK_ID => Some("<unk>"),
            _ => self.words.get(id - RESERVED).map(String::as_str),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }
}

/// Lowercased words with non-alphanumeric characters stripped.
pub fn words(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// `BOS w… EOS PAD…`, exactly `max_len` ids. Long captions are cut so EOS survives.
pub fn tokenize(caption: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let mut ids = vec![BOS_ID];
    ids.extend(
        words(caption)
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK_ID)),
    );
    ids.push(EOS_ID);
    ids.resize(max_len, PAD_ID);
    ids
}

/// Words between BOS and EOS, space-joined.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .skip_while(|&&i| i == BOS_ID)
        .take_while(|&&i| i != EOS_ID && i != PAD_ID)
        .filter_map(|&i| vocab.word(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Corpus words ordered by descending frequency, ties lexicographic.
pub fn build_vocab(manifest: &Manifest) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for rec in &manifest.records {
        for cap in &rec.captions {
            for w in words(cap) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_words(entries.into_iter().map(|(w, _)| w).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{ManifestRecord, Split};

    #[test]
    fn empty_caption() {
        let v = Vocab::default();
        assert_eq!(tokenize("", &v, 5), [1, 2, 0, 0, 0]);
    }

    #[test]
    fn direct_mapping() {
        let v = Vocab::from_words(
            ["x", "y", "z", "two", "tennis", "courts"].map(String::from).to_vec(),
        );
        assert_eq!(v.id("two"), Some(7));
        assert_eq!(tokenize("two tennis courts", &v, 8), [1, 7, 8, 9, 2, 0, 0, 0]);
        assert_eq!(tokenize("Two, TENNIS courts!", &v, 8), [1, 7, 8, 9, 2, 0, 0, 0]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = Vocab::from_words(vec!["a".into()]);
        assert_eq!(tokenize("a zebra a", &v, 6), [1, 4, 3, 4, 2, 0]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = Vocab::from_words(vec!["a".into()]);
        let t = tokenize("a a a a a a a", &v, 4);
        assert_eq!(t, [1, 4, 4, 2]);
    }

    #[test]
    fn detokenize_inverts_in_vocab_captions() {
        let v = Vocab::from_words(vec!["red".into(), "square".into()]);
        let t = tokenize("red square red", &v, 8);
        assert_eq!(detokenize(&t, &v), "red square red");
    }

    fn manifest_of(caps: &[&str]) -> Manifest {
        Manifest {
            records: vec![ManifestRecord {
                image_path: "x.ppm".into(),
                image_id: 0,
                captions: caps.iter().map(|s| s.to_string()).collect(),
                split: Split::Pretrain,
            }],
        }
    }

    #[test]
    fn vocab_order() {
        assert!(build_vocab(&Manifest::default()).is_empty());
        assert_eq!(build_vocab(&Manifest::default()).len(), 4);
        let v = build_vocab(&manifest_of(&["a a b"]));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        let v = build_vocab(&manifest_of(&["c b", "b a"]));
        assert_eq!(v.words(), ["b", "a", "c"]);
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::from_words(vec!["x".into(), "y".into()]);
        assert_eq!(v.to_text(), "x\ny\n");
        assert_eq!(Vocab::parse(&v.to_text()), v);
    }
}
