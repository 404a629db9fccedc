//! Character inventory, reserved symbols and shape-confusion sets.
//!
//! Ids are contiguous: characters take `0..n`, then the CTC blank (`n`), the
//! `<BLK>` placeholder (`n + 1`) and text padding (`n + 2`). Keeping the blank
//! at `n` lets the OCR head use the first `n + 1` ids directly.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;

use crate::error::{io_err, Error, Result};

/// Number of characters in the built-in synthetic alphabet.
pub const SYNTHETIC_SIZE: usize = 64;
/// Members per shape cluster in the synthetic alphabet.
pub const CLUSTER_SIZE: usize = 4;

const SYNTHETIC_CHARS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789#@";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    CtcBlank,
    Blk,
    PadText,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Self { chars, index })
    }

    /// The 64-character desk-scale alphabet.
    pub fn synthetic() -> Self {
        Self::new(SYNTHETIC_CHARS.chars().collect()).expect("built-in alphabet is valid")
    }

    /// One character per line; blank lines are ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut chars = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut it = line.chars();
            let c = it.next().expect("non-empty");
            if it.next().is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: expected one character, got {line:?}",
                    path.display(),
                    n + 1
                )));
            }
            chars.push(c);
        }
        Self::new(chars)
    }

    pub fn to_file_string(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    /// Number of real characters (excludes the reserved ids).
    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    /// Total id count including reserved symbols.
    pub fn size(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn special_id(&self, s: Special) -> usize {
        let n = self.chars.len();
        match s {
            Special::CtcBlank => n,
            Special::Blk => n + 1,
            Special::PadText => n + 2,
        }
    }

    pub fn blank_id(&self) -> usize {
        self.special_id(Special::CtcBlank)
    }

    pub fn blk_id(&self) -> usize {
        self.special_id(Special::Blk)
    }

    pub fn pad_id(&self) -> usize {
        self.special_id(Special::PadText)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(pos, ch)| self.id_of(ch).ok_or(Error::UnknownChar { pos, ch }))
            .collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| self.char_of(id).ok_or(Error::UnknownId(id)))
            .collect()
    }

    pub fn random_char(&self, rng: &mut impl Rng) -> char {
        self.chars[rng.gen_range(0..self.chars.len())]
    }

    /// Uniform over vocabulary characters other than `c`.
    pub fn random_char_except(&self, c: char, rng: &mut impl Rng) -> char {
        if self.chars.len() == 1 {
            return self.chars[0];
        }
        loop {
            let d = self.random_char(rng);
            if d != c {
                return d;
            }
        }
    }
}

/// Removes every character in `strip` from `text`.
pub fn strip_chars(text: &str, strip: &[char]) -> String {
    if strip.is_empty() {
        return text.to_string();
    }
    text.chars().filter(|c| !strip.contains(c)).collect()
}

/// Map from a character to its shape-similar substitutes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionSet {
    pairs: BTreeMap<char, Vec<char>>,
}

impl ConfusionSet {
    pub fn new(pairs: BTreeMap<char, Vec<char>>, vocab: &Vocabulary) -> Result<Self> {
        for (&c, subs) in &pairs {
            if subs.is_empty() {
                return Err(Error::InvalidConfusion(format!("{c:?} has no substitutes")));
            }
            for &s in subs {
                if s == c {
                    return Err(Error::InvalidConfusion(format!("{c:?} maps to itself")));
                }
                if !vocab.contains(s) {
                    return Err(Error::InvalidConfusion(format!(
                        "{c:?} -> {s:?}: target not in vocabulary"
                    )));
                }
            }
        }
        Ok(Self { pairs })
    }

    /// Clusters of [`CLUSTER_SIZE`] consecutive characters; each member maps to the others.
    pub fn clustered(vocab: &Vocabulary) -> Self {
        let mut pairs = BTreeMap::new();
        for group in vocab.chars().chunks(CLUSTER_SIZE) {
            if group.len() < 2 {
                continue;
            }
            for &c in group {
                pairs.insert(c, group.iter().copied().filter(|&d| d != c).collect());
            }
        }
        Self { pairs }
    }

    /// `char<TAB>sub1,sub2,...` per line.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (head, tail) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidConfusion(format!("line {}: missing tab", n + 1))
            })?;
            let mut hc = head.chars();
            let c = match (hc.next(), hc.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(Error::InvalidConfusion(format!(
                        "line {}: key must be one character",
                        n + 1
                    )))
                }
            };
            let subs = tail
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let mut it = s.chars();
                    match (it.next(), it.next()) {
                        (Some(x), None) => Ok(x),
                        _ => Err(Error::InvalidConfusion(format!(
                            "line {}: substitute {s:?} is not one character",
                            n + 1
                        ))),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            pairs.insert(c, subs);
        }
        Self::new(pairs, vocab)
    }

    pub fn from_file(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, vocab)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (c, subs) in &self.pairs {
            let list: Vec<String> = subs.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("{c}\t{}\n", list.join(",")));
        }
        out
    }

    pub fn get(&self, c: char) -> Option<&[char]> {
        self.pairs.get(&c).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &[char])> {
        self.pairs.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    /// A shape-similar substitute for `c`, uniform over its list.
    pub fn sample_confusion(&self, c: char, rng: &mut impl Rng) -> Result<char> {
        let subs = self.pairs.get(&c).ok_or(Error::NoConfusion(c))?;
        Ok(subs[rng.gen_range(0..subs.len())])
    }

    /// Like [`Self::sample_confusion`], falling back to a uniform different
    /// vocabulary character when `c` has no entry.
    pub fn substitute(&self, c: char, vocab: &Vocabulary, rng: &mut impl Rng) -> char {
        match self.sample_confusion(c, rng) {
            Ok(s) => s,
            Err(_) => vocab.random_char_except(c, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(Vocabulary::synthetic().encode_text("").unwrap().is_empty());
    }

    #[test]
    fn singleton_encodes_to_its_id() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.encode_text("F").unwrap(), vec![5]);
    }

    #[test]
    fn unknown_char_reports_position() {
        let v = Vocabulary::synthetic();
        let err = v.encode_text("AB!").unwrap_err();
        assert!(matches!(err, Error::UnknownChar { pos: 2, ch: '!' }));
    }

    #[test]
    fn specials_are_distinct_and_past_chars() {
        let v = Vocabulary::synthetic();
        let ids = [v.blank_id(), v.blk_id(), v.pad_id()];
        assert_eq!(ids, [64, 65, 66]);
        assert_eq!(v.size(), 67);
        assert!(v.decode_text(&[v.blank_id()]).is_err());
    }

    #[test]
    fn round_trip_exhaustive_short_strings() {
        let v = Vocabulary::new(vec!['w', 'x', 'y', 'z']).unwrap();
        let mut strings = vec![String::new()];
        for a in v.chars() {
            strings.push(a.to_string());
            for b in v.chars() {
                strings.push(format!("{a}{b}"));
            }
        }
        assert_eq!(strings.len(), 1 + 4 + 16);
        for s in strings {
            assert_eq!(v.decode_text(&v.encode_text(&s).unwrap()).unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn round_trip_random(idx in proptest::collection::vec(0usize..SYNTHETIC_SIZE, 0..=32)) {
            let v = Vocabulary::synthetic();
            let s: String = idx.iter().map(|&i| v.chars()[i]).collect();
            let ids = v.encode_text(&s).unwrap();
            prop_assert_eq!(ids.len(), s.chars().count());
            prop_assert_eq!(v.decode_text(&ids).unwrap(), s);
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::new("水何澹山岛竦峙".chars().collect()).unwrap();
        std::fs::write(&p, v.to_file_string()).unwrap();
        assert_eq!(Vocabulary::from_file(&p).unwrap(), v);
    }

    #[test]
    fn clustered_confusions_are_valid() {
        let v = Vocabulary::synthetic();
        let cs = ConfusionSet::clustered(&v);
        assert_eq!(cs.len(), 64);
        for (c, subs) in cs.iter() {
            assert_eq!(subs.len(), CLUSTER_SIZE - 1);
            assert!(!subs.contains(&c));
            assert!(subs.iter().all(|s| v.contains(*s)));
        }
        let again = ConfusionSet::parse(&cs.to_file_string(), &v).unwrap();
        assert_eq!(again, cs);
    }

    #[test]
    fn confusion_rejects_self_map_and_foreign_targets() {
        let v = Vocabulary::synthetic();
        assert!(ConfusionSet::parse("A\tA", &v).is_err());
        assert!(ConfusionSet::parse("A\t!", &v).is_err());
        assert!(ConfusionSet::parse("A\t", &v).is_err());
    }

    #[test]
    fn forced_choice_and_determinism() {
        let v = Vocabulary::synthetic();
        let cs = ConfusionSet::parse("A\tB\nC\tD,E,F", &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(cs.sample_confusion('A', &mut rng).unwrap(), 'B');
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8).map(|_| cs.sample_confusion('C', &mut rng).unwrap()).collect::<String>()
        };
        assert_eq!(draw(7), draw(7));
        assert!(matches!(cs.sample_confusion('Z', &mut rng), Err(Error::NoConfusion('Z'))));
        for _ in 0..50 {
            assert_ne!(cs.substitute('Z', &v, &mut rng), 'Z');
        }
    }

    #[test]
    fn three_way_draws_are_balanced() {
        let v = Vocabulary::synthetic();
        let cs = ConfusionSet::parse("C\tD,E,F", &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = HashMap::new();
        for _ in 0..10_000 {
            *counts.entry(cs.sample_confusion('C', &mut rng).unwrap()).or_insert(0) += 1;
        }
        for k in ['D', 'E', 'F'] {
            let f = counts[&k] as f64 / 10_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.05, "{k}: {f}");
        }
    }

    #[test]
    fn strip_removes_listed_chars() {
        assert_eq!(strip_chars("《中庸》", &['《', '》']), "中庸");
        assert_eq!(strip_chars("abc", &[]), "abc");
    }
}
