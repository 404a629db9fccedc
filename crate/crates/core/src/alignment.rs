//! Edit labels that turn an answer into the handwritten content.
//!
//! Every answer is prefixed with a `<BLK>` slot, so a sequence for an answer of
//! length `m` has `m + 1` labels. Labels describe what happens to each answer
//! character: kept (`O`), replaced (`sub`), dropped (`del`), or kept with one
//! or more content characters inserted right after it (`B-add`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EditLabel {
    O,
    BSub,
    ISub,
    BDel,
    IDel,
    BAdd,
}

pub const NUM_LABELS: usize = 6;

impl EditLabel {
    pub const ALL: [EditLabel; NUM_LABELS] = [
        EditLabel::O,
        EditLabel::BSub,
        EditLabel::ISub,
        EditLabel::BDel,
        EditLabel::IDel,
        EditLabel::BAdd,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditLabel::O => "O",
            EditLabel::BSub => "B-sub",
            EditLabel::ISub => "I-sub",
            EditLabel::BDel => "B-del",
            EditLabel::IDel => "I-del",
            EditLabel::BAdd => "B-add",
        }
    }

    pub fn kind(self) -> Option<EditKind> {
        match self {
            EditLabel::O => None,
            EditLabel::BSub | EditLabel::ISub => Some(EditKind::Sub),
            EditLabel::BDel | EditLabel::IDel => Some(EditKind::Del),
            EditLabel::BAdd => Some(EditKind::Add),
        }
    }

    pub fn is_inside(self) -> bool {
        matches!(self, EditLabel::ISub | EditLabel::IDel)
    }

    /// Whether `self` may directly follow `prev`.
    pub fn may_follow(self, prev: EditLabel) -> bool {
        match self {
            EditLabel::ISub => matches!(prev, EditLabel::BSub | EditLabel::ISub),
            EditLabel::IDel => matches!(prev, EditLabel::BDel | EditLabel::IDel),
            _ => true,
        }
    }
}

impl fmt::Display for EditLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidLabels(format!("unknown label {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditKind {
    Sub,
    Del,
    Add,
}

impl EditKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EditKind::Sub => "sub",
            EditKind::Del => "del",
            EditKind::Add => "add",
        }
    }
}

/// A well-formed label sequence: `<BLK>` slot first, BIO chaining respected.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSeq(Vec<EditLabel>);

impl LabelSeq {
    pub fn new(labels: Vec<EditLabel>) -> Result<Self> {
        let first = *labels
            .first()
            .ok_or_else(|| Error::InvalidLabels("empty sequence (missing <BLK> slot)".into()))?;
        if !matches!(first, EditLabel::O | EditLabel::BAdd) {
            return Err(Error::InvalidLabels(format!("<BLK> slot carries {first}")));
        }
        for i in 1..labels.len() {
            if !labels[i].may_follow(labels[i - 1]) {
                return Err(Error::InvalidLabels(format!(
                    "{} at {i} follows {}",
                    labels[i],
                    labels[i - 1]
                )));
            }
        }
        Ok(Self(labels))
    }

    /// All-`O` sequence for an answer of length `answer_len`.
    pub fn all_o(answer_len: usize) -> Self {
        Self(vec![EditLabel::O; answer_len + 1])
    }

    pub fn labels(&self) -> &[EditLabel] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Never true: a sequence always has its `<BLK>` slot.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn answer_len(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_all_o(&self) -> bool {
        self.0.iter().all(|&l| l == EditLabel::O)
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.0.iter().map(|l| l.as_str().to_string()).collect()
    }

    pub fn parse<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let labels = items
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels)
    }

    /// Greedy decoding of per-position label scores (`scores[i][label]`) that
    /// respects the slot and BIO constraints.
    pub fn decode_constrained(scores: &[Vec<f64>]) -> Self {
        let mut out = Vec::with_capacity(scores.len());
        for (i, row) in scores.iter().enumerate() {
            let prev = out.last().copied();
            let best = EditLabel::ALL
                .iter()
                .copied()
                .filter(|l| {
                    if i == 0 {
                        matches!(l, EditLabel::O | EditLabel::BAdd)
                    } else {
                        l.may_follow(prev.expect("i > 0"))
                    }
                })
                .max_by(|a, b| row[a.index()].total_cmp(&row[b.index()]).then(b.cmp(a)))
                .expect("O is always allowed");
            out.push(best);
        }
        if out.is_empty() {
            out.push(EditLabel::O);
        }
        Self(out)
    }
}

impl fmt::Display for LabelSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<&str> = self.0.iter().map(|l| l.as_str()).collect();
        f.write_str(&s.join(" "))
    }
}

impl Serialize for LabelSeq {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelSeq {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Vec<String> = Vec::deserialize(d)?;
        LabelSeq::parse(&v).map_err(serde::de::Error::custom)
    }
}

/// Characters needed to replay the edit script, in answer order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EditPayloads<T> {
    /// One replacement per `sub` label.
    pub replacements: Vec<T>,
    /// One non-empty run per `B-add` label.
    pub insertions: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment<T> {
    pub labels: LabelSeq,
    pub payloads: EditPayloads<T>,
    /// Substituted + deleted + inserted characters.
    pub edits: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Match,
    Sub,
    Del,
    Ins,
}

const INF: u32 = u32::MAX / 4;

/// Minimal edit script from `answer` to `content`.
///
/// Insertions may only follow a kept character (or the `<BLK>` slot), because
/// a replaced or deleted position cannot also carry `B-add`. This never costs
/// extra: an insertion after a substitution run can always move left to the
/// kept character before the run. Among equally cheap scripts the walk from
/// the left prefers match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq + Clone>(content: &[T], answer: &[T]) -> Alignment<T> {
    let (m, n) = (answer.len(), content.len());
    // cost[(i, j, open)]: cheapest way to turn answer[i..] into content[j..]
    // when the gap before answer[i] can (open) or cannot take insertions.
    let idx = |i: usize, j: usize, open: usize| (i * (n + 1) + j) * 2 + open;
    let mut cost = vec![INF; (m + 1) * (n + 1) * 2];
    for i in (0..=m).rev() {
        for j in (0..=n).rev() {
            for open in 0..2 {
                let c = if i == m && j == n {
                    0
                } else {
                    let mut best = INF;
                    if i < m && j < n && answer[i] == content[j] {
                        best = best.min(cost[idx(i + 1, j + 1, 1)]);
                    }
                    if i < m && j < n && answer[i] != content[j] {
                        best = best.min(1 + cost[idx(i + 1, j + 1, 0)]);
                    }
                    if i < m {
                        best = best.min(1 + cost[idx(i + 1, j, 0)]);
                    }
                    if open == 1 && j < n {
                        best = best.min(1 + cost[idx(i, j + 1, 1)]);
                    }
                    best
                };
                cost[idx(i, j, open)] = c.min(INF);
            }
        }
    }

    let mut steps = Vec::with_capacity(m + n);
    let (mut i, mut j, mut open) = (0usize, 0usize, 1usize);
    while i < m || j < n {
        let here = cost[idx(i, j, open)];
        let step = if i < m && j < n && answer[i] == content[j] && cost[idx(i + 1, j + 1, 1)] == here
        {
            Step::Match
        } else if i < m && j < n && answer[i] != content[j] && 1 + cost[idx(i + 1, j + 1, 0)] == here
        {
            Step::Sub
        } else if i < m && 1 + cost[idx(i + 1, j, 0)] == here {
            Step::Del
        } else {
            debug_assert!(open == 1 && j < n && 1 + cost[idx(i, j + 1, 1)] == here);
            Step::Ins
        };
        match step {
            Step::Match => {
                i += 1;
                j += 1;
                open = 1;
            }
            Step::Sub => {
                i += 1;
                j += 1;
                open = 0;
            }
            Step::Del => {
                i += 1;
                open = 0;
            }
            Step::Ins => j += 1,
        }
        steps.push(step);
    }

    // Replay steps into per-position kinds and payloads.
    let mut kinds: Vec<Option<EditKind>> = vec![None; m + 1];
    let mut replacements = Vec::new();
    let mut insertions: Vec<Vec<T>> = Vec::new();
    let (mut pos, mut cj) = (0usize, 0usize);
    let mut edits = 0;
    for step in steps {
        match step {
            Step::Match => {
                pos += 1;
                cj += 1;
            }
            Step::Sub => {
                pos += 1;
                kinds[pos] = Some(EditKind::Sub);
                replacements.push(content[cj].clone());
                cj += 1;
                edits += 1;
            }
            Step::Del => {
                pos += 1;
                kinds[pos] = Some(EditKind::Del);
                edits += 1;
            }
            Step::Ins => {
                if kinds[pos] == Some(EditKind::Add) {
                    insertions.last_mut().expect("open run").push(content[cj].clone());
                } else {
                    debug_assert!(kinds[pos].is_none());
                    kinds[pos] = Some(EditKind::Add);
                    insertions.push(vec![content[cj].clone()]);
                }
                cj += 1;
                edits += 1;
            }
        }
    }

    let mut labels = Vec::with_capacity(m + 1);
    for p in 0..=m {
        let prev = if p == 0 { None } else { kinds[p - 1] };
        labels.push(match kinds[p] {
            None => EditLabel::O,
            Some(EditKind::Add) => EditLabel::BAdd,
            Some(EditKind::Sub) if prev == Some(EditKind::Sub) => EditLabel::ISub,
            Some(EditKind::Sub) => EditLabel::BSub,
            Some(EditKind::Del) if prev == Some(EditKind::Del) => EditLabel::IDel,
            Some(EditKind::Del) => EditLabel::BDel,
        });
    }
    Alignment {
        labels: LabelSeq::new(labels).expect("constructed labels are well formed"),
        payloads: EditPayloads {
            replacements,
            insertions,
        },
        edits,
    }
}

/// Label sequence turning `answer` into `content`.
pub fn derive_labels<T: PartialEq + Clone>(content: &[T], answer: &[T]) -> LabelSeq {
    align(content, answer).labels
}

/// Convenience over `&str`.
pub fn derive_labels_str(content: &str, answer: &str) -> LabelSeq {
    let c: Vec<char> = content.chars().collect();
    let a: Vec<char> = answer.chars().collect();
    derive_labels(&c, &a)
}

/// Replays an edit script on `answer`.
pub fn apply_labels<T: Clone>(
    answer: &[T],
    labels: &LabelSeq,
    payloads: &EditPayloads<T>,
) -> Result<Vec<T>> {
    if labels.len() != answer.len() + 1 {
        return Err(Error::InconsistentScript(format!(
            "{} labels for an answer of length {}",
            labels.len(),
            answer.len()
        )));
    }
    let mut out = Vec::with_capacity(answer.len());
    let mut reps = payloads.replacements.iter();
    let mut ins = payloads.insertions.iter();
    let mut insert = |out: &mut Vec<T>| -> Result<()> {
        match ins.next() {
            Some(run) if !run.is_empty() => {
                out.extend(run.iter().cloned());
                Ok(())
            }
            Some(_) => Err(Error::InconsistentScript("empty insertion run".into())),
            None => Err(Error::InconsistentScript("missing insertion payload".into())),
        }
    };
    for (p, &label) in labels.labels().iter().enumerate() {
        if p == 0 {
            if label == EditLabel::BAdd {
                insert(&mut out)?;
            }
            continue;
        }
        let a = &answer[p - 1];
        match label.kind() {
            None => out.push(a.clone()),
            Some(EditKind::Sub) => out.push(
                reps.next()
                    .ok_or_else(|| Error::InconsistentScript("missing replacement".into()))?
                    .clone(),
            ),
            Some(EditKind::Del) => {}
            Some(EditKind::Add) => {
                out.push(a.clone());
                insert(&mut out)?;
            }
        }
    }
    if reps.next().is_some() {
        return Err(Error::InconsistentScript("unused replacements".into()));
    }
    if ins.next().is_some() {
        return Err(Error::InconsistentScript("unused insertions".into()));
    }
    Ok(out)
}

/// `0` when every label is `O` (answer judged right), else `1`.
pub fn reduce_binary(labels: &LabelSeq) -> u8 {
    u8::from(!labels.is_all_o())
}

/// Plain Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use EditLabel::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn labels(content: &str, answer: &str) -> Vec<EditLabel> {
        derive_labels_str(content, answer).labels().to_vec()
    }

    #[test]
    fn matching_pair_is_all_o() {
        assert_eq!(labels("水何澹澹", "水何澹澹"), vec![O; 5]);
        assert_eq!(reduce_binary(&derive_labels_str("水何澹澹", "水何澹澹")), 0);
    }

    #[test]
    fn single_substitution() {
        assert_eq!(labels("《中度》", "《中庸》"), vec![O, O, O, BSub, O]);
    }

    #[test]
    fn insertions_mark_the_preceding_character() {
        assert_eq!(labels("自己寻找工作", "自寻工作"), vec![O, BAdd, BAdd, O, O]);
    }

    #[test]
    fn fully_different_line_is_one_sub_run() {
        assert_eq!(
            labels("自缘身在最高层", "不畏浮云遮望眼"),
            vec![O, BSub, ISub, ISub, ISub, ISub, ISub, ISub]
        );
    }

    #[test]
    fn empty_pair() {
        assert_eq!(labels("", ""), vec![O]);
        assert_eq!(reduce_binary(&derive_labels_str("", "")), 0);
    }

    #[test]
    fn insertion_before_first_char_uses_blk() {
        let a = align(&chars("唐诗"), &chars("诗"));
        assert_eq!(a.labels.labels(), &[BAdd, O]);
        assert_eq!(a.payloads.insertions, vec![vec!['唐']]);
    }

    #[test]
    fn deletions_and_mixed_kinds_do_not_chain() {
        assert_eq!(labels("b", "ab"), vec![O, BDel, O]);
        assert_eq!(labels("ad", "abcd"), vec![O, O, BDel, IDel, O]);
        // adjacent spans of different kinds each start with B-
        assert_eq!(labels("cx", "abc"), vec![O, BSub, ISub, BDel]);
        let l = labels("xz", "abz");
        assert_eq!(l, vec![O, BSub, BDel, O]);
    }

    #[test]
    fn substitution_then_insertion_moves_the_insertion_left() {
        // "a" -> "bc": the insertion cannot sit on a substituted position.
        let a = align(&chars("bc"), &chars("a"));
        assert_eq!(a.labels.labels(), &[BAdd, BSub]);
        assert_eq!(a.edits, 2);
        assert_eq!(apply_labels(&chars("a"), &a.labels, &a.payloads).unwrap(), chars("bc"));
    }

    #[test]
    fn apply_all_o_is_identity() {
        let ans = chars("abc");
        let out = apply_labels(&ans, &LabelSeq::all_o(3), &EditPayloads::default()).unwrap();
        assert_eq!(out, ans);
    }

    #[test]
    fn apply_single_deletion() {
        let l = LabelSeq::new(vec![O, BDel, O]).unwrap();
        let out = apply_labels(&chars("ab"), &l, &EditPayloads::default()).unwrap();
        assert_eq!(out, chars("b"));
    }

    #[test]
    fn apply_rejects_wrong_arity() {
        let l = LabelSeq::new(vec![O, BSub, O]).unwrap();
        assert!(matches!(
            apply_labels(&chars("ab"), &l, &EditPayloads::default()),
            Err(Error::InconsistentScript(_))
        ));
        let extra = EditPayloads {
            replacements: vec!['x', 'y'],
            insertions: vec![],
        };
        assert!(apply_labels(&chars("ab"), &l, &extra).is_err());
        assert!(apply_labels(&chars("abc"), &l, &extra).is_err());
    }

    #[test]
    fn label_seq_validation() {
        assert!(LabelSeq::new(vec![]).is_err());
        assert!(LabelSeq::new(vec![BSub, O]).is_err());
        assert!(LabelSeq::new(vec![O, ISub]).is_err());
        assert!(LabelSeq::new(vec![O, BDel, ISub]).is_err());
        assert!(LabelSeq::new(vec![O, BAdd, IDel]).is_err());
        assert!(LabelSeq::new(vec![BAdd, BSub, ISub, BDel, IDel, O]).is_ok());
    }

    #[test]
    fn labels_serialize_as_strings() {
        let l = LabelSeq::new(vec![O, BSub, ISub, BAdd]).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(s, r#"["O","B-sub","I-sub","B-add"]"#);
        assert_eq!(serde_json::from_str::<LabelSeq>(&s).unwrap(), l);
        assert!(serde_json::from_str::<LabelSeq>(r#"["O","I-del"]"#).is_err());
    }

    #[test]
    fn constrained_decode_repairs_bio() {
        let mut s = vec![vec![0.0; 6]; 3];
        s[0][BSub.index()] = 5.0; // not allowed on <BLK>
        s[1][ISub.index()] = 5.0; // not allowed after O
        s[2][ISub.index()] = 5.0;
        s[1][BSub.index()] = 4.0;
        let l = LabelSeq::decode_constrained(&s);
        assert_eq!(l.labels(), &[O, BSub, ISub]);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(&chars("abc"), &chars("abd")), 1);
        assert_eq!(levenshtein(&chars(""), &chars("ab")), 2);
        assert_eq!(levenshtein(&chars("kitten"), &chars("sitting")), 3);
    }
}
