//! Sequence-level and binary metrics, and report formatting.
//!
//! Binary metrics treat `y = 1` (answer judged wrong) as the positive class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::{EditKind, EditLabel, LabelSeq};
use crate::error::{Error, Result};
use crate::vocab::strip_chars;

/// An edit span. Substitution and deletion spans cover answer positions
/// `start..=end` (label positions, so `<BLK>` is 0); an addition sits at one
/// position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub kind: EditKind,
    pub start: usize,
    pub end: usize,
}

/// BIO chunking of a label sequence.
pub fn spans(labels: &LabelSeq) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    for (i, &l) in labels.labels().iter().enumerate() {
        match l {
            EditLabel::O => {}
            EditLabel::BAdd => out.push(Span {
                kind: EditKind::Add,
                start: i,
                end: i,
            }),
            EditLabel::BSub | EditLabel::BDel => out.push(Span {
                kind: l.kind().expect("edit label"),
                start: i,
                end: i,
            }),
            EditLabel::ISub | EditLabel::IDel => match out.last_mut() {
                Some(s) if Some(s.kind) == l.kind() && s.end + 1 == i => s.end = i,
                // well-formed sequences never get here; treat a stray inside label as a new span
                _ => out.push(Span {
                    kind: l.kind().expect("edit label"),
                    start: i,
                    end: i,
                }),
            },
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    /// From true positives, predicted positives and gold positives.
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn check_pairs(pred: &[LabelSeq], gold: &[LabelSeq]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(format!("{} predictions for {} references", pred.len(), gold.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch(format!(
                "pair {i}: {} predicted labels, {} reference labels",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Micro-averaged exact-match span P/R/F1.
pub fn sequence_metrics(pred: &[LabelSeq], gold: &[LabelSeq]) -> Result<Prf> {
    check_pairs(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps = spans(p);
        let gs = spans(g);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(Prf::from_counts(tp, np, ng))
}

/// Token-level P/R/F1 over non-`O` labels: a position counts as correct when
/// both sides carry the same edit label.
pub fn token_metrics(pred: &[LabelSeq], gold: &[LabelSeq]) -> Result<Prf> {
    check_pairs(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        for (&a, &b) in p.labels().iter().zip(g.labels()) {
            np += usize::from(a != EditLabel::O);
            ng += usize::from(b != EditLabel::O);
            tp += usize::from(a != EditLabel::O && a == b);
        }
    }
    Ok(Prf::from_counts(tp, np, ng))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub counts: Counts,
}

pub fn binary_metrics(pred: &[u8], gold: &[u8]) -> Result<BinaryMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(format!("{} predictions for {} references", pred.len(), gold.len())));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        if p > 1 || g > 1 {
            return Err(Error::Config(format!("binary labels must be 0 or 1, got {p} and {g}")));
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    let prf = Prf::from_counts(c.tp, c.tp + c.fp, c.tp + c.fn_);
    Ok(BinaryMetrics {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
        counts: c,
    })
}

/// The baseline decision: `0` only when the recognised text equals the
/// answer exactly once `strip` characters are removed from both.
pub fn ocr_pipeline_correct(decoded: &str, answer: &str, strip: &[char]) -> u8 {
    u8::from(strip_chars(decoded, strip) != strip_chars(answer, strip))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    /// Exact-match span metrics.
    pub seq_precision: f64,
    pub seq_recall: f64,
    pub seq_f1: f64,
    /// Per-position label metrics, reported alongside the span ones.
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
    pub bin_precision: f64,
    pub bin_recall: f64,
    pub bin_f1: f64,
    pub bin_accuracy: f64,
    pub cer: Option<f64>,
    pub counts: Counts,
    /// Free-form tags, e.g. ablation settings.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Binary predictions are taken from `pred` through [`crate::alignment::reduce_binary`].
    pub fn from_labels(name: &str, pred: &[LabelSeq], gold: &[LabelSeq], cer: Option<f64>) -> Result<Self> {
        let seq = sequence_metrics(pred, gold)?;
        let tok = token_metrics(pred, gold)?;
        let py: Vec<u8> = pred.iter().map(crate::alignment::reduce_binary).collect();
        let gy: Vec<u8> = gold.iter().map(crate::alignment::reduce_binary).collect();
        let bin = binary_metrics(&py, &gy)?;
        Ok(Self {
            name: name.to_string(),
            seq_precision: seq.precision,
            seq_recall: seq.recall,
            seq_f1: seq.f1,
            token_precision: tok.precision,
            token_recall: tok.recall,
            token_f1: tok.f1,
            bin_precision: bin.precision,
            bin_recall: bin.recall,
            bin_f1: bin.f1,
            bin_accuracy: bin.accuracy,
            cer,
            counts: bin.counts,
            tags: BTreeMap::new(),
        })
    }

    pub fn with_tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    fn rates(&self) -> [f64; 10] {
        [
            self.seq_precision,
            self.seq_recall,
            self.seq_f1,
            self.token_precision,
            self.token_recall,
            self.token_f1,
            self.bin_precision,
            self.bin_recall,
            self.bin_f1,
            self.bin_accuracy,
        ]
    }

    pub fn rates_in_unit_interval(&self) -> bool {
        self.rates().iter().chain(self.cer.iter()).all(|r| (0.0..=1.0).contains(r))
    }
}

/// Fixed-width table: one row per report, sequence-level then binary-level columns.
pub fn report_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$} | {:^20} | {:^20} | {:^27}",
        "",
        "span",
        "token",
        "binary (y=1)"
    );
    let _ = writeln!(
        s,
        "{:<width$} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6}",
        "model", "P", "R", "F1", "P", "R", "F1", "P", "R", "F1", "Acc"
    );
    let _ = writeln!(s, "{}", "-".repeat(width + 77));
    for r in reports {
        let v = r.rates();
        let _ = writeln!(
            s,
            "{:<width$} | {:>6.4} {:>6.4} {:>6.4} | {:>6.4} {:>6.4} {:>6.4} | {:>6.4} {:>6.4} {:>6.4} {:>6.4}",
            r.name, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> LabelSeq {
        let items: Vec<&str> = s.split_whitespace().collect();
        LabelSeq::parse(&items).unwrap()
    }

    #[test]
    fn span_chunking() {
        let s = spans(&seq("B-add B-sub I-sub O B-del B-add"));
        assert_eq!(
            s,
            vec![
                Span { kind: EditKind::Add, start: 0, end: 0 },
                Span { kind: EditKind::Sub, start: 1, end: 2 },
                Span { kind: EditKind::Del, start: 4, end: 4 },
                Span { kind: EditKind::Add, start: 5, end: 5 },
            ]
        );
    }

    #[test]
    fn hand_counted_sequence_metrics() {
        let gold = [seq("O O O B-sub O")];
        let pred = [seq("O B-del O B-sub O")];
        let m = sequence_metrics(&pred, &gold).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);

        let none = sequence_metrics(&[seq("O O O O O")], &gold).unwrap();
        assert_eq!(none, Prf::default());

        let same = sequence_metrics(&gold, &gold).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));

        assert!(matches!(sequence_metrics(&[seq("O O")], &gold), Err(Error::LengthMismatch(_))));
        assert!(matches!(sequence_metrics(&[], &gold), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn span_boundaries_must_match() {
        let gold = [seq("O B-sub I-sub O")];
        let pred = [seq("O B-sub O O")];
        assert_eq!(sequence_metrics(&pred, &gold).unwrap().f1, 0.0);
        // token level gives partial credit
        let t = token_metrics(&pred, &gold).unwrap();
        assert_eq!((t.precision, t.recall), (1.0, 0.5));
    }

    #[test]
    fn binary_on_the_skewed_ratio() {
        let gold: Vec<u8> = std::iter::repeat(0).take(573).chain(std::iter::repeat(1).take(100)).collect();
        let all_wrong = binary_metrics(&vec![1; 673], &gold).unwrap();
        assert_eq!(all_wrong.recall, 1.0);
        assert!((all_wrong.precision - 100.0 / 673.0).abs() < 1e-12);
        let all_right = binary_metrics(&vec![0; 673], &gold).unwrap();
        assert_eq!(all_right.recall, 0.0);
        assert_eq!(all_right.f1, 0.0);
        assert!((all_right.accuracy - 573.0 / 673.0).abs() < 1e-12);
        let perfect = binary_metrics(&gold, &gold).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(binary_metrics(&[0, 1], &[0]).is_err());
        assert!(binary_metrics(&[2], &[0]).is_err());
    }

    #[test]
    fn exact_match_rule() {
        assert_eq!(ocr_pipeline_correct("abc", "abc", &[]), 0);
        assert_eq!(ocr_pipeline_correct("abd", "abc", &[]), 1);
        assert_eq!(ocr_pipeline_correct("a.bc", "abc.", &['.']), 0);
    }

    #[test]
    fn table_has_a_row_per_report() {
        let gold = [seq("O O B-sub")];
        let r = MetricsReport::from_labels("mac", &gold, &gold, None).unwrap();
        let t = report_table(&[r.clone(), r.with_tag("n", 1)]);
        assert_eq!(t.lines().count(), 5);
        assert!(t.contains("1.0000"));
    }
}
