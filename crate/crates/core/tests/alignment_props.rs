use clozecheck::alignment::{align, apply_labels, derive_labels, levenshtein, reduce_binary, EditKind, EditLabel};
use proptest::prelude::*;

fn text(max: usize) -> impl Strategy<Value = Vec<char>> {
    proptest::collection::vec(prop::sample::select(vec!['a', 'b', 'c', 'd', 'e']), 0..=max)
}

/// Quadratic-memory edit distance, separate from the library's.
fn oracle(a: &[char], b: &[char]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Positions labelled sub/del plus every inserted character.
fn counted_edits(labels: &[EditLabel], inserted: usize) -> usize {
    labels.iter().filter(|l| matches!(l.kind(), Some(EditKind::Sub | EditKind::Del))).count() + inserted
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip(answer in text(12), content in text(12)) {
        let a = align(&content, &answer);
        prop_assert_eq!(apply_labels(&answer, &a.labels, &a.payloads).unwrap(), content);
    }

    #[test]
    fn edit_count_is_minimal(answer in text(12), content in text(12)) {
        let a = align(&content, &answer);
        let d = oracle(&answer, &content);
        prop_assert_eq!(a.edits, d);
        prop_assert_eq!(levenshtein(&answer, &content), d);
        let inserted: usize = a.payloads.insertions.iter().map(Vec::len).sum();
        prop_assert_eq!(counted_edits(a.labels.labels(), inserted), d);
    }

    #[test]
    fn self_pair_is_all_o(h in text(16)) {
        prop_assert!(derive_labels(&h, &h).is_all_o());
    }

    #[test]
    fn binary_is_zero_iff_equal(answer in text(8), content in text(8)) {
        let y = reduce_binary(&derive_labels(&content, &answer));
        prop_assert_eq!(y == 0, content == answer);
    }

    #[test]
    fn output_is_well_formed_bio(answer in text(12), content in text(12)) {
        let labels = derive_labels(&content, &answer);
        prop_assert_eq!(labels.len(), answer.len() + 1);
        prop_assert_eq!(labels.labels()[0].kind().filter(|k| *k != EditKind::Add), None);
        let mut prev = EditLabel::O;
        for &l in labels.labels() {
            prop_assert!(l.may_follow(prev), "{:?} after {:?}", l, prev);
            prev = l;
        }
    }
}
