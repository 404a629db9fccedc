use clozecheck::alignment::{derive_labels_str, reduce_binary, LabelSeq};
use clozecheck::eval::{binary_metrics, sequence_metrics, token_metrics, MetricsReport};
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = (String, String, String)> {
    let s = || proptest::collection::vec(prop::sample::select(vec!['a', 'b', 'c']), 0..=5);
    (s(), s(), s()).prop_map(|(a, h, p)| (a.iter().collect(), h.iter().collect(), p.iter().collect()))
}

/// Gold labels from (answer, content); predicted labels from (answer, a guess).
fn labels(cases: &[(String, String, String)]) -> (Vec<LabelSeq>, Vec<LabelSeq>) {
    cases
        .iter()
        .map(|(a, h, p)| (derive_labels_str(p, a), derive_labels_str(h, a)))
        .unzip()
}

proptest! {
    #[test]
    fn metrics_ignore_order(cases in proptest::collection::vec(pair(), 1..20), rot in 0usize..20) {
        let (pred, gold) = labels(&cases);
        let mut shuffled = cases.clone();
        shuffled.rotate_left(rot % cases.len());
        shuffled.reverse();
        let (pred2, gold2) = labels(&shuffled);
        prop_assert_eq!(sequence_metrics(&pred, &gold).unwrap(), sequence_metrics(&pred2, &gold2).unwrap());
        prop_assert_eq!(token_metrics(&pred, &gold).unwrap(), token_metrics(&pred2, &gold2).unwrap());
        let bin = |p: &[LabelSeq], g: &[LabelSeq]| {
            let pb: Vec<u8> = p.iter().map(reduce_binary).collect();
            let gb: Vec<u8> = g.iter().map(reduce_binary).collect();
            binary_metrics(&pb, &gb).unwrap()
        };
        prop_assert_eq!(bin(&pred, &gold), bin(&pred2, &gold2));
    }

    #[test]
    fn report_paths_agree_and_rates_are_bounded(cases in proptest::collection::vec(pair(), 1..20)) {
        let (pred, gold) = labels(&cases);
        let r = MetricsReport::from_labels("p", &pred, &gold, None).unwrap();
        // the model's own binary output: wrong iff the guess differs from the answer
        let direct_pred: Vec<u8> = cases.iter().map(|(a, _, p)| u8::from(a != p)).collect();
        let direct_gold: Vec<u8> = cases.iter().map(|(a, h, _)| u8::from(a != h)).collect();
        let b = binary_metrics(&direct_pred, &direct_gold).unwrap();
        prop_assert_eq!(r.bin_precision, b.precision);
        prop_assert_eq!(r.bin_recall, b.recall);
        prop_assert_eq!(r.bin_accuracy, b.accuracy);
        prop_assert_eq!(r.counts, b.counts);
        prop_assert!(r.rates_in_unit_interval());
    }
}

#[test]
fn length_mismatch_is_an_error() {
    let one = vec![LabelSeq::all_o(2)];
    assert!(sequence_metrics(&one, &[]).is_err());
    assert!(binary_metrics(&[0, 1], &[1]).is_err());
    assert!(binary_metrics(&[2], &[1]).is_err());
}
