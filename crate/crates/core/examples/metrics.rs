//! Scores predicted label sequences against gold ones at span, token and
//! binary level.

use clozecheck::alignment::derive_labels_str;
use clozecheck::eval::{report_table, spans, MetricsReport};

fn main() -> clozecheck::error::Result<()> {
    let pairs = [("abcd", "abcd"), ("abcd", "abxd"), ("abcd", "ad"), ("abc", "abcz")];
    let gold: Vec<_> = pairs.iter().map(|(a, h)| derive_labels_str(h, a)).collect();
    // a tagger that finds the substitution, misplaces the deletion and misses the insertion
    let pred = vec![
        gold[0].clone(),
        gold[1].clone(),
        derive_labels_str("acd", "abcd"),
        derive_labels_str("abc", "abc"),
    ];
    for (g, p) in gold.iter().zip(&pred) {
        println!("gold {:?}\npred {:?}", spans(g), spans(p));
    }
    let r = MetricsReport::from_labels("toy", &pred, &gold, None)?;
    print!("{}", report_table(&[r]));
    Ok(())
}
