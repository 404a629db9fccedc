//! Derives edit labels for a few (answer, written) pairs and replays them.
//!
//! ```text
//! cargo run --example edit_labels
//! cargo run --example edit_labels -- 天下之中 天上之中
//! ```

use clozecheck::alignment::{align, apply_labels, reduce_binary};

fn show(answer: &str, written: &str) {
    let a: Vec<char> = answer.chars().collect();
    let h: Vec<char> = written.chars().collect();
    let al = align(&h, &a);
    let replay: String = apply_labels(&a, &al.labels, &al.payloads).expect("labels fit the answer").into_iter().collect();
    println!(
        "{answer:>12} | {written:<12} {:<32} edits={} wrong={} replay={replay}",
        al.labels.to_strings().join(" "),
        al.edits,
        reduce_binary(&al.labels),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [answer, written] = args.as_slice() {
        show(answer, written);
        return;
    }
    for (answer, written) in [
        ("abcd", "abcd"),
        ("abcd", "abxd"),
        ("abcd", "ad"),
        ("abcd", "aXbYcd"),
        ("abcd", "Xabcd"),
        ("abcdefg", "uvwxyz"),
    ] {
        show(answer, written);
    }
}
