//! The synthetic alphabet, its special ids and the clustered confusion set.

use clozecheck::vocab::{ConfusionSet, Vocabulary};
use rand::SeedableRng;

fn main() -> clozecheck::error::Result<()> {
    let v = Vocabulary::synthetic();
    println!("{} characters: {}", v.num_chars(), v.chars().iter().collect::<String>());
    println!("ctc blank {}, <BLK> {}, padding {}, table size {}", v.blank_id(), v.blk_id(), v.pad_id(), v.size());

    let text: String = v.chars()[..5].iter().collect();
    let ids = v.encode_text(&text)?;
    println!("{text} -> {ids:?} -> {}", v.decode_text(&ids)?);

    let cs = ConfusionSet::clustered(&v);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for &c in &v.chars()[..8] {
        println!("{c}: similar {:?}, one sampled {}", cs.get(c).unwrap_or(&[]), cs.sample_confusion(c, &mut rng)?);
    }
    Ok(())
}
