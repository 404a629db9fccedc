//! Fits a two-layer ReLU network to XOR with AdamW and a cosine schedule.

use clozecheck_tensor::{cosine_anneal, AdamW, AdamWConfig, Init, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> clozecheck_tensor::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let w1 = store.init("w1", [2, 8], Init::He { fan_in: 2 }, &mut rng);
    let b1 = store.init("b1", [8], Init::Zeros, &mut rng);
    let w2 = store.init("w2", [8, 2], Init::XavierUniform { fan_in: 8, fan_out: 2 }, &mut rng);
    let b2 = store.init("b2", [2], Init::Zeros, &mut rng);

    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]])?;
    let y = [Some(0), Some(1), Some(1), Some(0)];

    let steps = 300;
    let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    for step in 0..steps {
        let mut t = Tape::new(true, step as u64);
        let xv = t.constant(x.clone());
        let (w1v, b1v, w2v, b2v) = (t.param(&store, w1), t.param(&store, b1), t.param(&store, w2), t.param(&store, b2));
        let h = t.matmul(xv, w1v)?;
        let h = t.add_bias(h, b1v)?;
        let h = t.relu(h);
        let o = t.matmul(h, w2v)?;
        let o = t.add_bias(o, b2v)?;
        let lp = t.log_softmax(o)?;
        let loss = t.nll(lp, &y, 0.25)?;

        store.zero_grad();
        t.backward(loss).accumulate(&t, &mut store);
        opt.step(&mut store, cosine_anneal(step, steps, 0.05))?;
        if step % 50 == 0 || step == steps - 1 {
            let p: Vec<f64> = t.value(lp).data().chunks(2).map(|r| r[1].exp()).collect();
            println!("step {step:>3}  loss {:.4}  p(1) {:?}", t.value(loss).item(), p.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
        }
    }
    Ok(())
}
