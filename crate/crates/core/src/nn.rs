//! Layers built on the tape: linear maps, layer norm, multi-head attention
//! and the Transformer blocks used by the fusion model.

use clozecheck_tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// A tape bound to one parameter store. Each parameter is copied onto the
/// tape at most once, however many samples in the batch use it.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    stats: Vec<BatchStats>,
}

/// Batch statistics seen by one [`BatchNorm`] during a training forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Moves the running statistics towards this batch by `momentum`.
    pub fn apply(&self, store: &mut ParamStore, momentum: f64) {
        for (id, batch) in [(self.mean_id, &self.mean), (self.var_id, &self.var)] {
            for (r, b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                *r += momentum * (b - *r);
            }
        }
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, training: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(training, seed),
            store,
            bound: vec![None; store.len()],
            stats: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            stats: Vec::new(),
        }
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// The tape and the batch statistics recorded while building it.
    pub fn into_parts(self) -> (Tape, Vec<BatchStats>) {
        (self.tape, self.stats)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.init(
            format!("{name}.w"),
            [d_in, d_out],
            Init::XavierUniform {
                fan_in: d_in,
                fan_out: d_out,
            },
            rng,
        );
        let b = store.init(format!("{name}.b"), [d_out], Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.w), g.p(self.b));
        let y = g.tape.matmul(x, w)?;
        Ok(g.tape.add_bias(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: store.init(format!("{name}.gain"), [dim], Init::Ones, rng),
            bias: store.init(format!("{name}.bias"), [dim], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.p(self.gain), g.p(self.bias));
        Ok(g.tape.layer_norm(x, a, b, Self::EPS)?)
    }
}

/// Per-channel normalisation of `[C, H, W]` maps. Training graphs use batch
/// statistics and record them; evaluation graphs use the running ones, which
/// are frozen store entries updated outside the optimiser.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let gain = store.init(format!("{name}.gain"), [channels], Init::Ones, rng);
        let bias = store.init(format!("{name}.bias"), [channels], Init::Zeros, rng);
        let running_mean = store.init(format!("{name}.running_mean"), [channels], Init::Zeros, rng);
        let running_var = store.init(format!("{name}.running_var"), [channels], Init::Ones, rng);
        store.get_mut(running_mean).frozen = true;
        store.get_mut(running_var).frozen = true;
        Self {
            gain,
            bias,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.p(self.gain), g.p(self.bias));
        if g.tape.is_training() {
            let (y, mean, var) = g.tape.batch_norm(x, a, b, None, Self::EPS)?;
            g.stats.push(BatchStats {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean,
                var,
            });
            return Ok(y);
        }
        let store = g.store;
        let stats = (store.value(self.running_mean).data(), store.value(self.running_var).data());
        Ok(g.tape.batch_norm(x, a, b, Some(stats), Self::EPS)?.0)
    }
}

/// Additive attention mask of shape `[n_q, n_k]`: `-inf` where the query or
/// the key is padding, `0` elsewhere.
pub fn pad_mask(n_q: usize, valid_q: usize, n_k: usize, valid_k: usize) -> Tensor {
    let mut data = vec![0.0; n_q * n_k];
    for i in 0..n_q {
        for j in 0..n_k {
            if i >= valid_q || j >= valid_k {
                data[i * n_k + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![n_q, n_k], data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Attention of `queries: [n, dim]` over `keys: [m, dim]`. Rows of `mask`
    /// that are fully masked give zero attention. Returns the output and the
    /// per-head weight matrices `[n, m]`.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, mask: &Tensor) -> Result<(Var, Vec<Tensor>)> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.tape.slice_cols(q, lo, hi)?;
            let kh = g.tape.slice_cols(k, lo, hi)?;
            let vh = g.tape.slice_cols(v, lo, hi)?;
            let s = g.tape.matmul_nt(qh, kh)?;
            let s = g.tape.scale(s, scale);
            let a = g.tape.masked_softmax(s, Some(mask), true)?;
            weights.push(g.tape.value(a).clone());
            outs.push(g.tape.matmul(a, vh)?);
        }
        let cat = g.tape.concat_cols(&outs)?;
        Ok((self.o.forward(g, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.relu(h);
        self.down.forward(g, h)
    }
}

/// `norm(x + dropout(sub))`.
fn residual(g: &mut Graph, norm: &LayerNorm, x: Var, sub: Var, dropout: f64) -> Result<Var> {
    let d = g.tape.dropout(sub, dropout);
    let s = g.tape.add(x, d)?;
    norm.forward(g, s)
}

/// Post-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &Tensor) -> Result<(Var, Vec<Tensor>)> {
        let (a, w) = self.attn.forward(g, x, x, mask)?;
        let x = residual(g, &self.norm1, x, a, self.dropout)?;
        let f = self.ffn.forward(g, x)?;
        Ok((residual(g, &self.norm2, x, f, self.dropout)?, w))
    }
}

/// Optional text self-attention, then cross-attention from text to image,
/// then a feed-forward sublayer, each wrapped in residual + norm.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub self_attn: Option<(MultiHeadAttention, LayerNorm)>,
    pub cross: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
    pub dropout: f64,
}

pub struct FusionOutput {
    pub text: Var,
    pub cross_weights: Vec<Tensor>,
}

impl FusionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        text_self_attn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let self_attn = text_self_attn.then(|| {
            (
                MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
                LayerNorm::new(store, &format!("{name}.norm_self"), dim, rng),
            )
        });
        Self {
            self_attn,
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim, rng),
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        text: Var,
        image: Var,
        text_mask: &Tensor,
        fusion_mask: &Tensor,
    ) -> Result<FusionOutput> {
        let mut t = text;
        if let Some((attn, norm)) = &self.self_attn {
            let (a, _) = attn.forward(g, t, t, text_mask)?;
            t = residual(g, norm, t, a, self.dropout)?;
        }
        let (c, cross_weights) = self.cross.forward(g, t, image, fusion_mask)?;
        t = residual(g, &self.norm_cross, t, c, self.dropout)?;
        let f = self.ffn.forward(g, t)?;
        t = residual(g, &self.norm_ffn, t, f, self.dropout)?;
        Ok(FusionOutput { text: t, cross_weights })
    }
}
