//! The multimodal correction model: a frozen convolutional backbone, an image
//! Transformer encoder, an answer embedder and fusion blocks in which answer
//! positions attend over image blocks, followed by a per-position label head.

use clozecheck_tensor::{Init, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{reduce_binary, EditLabel, LabelSeq};
use crate::error::{Error, Result};
use crate::glyphgen::{valid_blocks, GlyphImage};
use crate::nn::{pad_mask, EncoderBlock, FusionBlock, Graph, Linear};
use crate::ocr::{features, Backbone, BackboneConfig, Geometry, BACKBONE_PREFIX};
use crate::vocab::Vocabulary;

pub const NUM_LABELS: usize = EditLabel::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacConfig {
    pub dim: usize,
    /// Width of the character embedding table before projection.
    pub embed_dim: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub n_fus: usize,
    pub ffn: usize,
    /// Text positions including the leading placeholder.
    pub max_text_len: usize,
    pub dropout: f64,
    pub text_self_attn: bool,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            embed_dim: 32,
            heads: 4,
            n_enc: 2,
            n_fus: 2,
            ffn: 128,
            max_text_len: 16,
            dropout: 0.1,
            text_self_attn: true,
        }
    }
}

/// Intermediate results of one forward pass.
pub struct MacForward {
    /// `[L_t, m]` label logits.
    pub logits: Var,
    pub valid_tokens: usize,
    pub valid_blocks: usize,
    /// Image self-attention weights per encoder layer and head.
    pub image_attention: Vec<Vec<Tensor>>,
    /// Cross-attention weights per fusion layer and head, `[L_t, L_i]`.
    pub cross_attention: Vec<Vec<Tensor>>,
    /// The image sequence handed to every fusion block.
    pub image_states: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelSeq,
    /// Per-position label distributions over valid positions.
    pub probs: Vec<Vec<f64>>,
    pub binary: u8,
}

#[derive(Clone, Debug)]
pub struct MacModel {
    pub config: MacConfig,
    pub vocab: Vocabulary,
    pub backbone: Backbone,
    /// Backbone weights, always frozen here.
    pub backbone_store: ParamStore,
    /// Everything trained in the second stage.
    pub store: ParamStore,
    w1: Linear,
    pos_img: clozecheck_tensor::ParamId,
    encoders: Vec<EncoderBlock>,
    embed: clozecheck_tensor::ParamId,
    w2: Linear,
    pos_txt: clozecheck_tensor::ParamId,
    blocks: Vec<FusionBlock>,
    out: Linear,
}

impl MacModel {
    /// Fresh model with a randomly initialised (and frozen) backbone.
    pub fn new(
        vocab: &Vocabulary,
        geometry: Geometry,
        backbone_cfg: BackboneConfig,
        config: MacConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone_store = ParamStore::new();
        let backbone = Backbone::new(&mut backbone_store, BACKBONE_PREFIX, geometry, backbone_cfg, &mut rng)?;
        backbone_store.set_frozen(true);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_6300);
        let mut store = ParamStore::new();
        let c = &config;
        let d = backbone.config.out_dim();
        let l_i = geometry.num_blocks();
        let w1 = Linear::new(&mut store, "mac.w1", d, c.dim, &mut rng);
        let pos_img = store.init("mac.pos_img", [l_i, c.dim], Init::Uniform(0.1), &mut rng);
        let encoders = (0..c.n_enc)
            .map(|l| EncoderBlock::new(&mut store, &format!("mac.enc{l}"), c.dim, c.heads, c.ffn, c.dropout, &mut rng))
            .collect();
        let embed = store.init("mac.embed", [vocab.size(), c.embed_dim], Init::Uniform(0.5), &mut rng);
        let w2 = Linear::new(&mut store, "mac.w2", c.embed_dim, c.dim, &mut rng);
        let pos_txt = store.init("mac.pos_txt", [c.max_text_len, c.dim], Init::Uniform(0.1), &mut rng);
        let blocks = (0..c.n_fus)
            .map(|l| {
                FusionBlock::new(
                    &mut store,
                    &format!("mac.fus{l}"),
                    c.dim,
                    c.heads,
                    c.ffn,
                    c.dropout,
                    c.text_self_attn,
                    &mut rng,
                )
            })
            .collect::<Vec<FusionBlock>>();
        let out = Linear::new(&mut store, "mac.out", c.dim, NUM_LABELS, &mut rng);
        // Keys start as the queries: a token then attends most to the blocks
        // that resemble it, which is what the labels are about.
        for b in &blocks {
            let w = store.value(b.cross.q.w).clone();
            store.get_mut(b.cross.k.w).value = w;
        }
        Ok(Self {
            config,
            vocab: vocab.clone(),
            backbone,
            backbone_store,
            store,
            w1,
            pos_img,
            encoders,
            embed,
            w2,
            pos_txt,
            blocks,
            out,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.backbone.geometry
    }

    /// Replaces the backbone weights, e.g. with those of a pretrained
    /// recogniser. They stay frozen.
    pub fn load_backbone(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        self.backbone_store.load_named(tensors)?;
        self.backbone_store.set_frozen(true);
        Ok(())
    }

    /// Starts the character embeddings from the recogniser's output weights,
    /// so that answer tokens begin in the same space as the image blocks
    /// that show them. With `h_c` the head column of character `c`, rescaled
    /// to norm `sqrt(D) / 2`, the rows `h_c` are factored by SVD and their
    /// leading `embed_dim` components are split between the table and `w2`,
    /// giving `w2(embed(c)) ~ w1(h_c)`. Components beyond the rank are zero.
    pub fn seed_char_embeddings(&mut self, head_w: &Tensor) -> Result<()> {
        let d = self.backbone.config.out_dim();
        let n = self.vocab.num_chars();
        let k = self.config.embed_dim;
        if head_w.shape() != [d, n + 1] {
            return Err(Error::Config(format!(
                "cannot seed embeddings from a head of shape {:?}, expected [{d}, {}]",
                head_w.shape(),
                n + 1
            )));
        }
        let r = k.min(d).min(n);
        let target = 0.5 * (d as f64).sqrt();
        let h = nalgebra::DMatrix::from_fn(n, d, |c, j| head_w.at2(j, c));
        let h = nalgebra::DMatrix::from_fn(n, d, |c, j| h[(c, j)] * target / h.row(c).norm().max(1e-12));
        let svd = h.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let table = &mut self.store.get_mut(self.embed).value;
        for c in 0..n {
            for i in 0..k {
                table.data_mut()[c * k + i] = if i < r { u[(c, i)] * svd.singular_values[i] } else { 0.0 };
            }
        }
        let w1 = self.store.value(self.w1.w);
        let dim = self.config.dim;
        let mut w2 = Tensor::zeros([k, dim]);
        for i in 0..r {
            for o in 0..dim {
                w2.data_mut()[i * dim + o] = (0..d).map(|j| v_t[(i, j)] * w1.at2(j, o)).sum();
            }
        }
        let b1 = self.store.value(self.w1.b).clone();
        self.store.get_mut(self.w2.w).value = w2;
        self.store.get_mut(self.w2.b).value = b1;
        Ok(())
    }

    /// Frozen backbone features `Z: [L_i, D]`.
    pub fn image_features(&self, img: &GlyphImage) -> Result<Tensor> {
        features(&self.backbone_store, &self.backbone, img)
    }

    pub fn valid_blocks(&self, img: &GlyphImage) -> usize {
        valid_blocks(img.valid_width, self.geometry().block_width)
    }

    /// Token ids `[BLK, answer.., PAD..]` and the number of valid positions.
    pub fn text_ids(&self, answer: &str) -> Result<(Vec<usize>, usize)> {
        let ids = self.vocab.encode_text(answer)?;
        let l_t = self.config.max_text_len;
        if ids.len() + 1 > l_t {
            return Err(Error::AnswerTooLong {
                len: ids.len(),
                max: l_t - 1,
            });
        }
        let valid = ids.len() + 1;
        let mut out = Vec::with_capacity(l_t);
        out.push(self.vocab.blk_id());
        out.extend(ids);
        out.resize(l_t, self.vocab.pad_id());
        Ok((out, valid))
    }

    /// `S_img: [L_i, dim]` from precomputed backbone features.
    pub fn encode_image(&self, g: &mut Graph, z: &Tensor, valid: usize) -> Result<(Var, Vec<Vec<Tensor>>)> {
        let l_i = self.geometry().num_blocks();
        if z.shape() != [l_i, self.backbone.config.out_dim()] {
            return Err(Error::GeometryMismatch(format!(
                "features {:?}, expected [{l_i}, {}]",
                z.shape(),
                self.backbone.config.out_dim()
            )));
        }
        let zv = g.tape.constant(z.clone());
        let h = self.w1.forward(g, zv)?;
        let p = g.p(self.pos_img);
        let mut s = g.tape.add(h, p)?;
        let mask = pad_mask(l_i, valid, l_i, valid);
        let mut maps = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let (next, w) = enc.forward(g, s, &mask)?;
            s = next;
            maps.push(w);
        }
        Ok((s, maps))
    }

    /// `G: [L_t, dim]` and the number of valid positions.
    pub fn encode_text(&self, g: &mut Graph, answer: &str) -> Result<(Var, usize)> {
        let (ids, valid) = self.text_ids(answer)?;
        let table = g.p(self.embed);
        let e = g.tape.embed(table, &ids)?;
        let e = self.w2.forward(g, e)?;
        let p = g.p(self.pos_txt);
        Ok((g.tape.add(e, p)?, valid))
    }

    /// Runs the fusion stack; every block sees the same `image`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        text: Var,
        image: Var,
        valid_tokens: usize,
        valid_blocks: usize,
    ) -> Result<(Var, Vec<Vec<Tensor>>)> {
        let l_t = self.config.max_text_len;
        let l_i = self.geometry().num_blocks();
        let text_mask = pad_mask(l_t, valid_tokens, l_t, valid_tokens);
        let fusion_mask = pad_mask(l_t, valid_tokens, l_i, valid_blocks);
        let mut t = text;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let o = b.forward(g, t, image, &text_mask, &fusion_mask)?;
            t = o.text;
            maps.push(o.cross_weights);
        }
        Ok((t, maps))
    }

    pub fn forward(&self, g: &mut Graph, z: &Tensor, valid_blocks: usize, answer: &str) -> Result<MacForward> {
        let valid_blocks = valid_blocks.clamp(1, self.geometry().num_blocks());
        let (s_img, image_attention) = self.encode_image(g, z, valid_blocks)?;
        let (text, valid_tokens) = self.encode_text(g, answer)?;
        let (s_fus, cross_attention) = self.fuse(g, text, s_img, valid_tokens, valid_blocks)?;
        let logits = self.out.forward(g, s_fus)?;
        Ok(MacForward {
            logits,
            valid_tokens,
            valid_blocks,
            image_attention,
            cross_attention,
            image_states: s_img,
        })
    }

    /// Mean negative log-likelihood over the valid positions of one sample,
    /// multiplied by `scale`.
    pub fn loss(
        &self,
        g: &mut Graph,
        z: &Tensor,
        valid_blocks: usize,
        answer: &str,
        gold: &LabelSeq,
        scale: f64,
    ) -> Result<Var> {
        let f = self.forward(g, z, valid_blocks, answer)?;
        if gold.len() != f.valid_tokens {
            return Err(Error::LengthMismatch(format!(
                "{} gold labels for {} answer positions",
                gold.len(),
                f.valid_tokens
            )));
        }
        let lp = g.tape.log_softmax(f.logits)?;
        let mut targets = vec![None; self.config.max_text_len];
        for (t, l) in targets.iter_mut().zip(gold.labels()) {
            *t = Some(l.index());
        }
        Ok(g.tape.nll(lp, &targets, scale / gold.len() as f64)?)
    }

    /// Label distributions over the valid positions of a finished forward pass.
    pub fn probabilities(&self, g: &mut Graph, f: &MacForward) -> Result<Vec<Vec<f64>>> {
        let p = g.tape.softmax(f.logits)?;
        let p = g.tape.value(p);
        Ok((0..f.valid_tokens).map(|i| p.row(i).to_vec()).collect())
    }

    pub fn predict_features(&self, z: &Tensor, valid_blocks: usize, answer: &str) -> Result<Prediction> {
        let mut g = Graph::eval(&self.store);
        let f = self.forward(&mut g, z, valid_blocks, answer)?;
        let probs = self.probabilities(&mut g, &f)?;
        let labels = LabelSeq::decode_constrained(&probs);
        let binary = reduce_binary(&labels);
        Ok(Prediction { labels, probs, binary })
    }

    pub fn predict(&self, img: &GlyphImage, answer: &str) -> Result<Prediction> {
        let z = self.image_features(img)?;
        self.predict_features(&z, self.valid_blocks(img), answer)
    }

    /// Forward pass kept for attention inspection.
    pub fn inspect(&self, img: &GlyphImage, answer: &str) -> Result<(MacForward, Prediction)> {
        let z = self.image_features(img)?;
        let mut g = Graph::eval(&self.store);
        let f = self.forward(&mut g, &z, self.valid_blocks(img), answer)?;
        let probs = self.probabilities(&mut g, &f)?;
        let labels = LabelSeq::decode_constrained(&probs);
        let binary = reduce_binary(&labels);
        Ok((f, Prediction { labels, probs, binary }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MacModel {
        let geo = Geometry {
            img_height: 16,
            block_width: 8,
            max_width: 32,
        };
        let bb = BackboneConfig {
            channels: vec![4, 4, 4],
            residual_units: vec![0, 0, 0],
            dropout: 0.0,
            batch_norm: true,
        };
        let cfg = MacConfig {
            dim: 8,
            embed_dim: 4,
            heads: 2,
            n_enc: 1,
            n_fus: 2,
            ffn: 16,
            max_text_len: 5,
            dropout: 0.0,
            text_self_attn: true,
        };
        MacModel::new(&Vocabulary::new("abc".chars().collect()).unwrap(), geo, bb, cfg, 9).unwrap()
    }

    fn z(m: &MacModel) -> Tensor {
        let mut t = Tensor::zeros([4, 4]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 7) % 5) as f64 / 5.0 - 0.4;
        }
        assert_eq!(m.geometry().num_blocks(), 4);
        t
    }

    #[test]
    fn seeded_embeddings_project_like_their_head_columns() {
        let mut m = toy();
        m.config.embed_dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.embed = m.store.init("mac.embed3", [6, 3], Init::Uniform(0.5), &mut rng);
        m.w2 = Linear::new(&mut m.store, "mac.w2_3", 3, 8, &mut rng);
        let head = Tensor::new(vec![4, 4], (0..16).map(|i| ((i * 5) % 7) as f64 - 3.0).collect()).unwrap();
        m.seed_char_embeddings(&head).unwrap();
        check_seeded(&m, &head, 3);
        let mut wide = toy();
        wide.seed_char_embeddings(&head).unwrap();
        check_seeded(&wide, &head, 4);
        assert!(toy().seed_char_embeddings(&Tensor::zeros([4, 3])).is_err());
    }

    fn check_seeded(m: &MacModel, head: &Tensor, k: usize) {
        let (w1, b1) = (m.store.value(m.w1.w), m.store.value(m.w1.b));
        let (w2, b2) = (m.store.value(m.w2.w), m.store.value(m.w2.b));
        let table = m.store.value(m.embed);
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|j| head.at2(j, c)).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for o in 0..8 {
                let want: f64 = b1.data()[o] + (0..4).map(|j| col[j] / norm * w1.at2(j, o)).sum::<f64>();
                let got: f64 = b2.data()[o] + (0..k).map(|i| table.at2(c, i) * w2.at2(i, o)).sum::<f64>();
                assert!((want - got).abs() < 1e-9, "char {c} out {o}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn cross_keys_start_as_queries() {
        let m = toy();
        for b in &m.blocks {
            assert_eq!(m.store.value(b.cross.q.w), m.store.value(b.cross.k.w));
        }
    }

    #[test]
    fn text_ids_layout() {
        let m = toy();
        let (ids, valid) = m.text_ids("").unwrap();
        assert_eq!(valid, 1);
        assert_eq!(ids, vec![4, 5, 5, 5, 5]);
        let (ids, valid) = m.text_ids("cab").unwrap();
        assert_eq!(valid, 4);
        assert_eq!(ids, vec![4, 2, 0, 1, 5]);
        assert!(matches!(m.text_ids("abcab"), Err(Error::AnswerTooLong { len: 5, max: 4 })));
    }

    #[test]
    fn attention_respects_padding() {
        let m = toy();
        let mut g = Graph::eval(&m.store);
        let f = m.forward(&mut g, &z(&m), 3, "ab").unwrap();
        assert_eq!(f.cross_attention.len(), 2);
        for layer in &f.cross_attention {
            for head in layer {
                assert_eq!(head.shape(), [5, 4]);
                for i in 0..5 {
                    let row = head.row(i);
                    if i < 3 {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        assert_eq!(row[3], 0.0);
                    } else {
                        assert!(row.iter().all(|&w| w == 0.0));
                    }
                }
            }
        }
        for layer in &f.image_attention {
            for head in layer {
                for i in 0..3 {
                    assert!((head.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert_eq!(head.row(i)[3], 0.0);
                }
            }
        }
    }

    #[test]
    fn probabilities_are_rows_of_a_simplex() {
        let m = toy();
        let p = m.predict_features(&z(&m), 4, "abc").unwrap();
        assert_eq!(p.probs.len(), 4);
        assert_eq!(p.labels.len(), 4);
        for row in &p.probs {
            assert_eq!(row.len(), NUM_LABELS);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(p.binary, reduce_binary(&p.labels));
    }

    #[test]
    fn shared_prefix_embeds_identically() {
        let m = toy();
        let mut g = Graph::eval(&m.store);
        let (a, _) = m.encode_text(&mut g, "ab").unwrap();
        let (b, _) = m.encode_text(&mut g, "abc").unwrap();
        let (va, vb) = (g.tape.value(a), g.tape.value(b));
        for i in 0..3 {
            assert_eq!(va.row(i), vb.row(i));
        }
    }

    #[test]
    fn uniform_head_gives_ln6() {
        let mut m = toy();
        for id in [m.out.w, m.out.b] {
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let gold = LabelSeq::all_o(2);
        let mut g = Graph::eval(&m.store);
        let l = m.loss(&mut g, &z(&m), 4, "ab", &gold, 1.0).unwrap();
        assert!((g.tape.value(l).item() - 6f64.ln()).abs() < 1e-12);
        let bad = LabelSeq::all_o(1);
        assert!(matches!(m.loss(&mut g, &z(&m), 4, "ab", &bad, 1.0), Err(Error::LengthMismatch(_))));
    }
}
