//! Convolutional text recogniser trained with CTC.
//!
//! The backbone turns a padded line image into one feature vector per pixel
//! block; a linear head maps each to character-plus-blank logits.

use clozecheck_tensor::{Init, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::levenshtein;
use crate::error::{Error, Result};
use crate::glyphgen::{valid_blocks, GlyphImage};
use crate::nn::{BatchNorm, Graph, LayerNorm, Linear};
use crate::vocab::Vocabulary;

/// Image geometry shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub img_height: usize,
    pub block_width: usize,
    pub max_width: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            img_height: 32,
            block_width: 8,
            max_width: 160,
        }
    }
}

impl Geometry {
    /// Number of pixel blocks, i.e. the image sequence length.
    pub fn num_blocks(&self) -> usize {
        self.max_width / self.block_width
    }

    pub fn check(&self) -> Result<()> {
        let bw = self.block_width;
        if bw == 0 || !bw.is_power_of_two() || self.max_width % bw != 0 {
            return Err(Error::GeometryMismatch(format!(
                "block width {bw} must be a power of two dividing max width {}",
                self.max_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub residual_units: Vec<usize>,
    pub dropout: f64,
    /// Batch norm after every conv.
    pub batch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            residual_units: vec![1, 1, 1, 1],
            dropout: 0.3,
            batch_norm: true,
        }
    }
}

impl BackboneConfig {
    /// Feature size D.
    pub fn out_dim(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: clozecheck_tensor::ParamId,
    b: clozecheck_tensor::ParamId,
    norm: Option<BatchNorm>,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, norm: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.init(format!("{name}.w"), [co, ci, 3, 3], Init::He { fan_in: ci * 9 }, rng),
            b: store.init(format!("{name}.b"), [co], Init::Zeros, rng),
            norm: norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), co, rng)),
        }
    }

    /// Shrinks the initial output of the conv, used on the last conv of each
    /// residual branch so that units start close to the identity.
    fn scaled(self, store: &mut ParamStore, factor: f64) -> Self {
        let id = match &self.norm {
            Some(bn) => bn.gain,
            None => self.w,
        };
        for v in store.get_mut(id).value.data_mut() {
            *v *= factor;
        }
        self
    }

    /// `seg` is the width of one image in a side-by-side batch.
    fn forward(&self, g: &mut Graph, x: Var, seg: usize) -> Result<Var> {
        let (w, b) = (g.p(self.w), g.p(self.b));
        let y = g.tape.conv2d_segmented(x, w, b, seg)?;
        match &self.norm {
            Some(bn) => bn.forward(g, y),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    transition: Conv,
    units: Vec<(Conv, Conv)>,
    pool: bool,
}

/// Residual conv stack ending in a height average.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub geometry: Geometry,
    pub config: BackboneConfig,
    stages: Vec<Stage>,
    norm: LayerNorm,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        geometry: Geometry,
        config: BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        geometry.check()?;
        let pools = geometry.block_width.trailing_zeros() as usize;
        if config.channels.is_empty() || config.channels.len() != config.residual_units.len() {
            return Err(Error::Config("channels and residual_units must be non-empty and equally long".into()));
        }
        if pools > config.channels.len() {
            return Err(Error::GeometryMismatch(format!(
                "block width {} needs {pools} pooling stages, backbone has {}",
                geometry.block_width,
                config.channels.len()
            )));
        }
        let mut stages = Vec::new();
        let mut ci = 1;
        for (s, (&co, &units)) in config.channels.iter().zip(&config.residual_units).enumerate() {
            let name = format!("{prefix}.s{s}");
            let transition = Conv::new(store, &format!("{name}.in"), ci, co, config.batch_norm, rng);
            let units = (0..units)
                .map(|u| {
                    (
                        Conv::new(store, &format!("{name}.r{u}a"), co, co, config.batch_norm, rng),
                        Conv::new(store, &format!("{name}.r{u}b"), co, co, config.batch_norm, rng).scaled(store, 0.1),
                    )
                })
                .collect();
            stages.push(Stage {
                transition,
                units,
                pool: s < pools,
            });
            ci = co;
        }
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), ci, rng);
        Ok(Self {
            geometry,
            config,
            stages,
            norm,
        })
    }

    /// The batch laid side by side as one `[1, H, B·W]` map.
    fn input(&self, imgs: &[&GlyphImage]) -> Result<Tensor> {
        let g = &self.geometry;
        for img in imgs {
            if img.height != g.img_height || img.width != g.max_width {
                return Err(Error::GeometryMismatch(format!(
                    "image is {}x{}, expected {}x{}",
                    img.height, img.width, g.img_height, g.max_width
                )));
            }
        }
        let (h, w) = (g.img_height, g.max_width);
        let mut data = Vec::with_capacity(h * w * imgs.len());
        for r in 0..h {
            for img in imgs {
                data.extend(img.pixels[r * w..(r + 1) * w].iter().map(|&p| 1.0 - p as f64));
            }
        }
        Ok(Tensor::new(vec![1, h, w * imgs.len()], data)?)
    }

    /// `Z: [L_i, D]`, one row per pixel block.
    pub fn forward(&self, g: &mut Graph, img: &GlyphImage) -> Result<Var> {
        self.forward_batch(g, &[img])
    }

    /// Features of a batch, stacked: rows `b·L_i .. (b+1)·L_i` belong to
    /// image `b`. Convolutions never mix images; in training mode batch norm
    /// pools its statistics over the whole batch.
    pub fn forward_batch(&self, g: &mut Graph, imgs: &[&GlyphImage]) -> Result<Var> {
        if imgs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut x = g.tape.constant(self.input(imgs)?);
        let mut seg = self.geometry.max_width;
        for st in &self.stages {
            x = st.transition.forward(g, x, seg)?;
            x = g.tape.relu(x);
            for (a, b) in &st.units {
                let h = a.forward(g, x, seg)?;
                let h = g.tape.relu(h);
                let h = b.forward(g, h, seg)?;
                let s = g.tape.add(x, h)?;
                x = g.tape.relu(s);
            }
            if st.pool {
                let h = g.tape.shape(x)[1];
                let kh = if h % 2 == 0 { 2 } else { 1 };
                x = g.tape.maxpool2d(x, kh, 2)?;
                x = g.tape.dropout(x, self.config.dropout);
                seg /= 2;
            }
        }
        let z = g.tape.mean_height(x)?;
        self.norm.forward(g, z)
    }

    /// Horizontal receptive-field radius of one output column, in input pixels.
    pub fn receptive_radius(&self) -> usize {
        let mut jump = 1;
        let mut radius = 0;
        for st in &self.stages {
            radius += jump * (1 + 2 * st.units.len());
            if st.pool {
                // a 2-wide window reaches one more pixel at the current spacing
                radius += jump;
                jump *= 2;
            }
        }
        radius
    }

    /// Blocks whose features cannot see any pixel at or beyond `valid_width`.
    pub fn shielded_blocks(&self, valid_width: usize) -> usize {
        let bw = self.geometry.block_width;
        let r = self.receptive_radius();
        (0..self.geometry.num_blocks())
            .take_while(|&j| (j + 1) * bw - 1 + r < valid_width)
            .count()
    }
}

/// Backbone plus CTC head, with its own parameter store.
#[derive(Clone, Debug)]
pub struct OcrModel {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Linear,
    pub vocab: Vocabulary,
}

pub const BACKBONE_PREFIX: &str = "backbone";

impl OcrModel {
    pub fn new(vocab: &Vocabulary, geometry: Geometry, config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, BACKBONE_PREFIX, geometry, config, &mut rng)?;
        let d = backbone.config.out_dim();
        let head = Linear::new(&mut store, "ctc_head", d, vocab.num_chars() + 1, &mut rng);
        Ok(Self {
            store,
            backbone,
            head,
            vocab: vocab.clone(),
        })
    }

    pub fn blank(&self) -> usize {
        self.vocab.num_chars()
    }

    /// Per-frame log-probabilities `[L_i, |V| + 1]`.
    pub fn log_probs(&self, g: &mut Graph, img: &GlyphImage) -> Result<Var> {
        let z = self.backbone.forward(g, img)?;
        let logits = self.head.forward(g, z)?;
        Ok(g.tape.log_softmax(logits)?)
    }

    /// Frames that cover the content of `img`; padding frames are ignored by
    /// both the loss and the decoder.
    pub fn valid_frames(&self, img: &GlyphImage) -> usize {
        valid_blocks(img.valid_width, self.backbone.geometry.block_width).clamp(1, self.backbone.geometry.num_blocks())
    }

    /// CTC loss node for one image, scaled by `scale`.
    pub fn loss(&self, g: &mut Graph, img: &GlyphImage, content: &str, scale: f64) -> Result<Var> {
        self.batch_loss(g, &[(img, content)], scale)
    }

    /// Summed CTC loss of a batch, scaled by `scale`, from one batched forward pass.
    pub fn batch_loss(&self, g: &mut Graph, items: &[(&GlyphImage, &str)], scale: f64) -> Result<Var> {
        let targets = items
            .iter()
            .map(|(_, text)| self.vocab.encode_text(text))
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<&GlyphImage> = items.iter().map(|(img, _)| *img).collect();
        let z = self.backbone.forward_batch(g, &imgs)?;
        let logits = self.head.forward(g, z)?;
        let lp = g.tape.log_softmax(logits)?;
        let full = g.tape.value(lp);
        let c = full.dims2().1;
        let l = self.backbone.geometry.num_blocks();
        let mut g_full = vec![0.0; full.len()];
        let mut total = 0.0;
        for (b, (img, target)) in imgs.iter().zip(&targets).enumerate() {
            let t = self.valid_frames(img);
            let at = b * l * c;
            let head = Tensor::new(vec![t, c], full.data()[at..at + t * c].to_vec())?;
            let (loss, grad) = ctc_loss(&head, target, self.blank())?;
            total += loss * scale;
            for (d, v) in g_full[at..].iter_mut().zip(grad.data()) {
                *d = v * scale;
            }
        }
        let shape = full.shape().to_vec();
        Ok(g.tape.external_scalar(lp, total, Tensor::new(shape, g_full)?)?)
    }

    pub fn recognize(&self, img: &GlyphImage) -> Result<String> {
        let mut g = Graph::eval(&self.store);
        let lp = self.log_probs(&mut g, img)?;
        let full = g.tape.value(lp);
        let c = full.dims2().1;
        let t = self.valid_frames(img);
        let head = Tensor::new(vec![t, c], full.data()[..t * c].to_vec())?;
        let ids = greedy_decode(&head, self.blank());
        self.vocab.decode_text(&ids)
    }

    /// Eval-mode backbone features.
    pub fn features(&self, img: &GlyphImage) -> Result<Tensor> {
        features(&self.store, &self.backbone, img)
    }
}

pub fn features(store: &ParamStore, backbone: &Backbone, img: &GlyphImage) -> Result<Tensor> {
    let mut g = Graph::eval(store);
    let z = backbone.forward(&mut g, img)?;
    Ok(g.tape.value(z).clone())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame `log_probs: [T, C]`,
/// and its gradient with respect to `log_probs`.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    let (t_len, c) = log_probs.dims2();
    let needed = min_frames(target);
    if needed > t_len {
        return Err(Error::TargetTooLong {
            target: target.len(),
            needed,
            frames: t_len,
        });
    }
    if let Some(&bad) = target.iter().find(|&&k| k >= c || k == blank) {
        return Err(Error::UnknownId(bad));
    }
    let ninf = f64::NEG_INFINITY;
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &k in target {
        ext.push(k);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * c + k];
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            if a != ninf {
                alpha[t * s_len + s] = a + lp(t, ext[s]);
            }
        }
    }

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // not counting the emission at t itself
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::TargetTooLong {
            target: target.len(),
            needed,
            frames: t_len,
        });
    }

    let mut grad = vec![0.0; t_len * c];
    for t in 0..t_len {
        let mut occ = vec![ninf; c];
        for s in 0..s_len {
            occ[ext[s]] = log_add(occ[ext[s]], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..c {
            grad[t * c + k] = -(occ[k] - log_p).exp();
        }
    }
    Ok((-log_p, Tensor::new(vec![t_len, c], grad)?))
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let (t_len, _) = log_probs.dims2();
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..t_len {
        let row = log_probs.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
            .0;
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Character error rate, `lev(hyp, ref) / max(1, |ref|)`.
pub fn cer(hypothesis: &str, reference: &str) -> f64 {
    let h: Vec<char> = hypothesis.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    levenshtein(&h, &r) as f64 / r.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphgen::{pad_to_width, GlyphBank, GlyphStyle};
    use rand::Rng;

    fn log_rows(rows: &[Vec<f64>]) -> Tensor {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.iter().map(|p| (p / z).ln()).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn forced_single_path() {
        let lp = Tensor::from_rows(&[vec![0.0, f64::NEG_INFINITY]]).unwrap();
        let (loss, _) = ctc_loss(&lp, &[0], 1).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn uniform_three_frames() {
        // of the 27 paths, a__ _a_ __a aa_ _aa aaa collapse to "a"
        let lp = log_rows(&vec![vec![1.0; 3]; 3]);
        let (loss, _) = ctc_loss(&lp, &[0], 2).unwrap();
        assert!((loss - -(6.0f64 / 27.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_a_blank() {
        let lp = log_rows(&vec![vec![1.0; 2]; 2]);
        assert!(matches!(ctc_loss(&lp, &[0, 0], 1), Err(Error::TargetTooLong { needed: 3, .. })));
        assert!(ctc_loss(&lp, &[0, 0, 0], 1).is_err());
        let lp3 = log_rows(&vec![vec![1.0; 2]; 3]);
        let (loss, _) = ctc_loss(&lp3, &[0, 0], 1).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn order_matters() {
        let lp = log_rows(&[vec![0.7, 0.2, 0.1], vec![0.3, 0.5, 0.2], vec![0.1, 0.6, 0.3]]);
        let (ab, _) = ctc_loss(&lp, &[0, 1], 2).unwrap();
        let (ba, _) = ctc_loss(&lp, &[1, 0], 2).unwrap();
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn gradient_is_minus_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(0.1..1.0)).collect()).collect();
        let lp = log_rows(&rows);
        let (_, grad) = ctc_loss(&lp, &[0, 2], 3).unwrap();
        // occupancies at each frame sum to one
        for t in 0..4 {
            let s: f64 = grad.row(t).iter().sum();
            assert!((s + 1.0).abs() < 1e-12);
        }
        let eps = 1e-6;
        for i in 0..lp.len() {
            let mut hi = lp.clone();
            hi.data_mut()[i] += eps;
            let mut lo = lp.clone();
            lo.data_mut()[i] -= eps;
            let num = (ctc_loss(&hi, &[0, 2], 3).unwrap().0 - ctc_loss(&lo, &[0, 2], 3).unwrap().0) / (2.0 * eps);
            assert!((num - grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_collapses() {
        let mk = |ids: &[usize]| {
            let rows: Vec<Vec<f64>> = ids
                .iter()
                .map(|&k| (0..3).map(|j| if j == k { 0.0 } else { -5.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(greedy_decode(&mk(&[0, 0, 2, 1]), 2), vec![0, 1]);
        assert_eq!(greedy_decode(&mk(&[2, 2, 2]), 2), Vec::<usize>::new());
        assert_eq!(greedy_decode(&mk(&[0, 2, 0]), 2), vec![0, 0]);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc"), 0.0);
        assert!((cer("abd", "abc") - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cer("", "ab"), 1.0);
        assert_eq!(cer("xy", ""), 2.0);
    }

    fn small_model() -> OcrModel {
        model_with_width(64)
    }

    fn model_with_width(max_width: usize) -> OcrModel {
        let geo = Geometry {
            img_height: 32,
            block_width: 8,
            max_width,
        };
        OcrModel::new(&Vocabulary::synthetic(), geo, BackboneConfig::default(), 1).unwrap()
    }

    #[test]
    fn feature_shape() {
        let m = small_model();
        assert_eq!(m.backbone.geometry.num_blocks(), 8);
        let img = GlyphImage::blank(32, 64);
        let z = m.features(&img).unwrap();
        assert_eq!(z.shape(), [8, 64]);
        assert!(matches!(m.features(&GlyphImage::blank(32, 60)), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn padding_outside_receptive_field_is_invisible() {
        let m = model_with_width(160);
        let bank = GlyphBank::synthetic(&Vocabulary::synthetic(), 32, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (line, _) = bank.render_line("abcdef", &GlyphStyle::default(), 0.0, &mut rng).unwrap();
        let a = pad_to_width(&line, 160, 8).unwrap();
        let mut b = a.clone();
        for y in 0..32 {
            for x in a.valid_width..160 {
                b.set(x, y, rng.gen_range(0.0..1.0));
            }
        }
        let (za, zb) = (m.features(&a).unwrap(), m.features(&b).unwrap());
        let k = m.backbone.shielded_blocks(a.valid_width);
        assert!(k >= 2, "only {k} shielded blocks");
        for j in 0..k {
            assert_eq!(za.row(j), zb.row(j), "block {j}");
        }
        // and the perturbation is visible somewhere
        assert_ne!(za, zb);
    }

    #[test]
    fn receptive_radius_by_hand() {
        let m = small_model();
        // stage0: 3 convs at jump 1 (+3), pool (+1); stage1: 3 at jump 2 (+6),
        // pool (+2); stage2: 3 at 4 (+12), pool (+4); stage3: 3 at 8 (+24)
        assert_eq!(m.backbone.receptive_radius(), 52);
    }
}
