use clozecheck::alignment::derive_labels_str;
use clozecheck::fusion::{MacConfig, MacModel};
use clozecheck::glyphgen::GlyphImage;
use clozecheck::nn::Graph;
use clozecheck::ocr::{BackboneConfig, Geometry};
use clozecheck::train::{mac_items, train_mac, TrainConfig};
use clozecheck::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(n_fus: usize) -> MacModel {
    let vocab = Vocabulary::new("abcd".chars().collect()).unwrap();
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
        embed_dim: 6,
        heads: 2,
        n_enc: 1,
        n_fus,
        ffn: 16,
        max_text_len: 6,
        dropout: 0.0,
        text_self_attn: true,
    };
    MacModel::new(&vocab, geo, bb, cfg, 9).unwrap()
}

fn image(seed: u64, valid: usize) -> GlyphImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GlyphImage::blank(16, 32);
    for y in 0..16 {
        for x in 0..valid {
            if rng.gen_bool(0.4) {
                img.set(x, y, 0.0);
            }
        }
    }
    img.valid_width = valid;
    img
}

#[test]
fn every_fusion_block_sees_the_same_image_states() {
    let img = image(1, 30);
    for n_fus in [1, 2, 3] {
        let m = toy(n_fus);
        let z = m.image_features(&img).unwrap();
        let mut g = Graph::eval(&m.store);
        let (s_img, _) = m.encode_image(&mut g, &z, 4).unwrap();
        let before = g.tape.value(s_img).clone();
        let (text, vt) = m.encode_text(&mut g, "abc").unwrap();
        let (_, maps) = m.fuse(&mut g, text, s_img, vt, 4).unwrap();
        assert_eq!(maps.len(), n_fus);
        assert_eq!(g.tape.value(s_img), &before);

        let f = m.forward(&mut g, &z, 4, "abc").unwrap();
        assert_eq!(g.tape.value(f.image_states), &before);
    }
}

#[test]
fn mac_training_leaves_the_backbone_alone() {
    let mut m = toy(2);
    let imgs = [image(2, 30), image(3, 17)];
    let data = [("ab", "ab"), ("abc", "abd"), ("dca", "dca"), ("ba", "b")];
    let labels: Vec<_> = data.iter().map(|(a, h)| derive_labels_str(h, a)).collect();
    let keys = ["0", "1"];
    let items = mac_items(
        &m,
        data.iter().zip(&labels).enumerate().map(|(i, ((a, _), l))| (keys[i % 2], &imgs[i % 2], *a, l)),
    )
    .unwrap();
    let backbone = m.backbone_store.checksum();
    let head = m.store.checksum();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 3,
        batch: 2,
        ..TrainConfig::mac_defaults()
    };
    train_mac(&mut m, &items, &[], &cfg).unwrap();
    assert_eq!(m.backbone_store.checksum(), backbone);
    assert_ne!(m.store.checksum(), head);
}

#[test]
fn swapping_answer_tokens_changes_the_output() {
    let mut m = toy(2);
    let img = image(4, 30);
    let answers = ["abcd", "bacd", "abdc", "cabd"];
    let labels: Vec<_> = answers.iter().map(|a| derive_labels_str("abcd", a)).collect();
    let items = mac_items(&m, answers.iter().zip(&labels).map(|(a, l)| ("img", &img, *a, l))).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 20,
        batch: 4,
        ..TrainConfig::mac_defaults()
    };
    train_mac(&mut m, &items, &[], &cfg).unwrap();
    let z = m.image_features(&img).unwrap();
    let p = m.predict_features(&z, 4, "abcd").unwrap();
    let q = m.predict_features(&z, 4, "bacd").unwrap();
    assert_ne!(p.probs, q.probs);
}
