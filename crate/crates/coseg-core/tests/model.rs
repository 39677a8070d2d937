//! Behavioral tests of the model: attention algebra, siamese symmetries,
//! decode shapes, and training sanity.

use coseg_core::data::{gen_synthetic_pairset, SyntheticConfig};
use coseg_core::model::{
    apply_csa, channel_attention, decode, encode, forward_pair, fuse_attention, spatial_attention,
    train_step, CosegModel, ModelConfig, PairBatch, Pooling, Variant,
};
use coseg_core::tensor::adam::{Adam, AdamHyper};
use coseg_core::{Graph, Mode, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_image(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, s, s], |_| rng.random_range(0.0..1.0))
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        stage_channels: vec![4, 8],
        convs_per_stage: 1,
        input_size: 16,
        variant,
        dropout: 0.5,
        pooling: Pooling::Avg,
    }
}

fn three_stage_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![16, 32, 64],
        ..ModelConfig::default()
    }
}

#[test]
fn encode_desk_shape_and_nonnegativity() {
    let mut model = CosegModel::<f64>::init(three_stage_config(), 1).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(rand_image(&mut ChaCha8Rng::seed_from_u64(2), 2, 64), false);
    let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
    assert_eq!(g.value(f).shape(), &[2, 64, 8, 8]);
    assert!(g.value(f).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn encode_zero_image_eval_stays_finite() {
    let mut model = CosegModel::<f64>::init(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(Tensor::zeros(&[1, 3, 64, 64]), false);
    let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
    assert!(g.value(f).all_finite());
}

#[test]
fn encode_rejects_wrong_extent() {
    let mut model = CosegModel::<f64>::init(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(Tensor::zeros(&[1, 3, 32, 32]), false);
    assert!(encode(&mut g, &mut model, &bound, img, Mode::Eval).is_err());
}

#[test]
fn channel_attention_is_half_for_zero_weights() {
    let cfg = tiny_config(Variant::Ca);
    let mut model = CosegModel::<f64>::init(cfg.clone(), 1).unwrap();
    let c = cfg.feature_channels();
    model.attention.w = Tensor::zeros(&[c, c]);
    model.attention.b = Tensor::zeros(&[c]);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(rand_image(&mut ChaCha8Rng::seed_from_u64(3), 1, 16), false);
    let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
    let alpha = channel_attention(&mut g, &bound, f).unwrap();
    assert!(g.value(alpha).data().iter().all(|&v| v == 0.5));
}

#[test]
fn channel_attention_shares_weights_across_images() {
    let mut model = CosegModel::<f64>::init(tiny_config(Variant::Ca), 1).unwrap();
    let img = rand_image(&mut ChaCha8Rng::seed_from_u64(4), 1, 16);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(img.clone(), false);
    let ib = g.leaf(img, false);
    let fa = encode(&mut g, &mut model, &bound, ia, Mode::Eval).unwrap();
    let fb = encode(&mut g, &mut model, &bound, ib, Mode::Eval).unwrap();
    let aa = channel_attention(&mut g, &bound, fa).unwrap();
    let ab = channel_attention(&mut g, &bound, fb).unwrap();
    assert!(g.value(aa).bit_eq(g.value(ab)));
}

#[test]
fn attention_entries_strictly_inside_unit_interval() {
    let mut model = CosegModel::<f64>::init(ModelConfig::default(), 5).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(rand_image(&mut ChaCha8Rng::seed_from_u64(6), 2, 64), false);
    let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
    let alpha = channel_attention(&mut g, &bound, f).unwrap();
    assert!(g
        .value(alpha)
        .data()
        .iter()
        .all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn ca_pair_symmetry_and_swap_equivariance() {
    let mut model = CosegModel::<f64>::init(ModelConfig::default(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img_a = rand_image(&mut rng, 1, 64);
    let img_b = rand_image(&mut rng, 1, 64);

    // Identical inputs give identical outputs.
    let mut dr = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(img_a.clone(), false);
    let ia2 = g.leaf(img_a.clone(), false);
    let out = forward_pair(&mut g, &mut model, &bound, ia, ia2, Mode::Eval, &mut dr).unwrap();
    assert!(g.value(out.logits_a).bit_eq(g.value(out.logits_b)));

    // Swapping the input pair swaps the output pair exactly.
    let run = |model: &mut CosegModel<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut dr = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ia = g.leaf(a.clone(), false);
        let ib = g.leaf(b.clone(), false);
        let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Eval, &mut dr).unwrap();
        (g.value(out.logits_a).clone(), g.value(out.logits_b).clone())
    };
    let (la, lb) = run(&mut model, &img_a, &img_b);
    let (la_swapped, lb_swapped) = run(&mut model, &img_b, &img_a);
    assert!(la.bit_eq(&lb_swapped));
    assert!(lb.bit_eq(&la_swapped));
}

#[test]
fn pair_symmetry_holds_for_all_variants() {
    for variant in [Variant::Ca, Variant::Fca, Variant::Csa] {
        let mut model = CosegModel::<f64>::init(tiny_config(variant), 9).unwrap();
        let img = rand_image(&mut ChaCha8Rng::seed_from_u64(10), 2, 16);
        let mut dr = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ia = g.leaf(img.clone(), false);
        let ib = g.leaf(img, false);
        let out = forward_pair(&mut g, &mut model, &bound, ia, ib, Mode::Eval, &mut dr).unwrap();
        assert!(
            g.value(out.logits_a).bit_eq(g.value(out.logits_b)),
            "variant {:?}",
            variant
        );
    }
}

#[test]
fn selector_semantics_zero_kills_one_preserves() {
    // A manually built selector: channel 0 off, channel 1 on.
    let mut g = Graph::<f64>::new();
    let f = g.leaf(
        Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64) * 0.25 + 0.1),
        false,
    );
    let sel = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(), false);
    let out = g.broadcast_mul(sel, f).unwrap();
    let data = g.value(out).data();
    assert!(data[..9].iter().all(|&v| v == 0.0));
    assert_eq!(&data[9..], &g.value(f).data()[9..]);
}

#[test]
fn fuse_attention_is_symmetric_and_matches_direct_formula() {
    let cfg = tiny_config(Variant::Fca);
    let mut model = CosegModel::<f64>::init(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img_a = rand_image(&mut rng, 2, 16);
    let img_b = rand_image(&mut rng, 2, 16);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(img_a, false);
    let ib = g.leaf(img_b, false);
    let fa = encode(&mut g, &mut model, &bound, ia, Mode::Eval).unwrap();
    let fb = encode(&mut g, &mut model, &bound, ib, Mode::Eval).unwrap();
    let aa = channel_attention(&mut g, &bound, fa).unwrap();
    let ab = channel_attention(&mut g, &bound, fb).unwrap();
    let fused_ab = fuse_attention(&mut g, &bound, aa, ab).unwrap();
    let fused_ba = fuse_attention(&mut g, &bound, ab, aa).unwrap();
    assert!(g.value(fused_ab).bit_eq(g.value(fused_ba)));

    // Direct evaluation of sigmoid((aa+ab)W + b), computed with plain loops.
    let c = cfg.feature_channels();
    let (aav, abv) = (g.value(aa).data().to_vec(), g.value(ab).data().to_vec());
    let w = model.attention.fuse_w.as_ref().unwrap().data().to_vec();
    let bias = model.attention.fuse_b.as_ref().unwrap().data().to_vec();
    let n = 2;
    let mut expected = vec![0.0f64; n * c];
    for ni in 0..n {
        for o in 0..c {
            let mut pre = bias[o];
            for d in 0..c {
                pre += (aav[ni * c + d] + abv[ni * c + d]) * w[d * c + o];
            }
            expected[ni * c + o] = 1.0 / (1.0 + (-pre).exp());
        }
    }
    for (got, want) in g.value(fused_ab).data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }
}

#[test]
fn fuse_with_zero_weights_is_half() {
    let cfg = tiny_config(Variant::Fca);
    let mut model = CosegModel::<f64>::init(cfg.clone(), 13).unwrap();
    let c = cfg.feature_channels();
    model.attention.fuse_w = Some(Tensor::zeros(&[c, c]));
    model.attention.fuse_b = Some(Tensor::zeros(&[c]));
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(rand_image(&mut ChaCha8Rng::seed_from_u64(14), 1, 16), false);
    let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
    let a = channel_attention(&mut g, &bound, f).unwrap();
    let fused = fuse_attention(&mut g, &bound, a, a).unwrap();
    assert!(g.value(fused).data().iter().all(|&v| v == 0.5));
}

#[test]
fn fca_swap_keeps_fused_selector() {
    let mut model = CosegModel::<f64>::init(tiny_config(Variant::Fca), 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let img_a = rand_image(&mut rng, 1, 16);
    let img_b = rand_image(&mut rng, 1, 16);
    let run = |model: &mut CosegModel<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut dr = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ia = g.leaf(a.clone(), false);
        let ib = g.leaf(b.clone(), false);
        let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Eval, &mut dr).unwrap();
        (
            g.value(out.logits_a).clone(),
            g.value(out.logits_b).clone(),
            g.value(out.fused.unwrap()).clone(),
        )
    };
    let (la, lb, fused) = run(&mut model, &img_a, &img_b);
    let (la2, lb2, fused2) = run(&mut model, &img_b, &img_a);
    assert!(fused.bit_eq(&fused2));
    assert!(la.bit_eq(&lb2));
    assert!(lb.bit_eq(&la2));
}

#[test]
fn spatial_attention_bounds() {
    // Zero feature map: channel means are zero, sigmoid gives exactly 0.5.
    let mut g = Graph::<f64>::new();
    let zero = g.leaf(Tensor::zeros(&[1, 4, 3, 3]), false);
    let s = spatial_attention(&mut g, zero).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.5));

    // Non-negative features keep every entry at or above 0.5, and the map is
    // maximal where the channel mean is maximal.
    let f = Tensor::from_fn(&[1, 4, 3, 3], |i| if i % 9 == 4 { 3.0 } else { 0.2 });
    let fid = g.leaf(f.clone(), false);
    let s2 = spatial_attention(&mut g, fid).unwrap();
    let vals = g.value(s2).data().to_vec();
    assert!(vals.iter().all(|&v| (0.5..1.0).contains(&v)));
    let mean = g.channel_mean(fid).unwrap();
    let argmax = |xs: &[f64]| {
        xs.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    assert_eq!(argmax(&vals), argmax(g.value(mean).data()));
}

#[test]
fn csa_matches_explicit_expansion() {
    let mut model = CosegModel::<f64>::init(tiny_config(Variant::Csa), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let img_a = rand_image(&mut rng, 2, 16);
    let img_b = rand_image(&mut rng, 2, 16);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(img_a, false);
    let ib = g.leaf(img_b, false);
    let fa = encode(&mut g, &mut model, &bound, ia, Mode::Eval).unwrap();
    let fb = encode(&mut g, &mut model, &bound, ib, Mode::Eval).unwrap();
    let attended = apply_csa(&mut g, &bound, fa, fb).unwrap();

    // Oracle: expand (alpha_b * spatial_a) over the full grid, multiply fa.
    let shape = g.value(fa).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let alpha_b = g.value(attended.alpha_b).data().to_vec();
    let spatial_a = g.value(attended.spatial_a.unwrap()).data().to_vec();
    let fav = g.value(fa).data().to_vec();
    let mut expected = vec![0.0f64; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..h * w {
                let idx = (ni * c + ci) * h * w + p;
                expected[idx] = alpha_b[ni * c + ci] * spatial_a[ni * h * w + p] * fav[idx];
            }
        }
    }
    for (got, want) in g.value(attended.fa).data().iter().zip(&expected) {
        assert_eq!(got.to_bits(), want.to_bits());
    }
}

#[test]
fn csa_identical_inputs_give_identical_outputs() {
    let mut model = CosegModel::<f64>::init(tiny_config(Variant::Csa), 19).unwrap();
    let img = rand_image(&mut ChaCha8Rng::seed_from_u64(20), 1, 16);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(img.clone(), false);
    let ib = g.leaf(img, false);
    let fa = encode(&mut g, &mut model, &bound, ia, Mode::Eval).unwrap();
    let fb = encode(&mut g, &mut model, &bound, ib, Mode::Eval).unwrap();
    let attended = apply_csa(&mut g, &bound, fa, fb).unwrap();
    assert!(g.value(attended.fa).bit_eq(g.value(attended.fb)));
}

#[test]
fn decode_shapes_and_eval_determinism() {
    let mut model = CosegModel::<f64>::init(three_stage_config(), 21).unwrap();
    let feature = Tensor::from_fn(&[2, 64, 8, 8], |i| ((i % 17) as f64) * 0.1);
    let run = |model: &mut CosegModel<f64>| {
        let mut dr = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let f = g.leaf(feature.clone(), false);
        let logits = decode(&mut g, model, &bound, f, Mode::Eval, &mut dr).unwrap();
        g.value(logits).clone()
    };
    let a = run(&mut model);
    let b = run(&mut model);
    assert_eq!(a.shape(), &[2, 2, 64, 64]);
    assert!(a.bit_eq(&b));
}

#[test]
fn forward_pair_matches_manual_ca_composition() {
    let mut model = CosegModel::<f64>::init(ModelConfig::default(), 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let img_a = rand_image(&mut rng, 1, 64);
    let img_b = rand_image(&mut rng, 1, 64);

    let mut dr = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(img_a.clone(), false);
    let ib = g.leaf(img_b.clone(), false);
    let out = forward_pair(&mut g, &mut model, &bound, ia, ib, Mode::Eval, &mut dr).unwrap();
    let composed = g.value(out.logits_a).clone();

    // Manual composition through the same public pieces.
    let mut dr2 = ChaCha8Rng::seed_from_u64(0);
    let mut g2 = Graph::new();
    let bound2 = model.bind(&mut g2, false);
    let ia2 = g2.leaf(img_a, false);
    let ib2 = g2.leaf(img_b, false);
    let fa = encode(&mut g2, &mut model, &bound2, ia2, Mode::Eval).unwrap();
    let fb = encode(&mut g2, &mut model, &bound2, ib2, Mode::Eval).unwrap();
    let ab = channel_attention(&mut g2, &bound2, fb).unwrap();
    let fa2 = g2.broadcast_mul(ab, fa).unwrap();
    let logits_a = decode(&mut g2, &mut model, &bound2, fa2, Mode::Eval, &mut dr2).unwrap();
    assert!(composed.bit_eq(g2.value(logits_a)));
}

#[test]
fn initial_loss_is_near_two_ln_two() {
    let cfg = SyntheticConfig {
        train_pairs: 2,
        val_pairs: 0,
        test_pairs_per_class: 0,
        ..SyntheticConfig::default()
    };
    let set = gen_synthetic_pairset(&cfg).unwrap();
    let mut model = CosegModel::<f64>::init(ModelConfig::default(), 24).unwrap();
    let mut opt = Adam::new(AdamHyper { lr: 0.0, ..AdamHyper::default() });
    let refs: Vec<_> = set.train.iter().collect();
    let batch = PairBatch::<f64>::from_pairs(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let loss = train_step(&mut model, &mut opt, &batch, &mut rng).unwrap();
    let two_ln2 = 2.0 * std::f64::consts::LN_2;
    assert!(
        (loss - two_ln2).abs() < 0.2,
        "initial loss {} not within 0.2 of {}",
        loss,
        two_ln2
    );
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_unchanged() {
    let cfg = SyntheticConfig {
        train_pairs: 1,
        val_pairs: 0,
        test_pairs_per_class: 0,
        canvas: 32,
        ..SyntheticConfig::default()
    };
    let set = gen_synthetic_pairset(&cfg).unwrap();
    let mut model = CosegModel::<f64>::init(
        ModelConfig {
            stage_channels: vec![8, 16],
            convs_per_stage: 1,
            input_size: 32,
            ..ModelConfig::default()
        },
        26,
    )
    .unwrap();
    let mut before = Vec::new();
    model.visit_params(|name, t| before.push((name.to_string(), t.clone())));
    let mut opt = Adam::new(AdamHyper { lr: 0.0, ..AdamHyper::default() });
    let refs: Vec<_> = set.train.iter().collect();
    let batch = PairBatch::<f64>::from_pairs(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    train_step(&mut model, &mut opt, &batch, &mut rng).unwrap();
    let mut i = 0;
    model.visit_params(|name, t| {
        assert_eq!(before[i].0, name);
        assert!(t.bit_eq(&before[i].1), "{} changed under lr 0", name);
        i += 1;
    });
}

#[test]
fn overfits_a_single_pair() {
    let cfg = SyntheticConfig {
        train_pairs: 1,
        val_pairs: 0,
        test_pairs_per_class: 0,
        canvas: 32,
        ..SyntheticConfig::default()
    };
    let set = gen_synthetic_pairset(&cfg).unwrap();
    let mut model = CosegModel::<f64>::init(
        ModelConfig {
            stage_channels: vec![8, 16],
            convs_per_stage: 1,
            input_size: 32,
            ..ModelConfig::default()
        },
        28,
    )
    .unwrap();
    let mut opt = Adam::new(AdamHyper { lr: 1e-3, ..AdamHyper::default() });
    let refs: Vec<_> = set.train.iter().collect();
    let batch = PairBatch::<f64>::from_pairs(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = train_step(&mut model, &mut opt, &batch, &mut rng).unwrap();
    }
    assert!(last < 0.1, "loss after 200 steps: {}", last);
}
