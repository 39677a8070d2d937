//! Acceptance suite: one criterion per section, each printing a PASS/FAIL
//! line. Run with `cargo test --test acceptance -- --nocapture` to watch the
//! lines appear; the whole suite trains three models and takes several
//! minutes.

use std::time::Instant;

use coseg_core::data::{gen_synthetic_pairset, gen_group, metrics, Mask, ShapeClass, SyntheticConfig};
use coseg_core::gradcheck;
use coseg_core::group::{
    generate_attention, instant_group_coseg, pairwise_group_coseg, CallCounters, GroupMode,
};
use coseg_core::model::{
    channel_attention, encode, evaluate, forward_pair, fuse_attention, spatial_attention, train,
    CosegModel, ModelConfig, Pooling, TrainOptions, Variant,
};
use coseg_core::{Graph, Mode, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    label: &'static str,
    pass: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, label: &'static str, pass: bool, detail: String) {
    println!(
        "acceptance [{}] {}: {} ({})",
        outcomes.len() + 1,
        label,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    outcomes.push(Outcome { label, pass, detail });
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

fn rand_images(seed: u64, n: usize, s: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..1.0)))
        .collect()
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();

    criterion_gradient_suite(&mut outcomes);
    criterion_attention_algebra(&mut outcomes);
    criterion_algorithm_structure(&mut outcomes);
    let trained = criterion_desk_training(&mut outcomes);
    criterion_group_minimum(&mut outcomes, trained.as_ref());
    criterion_disentanglement(&mut outcomes, trained.as_ref());
    criterion_metric_oracles(&mut outcomes);

    let failures: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}: {}", o.label, o.detail))
        .collect();
    assert!(
        failures.is_empty(),
        "failed acceptance criteria:\n{}",
        failures.join("\n")
    );
}

/// Every differentiable primitive and the end-to-end pair loss against
/// central finite differences; primitives at 1e-4, end-to-end at 1e-3,
/// the whole suite within five minutes.
fn criterion_gradient_suite(outcomes: &mut Vec<Outcome>) {
    let start = Instant::now();
    let primitives = gradcheck::primitive_suite(2024).expect("primitive suite");
    let pair = gradcheck::pair_loss_suite(2024, 7).expect("pair loss suite");
    let elapsed = start.elapsed();

    let worst_primitive = primitives
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let worst_pair = pair.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    let sampled: usize = pair.iter().map(|r| r.checked).sum();
    let pass = primitives.iter().all(|r| r.passes(1e-4))
        && pair.iter().all(|r| r.passes(1e-3))
        && sampled >= 20
        && elapsed.as_secs() < 300;
    report(
        outcomes,
        "gradient suite",
        pass,
        format!(
            "{} primitive checks worst {:.2e}, {} end-to-end params worst {:.2e}, {:.1}s",
            primitives.len(),
            worst_primitive,
            sampled,
            worst_pair,
            elapsed.as_secs_f64()
        ),
    );
}

/// CA swap-equivariance, FCA fusion symmetry, selector zero/one semantics,
/// sigmoid range and the CSA spatial lower bound, all exact or at 1e-12.
fn criterion_attention_algebra(outcomes: &mut Vec<Outcome>) {
    let mut failures = Vec::new();

    // CA swap equivariance, bit level.
    {
        let mut model = CosegModel::<f64>::init(tiny_config(Variant::Ca), 3).unwrap();
        let images = rand_images(4, 2, 16);
        let run = |model: &mut CosegModel<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ia = g.leaf(a.reshape(vec![1, 3, 16, 16]).unwrap(), false);
            let ib = g.leaf(b.reshape(vec![1, 3, 16, 16]).unwrap(), false);
            let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Eval, &mut rng).unwrap();
            (g.value(out.logits_a).clone(), g.value(out.logits_b).clone())
        };
        let (la, lb) = run(&mut model, &images[0], &images[1]);
        let (la2, lb2) = run(&mut model, &images[1], &images[0]);
        if !(la.bit_eq(&lb2) && lb.bit_eq(&la2)) {
            failures.push("ca swap equivariance");
        }
    }

    // FCA fusion symmetry, bit level.
    {
        let mut model = CosegModel::<f64>::init(tiny_config(Variant::Fca), 5).unwrap();
        let images = rand_images(6, 2, 16);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ia = g.leaf(images[0].reshape(vec![1, 3, 16, 16]).unwrap(), false);
        let ib = g.leaf(images[1].reshape(vec![1, 3, 16, 16]).unwrap(), false);
        let fa = encode(&mut g, &mut model, &bound, ia, Mode::Eval).unwrap();
        let fb = encode(&mut g, &mut model, &bound, ib, Mode::Eval).unwrap();
        let aa = channel_attention(&mut g, &bound, fa).unwrap();
        let ab = channel_attention(&mut g, &bound, fb).unwrap();
        let f1 = fuse_attention(&mut g, &bound, aa, ab).unwrap();
        let f2 = fuse_attention(&mut g, &bound, ab, aa).unwrap();
        if !g.value(f1).bit_eq(g.value(f2)) {
            failures.push("fca fusion symmetry");
        }
    }

    // Selector semantics: 0 kills a channel exactly, 1 preserves it exactly.
    {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64) - 4.0), false);
        let sel = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(), false);
        let out = g.broadcast_mul(sel, f).unwrap();
        let (data, orig) = (g.value(out).data(), g.value(f).data());
        if !(data[..9].iter().all(|&v| v == 0.0)
            && data[9..]
                .iter()
                .zip(&orig[9..])
                .all(|(a, b)| a.to_bits() == b.to_bits()))
        {
            failures.push("selector zero/one semantics");
        }
    }

    // Sigmoid range strictly inside (0,1) and attention entries likewise.
    {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..2000).map(|i| (i as f64 - 1000.0) * 0.03).collect();
        let x = g.leaf(Tensor::new(vec![2000], vals).unwrap(), false);
        let y = g.sigmoid(x);
        if !g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0) {
            failures.push("sigmoid range");
        }
        let mut model = CosegModel::<f64>::init(tiny_config(Variant::Ca), 7).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let img = g.leaf(rand_images(8, 1, 16)[0].reshape(vec![1, 3, 16, 16]).unwrap(), false);
        let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
        let alpha = channel_attention(&mut g, &bound, f).unwrap();
        if !g.value(alpha).data().iter().all(|&v| v > 0.0 && v < 1.0) {
            failures.push("attention range");
        }
    }

    // CSA spatial attention >= 0.5 on non-negative features (within 1e-12).
    {
        let mut model = CosegModel::<f64>::init(tiny_config(Variant::Csa), 9).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let img = g.leaf(rand_images(10, 1, 16)[0].reshape(vec![1, 3, 16, 16]).unwrap(), false);
        let f = encode(&mut g, &mut model, &bound, img, Mode::Eval).unwrap();
        if !g.value(f).data().iter().all(|&v| v >= 0.0) {
            failures.push("encoder non-negativity");
        }
        let s = spatial_attention(&mut g, f).unwrap();
        if !g.value(s).data().iter().all(|&v| v >= 0.5 - 1e-12) {
            failures.push("csa spatial lower bound");
        }
    }

    report(
        outcomes,
        "attention algebra",
        failures.is_empty(),
        if failures.is_empty() {
            "swap equivariance, fusion symmetry, selector semantics, sigmoid range, spatial bound".to_string()
        } else {
            failures.join(", ")
        },
    );
}

/// Invocation counters linear for instant / quadratic for pairwise, the
/// N = 16 wall-clock ratio on the desk model, and the identical-image
/// collapse.
fn criterion_algorithm_structure(outcomes: &mut Vec<Outcome>) {
    let mut failures = Vec::new();

    // Counters on a tiny model.
    let mut model = CosegModel::<f64>::init(tiny_config(Variant::Ca), 11).unwrap();
    let images = rand_images(12, 16, 16);
    for n in [2usize, 4, 8, 16] {
        let instant = instant_group_coseg(&mut model, &images[..n], GroupMode::Average, true).unwrap();
        let c = instant.counters;
        if !(c.encoder == n && c.attention == n && c.decoder == n && c.reductions == 1) {
            failures.push(format!("instant counters at n={}: {:?}", n, c));
        }
        let pairwise = pairwise_group_coseg(&mut model, &images[..n]).unwrap();
        if pairwise.counters.encoder != n * (n - 1) {
            failures.push(format!(
                "pairwise encoder count at n={}: {}",
                n, pairwise.counters.encoder
            ));
        }
    }

    // Wall clock on the desk model, N = 16.
    let mut desk = CosegModel::<f64>::init(ModelConfig::default(), 13).unwrap();
    let desk_images = rand_images(14, 16, desk.config.input_size);
    let instant = instant_group_coseg(&mut desk, &desk_images, GroupMode::Average, true).unwrap();
    let pairwise = pairwise_group_coseg(&mut desk, &desk_images).unwrap();
    let ratio = instant.wall.as_secs_f64() / pairwise.wall.as_secs_f64();
    if ratio >= 0.25 {
        failures.push(format!("wall-clock ratio {:.3} (need < 0.25)", ratio));
    }

    // Identical-image groups collapse to the pairwise mask exactly.
    for mode in [GroupMode::Average, GroupMode::Minimum] {
        let img = rand_images(15, 1, 16).remove(0);
        let group: Vec<Tensor<f64>> = (0..6).map(|_| img.clone()).collect();
        let instant = instant_group_coseg(&mut model, &group, mode, true).unwrap();
        let pair = pairwise_group_coseg(&mut model, &group[..2]).unwrap();
        if !instant.masks.iter().all(|m| m.data == pair.masks[0].data) {
            failures.push(format!("collapse mismatch in {:?} mode", mode));
        }
    }

    report(
        outcomes,
        "algorithm structure",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "counters linear/quadratic for n in {{2,4,8,16}}, wall ratio {:.3}, collapse exact",
                ratio
            )
        } else {
            failures.join("; ")
        },
    );
}

struct TrainedModels {
    dataset: coseg_core::data::PairSet,
    config: SyntheticConfig,
    ca: CosegModel<f32>,
}

/// Trains all three variants on the default synthetic dataset; each must
/// reach mean seen-class test jaccard >= 0.85 and unseen >= 0.6 within 30
/// epochs and 30 minutes.
fn criterion_desk_training(outcomes: &mut Vec<Outcome>) -> Option<TrainedModels> {
    let data_cfg = SyntheticConfig::default();
    assert_eq!(data_cfg.train_pairs, 400);
    assert_eq!(data_cfg.canvas, 64);
    assert_eq!(data_cfg.classes.len(), 5);
    let set = gen_synthetic_pairset(&data_cfg).expect("dataset");
    let holdout = data_cfg.holdout.unwrap();

    let mut failures = Vec::new();
    let mut details = Vec::new();
    let mut ca_model = None;
    for variant in [Variant::Ca, Variant::Fca, Variant::Csa] {
        let start = Instant::now();
        let mut model = CosegModel::<f32>::init(ModelConfig::desk(variant), 42).unwrap();
        let train_report = train(
            &mut model,
            &set.train,
            &set.val,
            &TrainOptions {
                epochs: 30,
                batch_pairs: 4,
                lr: 1e-3,
                seed: 0,
                target_val_jaccard: Some(0.93),
                verbose: false,
            },
        )
        .expect("training");
        let rows = evaluate(&mut model, &set.test, 8).expect("evaluation");
        let elapsed = start.elapsed();
        let mut seen_sum = 0.0;
        let mut seen_n = 0usize;
        let mut unseen = 0.0;
        for r in &rows {
            if r.label == holdout.name() {
                unseen = r.jaccard;
            } else {
                seen_sum += r.jaccard;
                seen_n += 1;
            }
        }
        let seen = seen_sum / seen_n as f64;
        let ok = seen >= 0.85 && unseen >= 0.6 && elapsed.as_secs() <= 1800
            && train_report.epochs_run <= 30;
        if !ok {
            failures.push(format!(
                "{}: seen {:.3} unseen {:.3} epochs {} {:.0}s",
                variant.name(),
                seen,
                unseen,
                train_report.epochs_run,
                elapsed.as_secs_f64()
            ));
        }
        details.push(format!(
            "{} seen {:.3} unseen {:.3} in {} epochs/{:.0}s",
            variant.name(),
            seen,
            unseen,
            train_report.epochs_run,
            elapsed.as_secs_f64()
        ));
        if variant == Variant::Ca {
            ca_model = Some(model);
        }
    }

    let pass = failures.is_empty();
    report(
        outcomes,
        "desk-scale training",
        pass,
        details.join("; "),
    );
    Some(TrainedModels {
        dataset: set,
        config: data_cfg,
        ca: ca_model.expect("ca variant trained"),
    })
}

/// Average mode segments the common class in the 8 of 9 images that contain
/// it; minimum mode produces almost no foreground because one image lacks it.
fn criterion_group_minimum(outcomes: &mut Vec<Outcome>, trained: Option<&TrainedModels>) {
    let Some(trained) = trained else {
        report(outcomes, "group minimum", false, "no trained model".into());
        return;
    };
    let mut model = trained.ca.clone();
    let group_cfg = SyntheticConfig {
        distractors: 1,
        ..trained.config.clone()
    };
    let (images, gt_masks) = gen_group(&group_cfg, ShapeClass::Disk, 8, 1, 99).expect("group");
    let tensors: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();

    let average = instant_group_coseg(&mut model, &tensors, GroupMode::Average, true).unwrap();
    let minimum = instant_group_coseg(&mut model, &tensors, GroupMode::Minimum, true).unwrap();

    let mut failures = Vec::new();
    let mut jaccards = Vec::new();
    for i in 0..8 {
        let j = metrics::jaccard(&average.masks[i], &gt_masks[i]).unwrap();
        jaccards.push(j);
        if j < 0.7 {
            failures.push(format!("average-mode jaccard {:.3} on image {}", j, i));
        }
    }
    let avg_fg: usize = average.masks.iter().map(Mask::foreground_count).sum();
    let min_fg: usize = minimum.masks.iter().map(Mask::foreground_count).sum();
    if (min_fg as f64) >= 0.10 * avg_fg as f64 {
        failures.push(format!(
            "minimum-mode foreground {} not below 10% of average-mode {}",
            min_fg, avg_fg
        ));
    }
    let mean_j = jaccards.iter().sum::<f64>() / jaccards.len() as f64;
    report(
        outcomes,
        "group minimum",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "average mean jaccard {:.3}, foreground {} vs minimum {}",
                mean_j, avg_fg, min_fg
            )
        } else {
            failures.join("; ")
        },
    );
}

/// Exported attention vectors cluster by class: mean intra-class cosine
/// similarity beats inter-class by at least 0.1.
fn criterion_disentanglement(outcomes: &mut Vec<Outcome>, trained: Option<&TrainedModels>) {
    let Some(trained) = trained else {
        report(outcomes, "attention disentanglement", false, "no trained model".into());
        return;
    };
    let mut model = trained.ca.clone();
    let mut by_class: Vec<(ShapeClass, Vec<Vec<f64>>)> = Vec::new();
    let mut counters = CallCounters::default();
    for pair in &trained.dataset.test {
        let slot = match by_class.iter_mut().find(|(c, _)| *c == pair.class) {
            Some((_, v)) => v,
            None => {
                by_class.push((pair.class, Vec::new()));
                &mut by_class.last_mut().unwrap().1
            }
        };
        for image in [&pair.image_a, &pair.image_b] {
            let (alpha, _) =
                generate_attention(&mut model, &image.to_tensor::<f32>(), &mut counters).unwrap();
            slot.push(alpha.iter().map(|v| *v as f64).collect());
        }
    }

    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for (ci, (_, vecs_i)) in by_class.iter().enumerate() {
        for (i, a) in vecs_i.iter().enumerate() {
            for b in vecs_i.iter().skip(i + 1) {
                intra.push(cosine(a, b));
            }
        }
        for (_, vecs_j) in by_class.iter().skip(ci + 1) {
            for a in vecs_i {
                for b in vecs_j {
                    inter.push(cosine(a, b));
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mi, me) = (mean(&intra), mean(&inter));
    let margin = mi - me;
    report(
        outcomes,
        "attention disentanglement",
        margin >= 0.1,
        format!(
            "intra {:.3} vs inter {:.3}, margin {:.3} over {} classes",
            mi,
            me,
            margin,
            by_class.len()
        ),
    );
}

/// jaccard and precision agree exactly with a naive per-pixel counting
/// oracle on 100 random mask pairs.
fn criterion_metric_oracles(outcomes: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let h = rng.random_range(1..12usize);
        let w = rng.random_range(1..12usize);
        let make = |rng: &mut ChaCha8Rng| Mask {
            h,
            w,
            data: (0..h * w).map(|_| rng.random_range(0..2u8)).collect(),
        };
        let a = make(&mut rng);
        let b = make(&mut rng);

        let mut inter = 0usize;
        let mut union = 0usize;
        let mut agree = 0usize;
        for (&x, &y) in a.data.iter().zip(&b.data) {
            inter += usize::from(x == 1 && y == 1);
            union += usize::from(x == 1 || y == 1);
            agree += usize::from(x == y);
        }
        let want_j = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        let want_p = agree as f64 / (h * w) as f64;
        let got_j = metrics::jaccard(&a, &b).unwrap();
        let got_p = metrics::precision_pixel(&a, &b).unwrap();
        if got_j.to_bits() != want_j.to_bits() || got_p.to_bits() != want_p.to_bits() {
            mismatches += 1;
        }
    }
    report(
        outcomes,
        "metric oracles",
        mismatches == 0,
        format!("{} mismatches over 100 random mask pairs", mismatches),
    );
}
