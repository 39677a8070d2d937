//! Finite-difference verification of analytic gradients.
//!
//! The numerical side never touches the backward pass: it re-evaluates a pure
//! forward closure at perturbed inputs, so it stays an independent oracle for
//! whatever the graph's derivative rules produce. All checks run in `f64`.

use crate::error::{CosegError, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Outcome of one comparison between analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Central finite differences of `f` w.r.t. every element of `inputs[which]`.
///
/// `f` must be pure: it is called 2 * numel times with perturbed copies.
pub fn finite_diff<F>(f: &F, inputs: &[Tensor<f64>], which: usize, step: f64) -> Vec<f64>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let base = &inputs[which];
    let mut grads = Vec::with_capacity(base.numel());
    for i in 0..base.numel() {
        let eval = |delta: f64| {
            let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
            let mut data = base.data().to_vec();
            data[i] += delta;
            probe[which] = Tensor::new(base.shape().to_vec(), data).expect("same shape");
            f(&probe)
        };
        grads.push((eval(step) - eval(-step)) / (2.0 * step));
    }
    grads
}

/// Relative error with an absolute floor so near-zero gradients compare on an
/// absolute scale instead of blowing up.
pub fn rel_err(analytic: f64, numerical: f64) -> f64 {
    let scale = analytic.abs().max(numerical.abs());
    if scale < 1e-6 {
        (analytic - numerical).abs()
    } else {
        (analytic - numerical).abs() / scale.max(1.0e-3)
    }
}

/// Compares an analytic gradient against central differences of `f`.
pub fn compare<F>(
    name: &str,
    f: &F,
    inputs: &[Tensor<f64>],
    which: usize,
    analytic: &[f64],
    step: f64,
) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let numerical = finite_diff(f, inputs, which, step);
    if numerical.len() != analytic.len() {
        return Err(CosegError::invalid(
            "gradcheck",
            format!(
                "{}: analytic gradient has {} entries, input has {}",
                name,
                analytic.len(),
                numerical.len()
            ),
        ));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numerical)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0f64, f64::max);
    Ok(GradCheck {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel_err,
    })
}

/// Runs finite-difference checks over every differentiable primitive on
/// randomized small shapes. Each entry compares the graph's analytic gradient
/// of a weighted-sum loss against central differences of the same forward
/// computation.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    suite::run(seed)
}

/// Finite-difference check of the full train-mode pair loss on a tiny model,
/// for each attention variant. `samples_per_variant` parameter elements are
/// sampled at random across all layers and probed individually.
pub fn pair_loss_suite(seed: u64, samples_per_variant: usize) -> Result<Vec<GradCheck>> {
    use crate::model::{forward_pair, CosegModel, ModelConfig, Pooling, Variant};
    use crate::tensor::{Graph, MaskBatch, Mode};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = |variant| ModelConfig {
        stage_channels: vec![4, 8],
        convs_per_stage: 1,
        input_size: 16,
        variant,
        dropout: 0.5,
        pooling: Pooling::Avg,
    };
    let img_a = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let img_b = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let labels_a: Vec<u8> = (0..256).map(|_| rng.random_range(0..2u8)).collect();
    let labels_b: Vec<u8> = (0..256).map(|_| rng.random_range(0..2u8)).collect();
    let mask_a = MaskBatch::new(1, 16, 16, labels_a).expect("binary labels");
    let mask_b = MaskBatch::new(1, 16, 16, labels_b).expect("binary labels");

    let mut reports = Vec::new();
    for variant in [Variant::Ca, Variant::Fca, Variant::Csa] {
        let base = CosegModel::<f64>::init(config(variant), seed ^ 0x5eed)?;
        let mut params: Vec<Tensor<f64>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        base.visit_params(|name, t| {
            names.push(name.to_string());
            params.push(t.clone());
        });

        // Pure loss of a parameter assignment: fresh model, fixed dropout
        // stream, train-mode forward.
        let loss_of = |probe: &[Tensor<f64>]| -> f64 {
            let mut model = base.clone();
            let mut i = 0;
            model.visit_params_mut(|_, t| {
                *t = probe[i].clone();
                i += 1;
            });
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(4242);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ia = g.leaf(img_a.clone(), false);
            let ib = g.leaf(img_b.clone(), false);
            let out = forward_pair(&mut g, &mut model, &bound, ia, ib, Mode::Train, &mut dropout_rng)
                .expect("tiny forward");
            let la = g.softmax_cross_entropy(out.logits_a, &mask_a).expect("loss a");
            let lb = g.softmax_cross_entropy(out.logits_b, &mask_b).expect("loss b");
            let loss = g.add(la, lb).expect("scalar add");
            g.value(loss).item()
        };

        // Analytic gradients of every parameter in one backward pass.
        let analytic: Vec<Tensor<f64>> = {
            let mut model = base.clone();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(4242);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let ia = g.leaf(img_a.clone(), false);
            let ib = g.leaf(img_b.clone(), false);
            let out = forward_pair(&mut g, &mut model, &bound, ia, ib, Mode::Train, &mut dropout_rng)?;
            let la = g.softmax_cross_entropy(out.logits_a, &mask_a)?;
            let lb = g.softmax_cross_entropy(out.logits_b, &mask_b)?;
            let loss = g.add(la, lb)?;
            g.backward(loss)?;
            bound
                .params
                .iter()
                .map(|(_, id)| g.grad(*id).expect("trainable leaf gradient"))
                .collect()
        };

        let mut max_err = 0.0f64;
        for _ in 0..samples_per_variant {
            let pi = rng.random_range(0..params.len());
            let ei = rng.random_range(0..params[pi].numel());
            let eval = |delta: f64| {
                let mut probe = params.clone();
                let mut data = probe[pi].data().to_vec();
                data[ei] += delta;
                probe[pi] = Tensor::new(probe[pi].shape().to_vec(), data).expect("same shape");
                loss_of(&probe)
            };
            let numerical = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[ei];
            max_err = max_err.max(rel_err(a, numerical));
        }
        reports.push(GradCheck {
            name: format!("pair loss [{}]", config(variant).variant.name()),
            checked: samples_per_variant,
            max_rel_err: max_err,
        });
    }
    Ok(reports)
}

mod suite {
    use super::{compare, GradCheck, FD_STEP};
    use crate::error::Result;
    use crate::tensor::{Graph, MaskBatch, Mode, NodeId, Tensor};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Random tensor kept away from zero so kinked activations (relu) see no
    /// sign flips under the probe step.
    fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let mag = rng.random_range(0.05..1.5);
            if rng.random::<f64>() < 0.5 {
                -mag
            } else {
                mag
            }
        })
    }

    /// Reduces `out` to a scalar through a fixed random weighting so
    /// positional errors in gradients cannot cancel.
    fn weighted_loss(g: &mut Graph<f64>, out: NodeId, weights: &Tensor<f64>) -> NodeId {
        let w = g.leaf(weights.clone(), false);
        let prod = g.broadcast_mul(out, w).expect("weights match output shape");
        g.sum(prod)
    }

    /// One check: `build` maps graph + input leaves to the op output; the
    /// same closure serves the analytic pass and every FD evaluation.
    fn check_op<B>(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        rng: &mut ChaCha8Rng,
        build: B,
    ) -> Result<Vec<GradCheck>>
    where
        B: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let out_shape = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = build(&mut g, &ids);
            g.value(out).shape().to_vec()
        };
        let weights = rand_tensor(rng, &out_shape, -1.0, 1.0);

        let forward = |probe: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = probe.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = build(&mut g, &ids);
            let loss = weighted_loss(&mut g, out, &weights);
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        let loss = weighted_loss(&mut g, out, &weights);
        g.backward(loss)?;

        let mut reports = Vec::new();
        for (which, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).expect("leaf gradient populated");
            reports.push(compare(
                &format!("{}[input {}]", name, which),
                &forward,
                &inputs,
                which,
                analytic.data(),
                FD_STEP,
            )?);
        }
        Ok(reports)
    }

    pub fn run(seed: u64) -> Result<Vec<GradCheck>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all = Vec::new();

        // conv2d, stride 1 padded and stride 2 unpadded.
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        all.extend(check_op(
            "conv2d s1 p1",
            vec![x.clone(), w.clone(), b.clone()],
            &mut rng,
            |g, ids| g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap(),
        )?);
        all.extend(check_op(
            "conv2d s2 p0",
            vec![x.clone(), w, b],
            &mut rng,
            |g, ids| g.conv2d(ids[0], ids[1], ids[2], 2, 0).unwrap(),
        )?);

        let off = rand_tensor_off_zero(&mut rng, &[2, 4, 6, 6]);
        all.extend(check_op("relu", vec![off], &mut rng, |g, ids| g.relu(ids[0]))?);

        let x = rand_tensor(&mut rng, &[2, 4, 6, 6], -3.0, 3.0);
        all.extend(check_op("sigmoid", vec![x], &mut rng, |g, ids| {
            g.sigmoid(ids[0])
        })?);

        // batchnorm: fresh running-stat buffers inside the closure keep each
        // FD evaluation independent of the previous one.
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        all.extend(check_op(
            "batchnorm train",
            vec![x.clone(), gamma.clone(), beta.clone()],
            &mut rng,
            |g, ids| {
                let mut rm = vec![0.0; 3];
                let mut rv = vec![1.0; 3];
                g.batchnorm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, 1e-5, 0.1, Mode::Train)
                    .unwrap()
            },
        )?);
        all.extend(check_op(
            "batchnorm eval",
            vec![x, gamma, beta],
            &mut rng,
            |g, ids| {
                let mut rm = vec![0.2, -0.1, 0.05];
                let mut rv = vec![1.3, 0.8, 1.1];
                g.batchnorm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, 1e-5, 0.1, Mode::Eval)
                    .unwrap()
            },
        )?);

        // dropout: a fixed per-check seed reproduces the same mask for every
        // FD evaluation.
        let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        all.extend(check_op("dropout p=0.3", vec![x], &mut rng, |g, ids| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
            g.dropout(ids[0], 0.3, Mode::Train, &mut mask_rng).unwrap()
        })?);

        let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        all.extend(check_op("upsample_nearest2x", vec![x], &mut rng, |g, ids| {
            g.upsample_nearest2x(ids[0]).unwrap()
        })?);

        let x = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        all.extend(check_op("avgpool2x2", vec![x.clone()], &mut rng, |g, ids| {
            g.avgpool2x2(ids[0]).unwrap()
        })?);
        all.extend(check_op("maxpool2x2", vec![x.clone()], &mut rng, |g, ids| {
            g.maxpool2x2(ids[0]).unwrap()
        })?);
        all.extend(check_op("global_avg_pool", vec![x.clone()], &mut rng, |g, ids| {
            g.global_avg_pool(ids[0]).unwrap()
        })?);
        all.extend(check_op("channel_mean", vec![x], &mut rng, |g, ids| {
            g.channel_mean(ids[0]).unwrap()
        })?);

        let x = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        all.extend(check_op("linear", vec![x, w, b], &mut rng, |g, ids| {
            g.linear(ids[0], ids[1], ids[2]).unwrap()
        })?);

        // broadcast_mul across all supported shape pairings.
        let f = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        let cv = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let sm = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
        all.extend(check_op(
            "broadcast_mul [n,c]x[n,c,h,w]",
            vec![cv.clone(), f.clone()],
            &mut rng,
            |g, ids| g.broadcast_mul(ids[0], ids[1]).unwrap(),
        )?);
        all.extend(check_op(
            "broadcast_mul [n,h,w]x[n,c,h,w]",
            vec![sm.clone(), f.clone()],
            &mut rng,
            |g, ids| g.broadcast_mul(ids[0], ids[1]).unwrap(),
        )?);
        all.extend(check_op(
            "broadcast_mul [n,c]x[n,h,w]",
            vec![cv, sm],
            &mut rng,
            |g, ids| g.broadcast_mul(ids[0], ids[1]).unwrap(),
        )?);
        let same = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        all.extend(check_op(
            "broadcast_mul same shape",
            vec![same, f],
            &mut rng,
            |g, ids| g.broadcast_mul(ids[0], ids[1]).unwrap(),
        )?);
        let a = rand_tensor(&mut rng, &[2, 1, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
        all.extend(check_op(
            "broadcast_mul trailing",
            vec![a, b],
            &mut rng,
            |g, ids| g.broadcast_mul(ids[0], ids[1]).unwrap(),
        )?);

        let a = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        all.extend(check_op("add", vec![a, b], &mut rng, |g, ids| {
            g.add(ids[0], ids[1]).unwrap()
        })?);

        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        all.extend(check_op("sum", vec![x], &mut rng, |g, ids| g.sum(ids[0]))?);

        // softmax cross entropy feeds a scalar straight out, no weighting.
        let logits = rand_tensor(&mut rng, &[2, 2, 3, 3], -2.0, 2.0);
        let labels: Vec<u8> = (0..2 * 3 * 3).map(|_| rng.random_range(0..2u8)).collect();
        let target = MaskBatch::new(2, 3, 3, labels).unwrap();
        {
            let forward = |probe: &[Tensor<f64>]| -> f64 {
                let mut g = Graph::new();
                let l = g.leaf(probe[0].clone(), false);
                let loss = g.softmax_cross_entropy(l, &target).unwrap();
                g.value(loss).item()
            };
            let mut g = Graph::new();
            let l = g.leaf(logits.clone(), true);
            let loss = g.softmax_cross_entropy(l, &target).unwrap();
            g.backward(loss)?;
            let analytic = g.grad(l).expect("logits gradient");
            all.push(compare(
                "softmax_cross_entropy[input 0]",
                &forward,
                &[logits],
                0,
                analytic.data(),
                FD_STEP,
            )?);
        }

        Ok(all)
    }
}
