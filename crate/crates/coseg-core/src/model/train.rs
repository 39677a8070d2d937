//! Training loop, evaluation and prediction drivers.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_pair, logits_to_masks};
use super::net::CosegModel;
use crate::data::{batch_images, batch_masks, metrics, Mask, SamplePair};
use crate::error::Result;
use crate::tensor::adam::{Adam, AdamHyper};
use crate::tensor::{Element, Graph, MaskBatch, Mode, Tensor};

/// One training batch: image stacks plus their targets.
pub struct PairBatch<E> {
    pub img_a: Tensor<E>,
    pub img_b: Tensor<E>,
    pub mask_a: MaskBatch,
    pub mask_b: MaskBatch,
}

impl<E: Element> PairBatch<E> {
    pub fn from_pairs(pairs: &[&SamplePair]) -> Result<Self> {
        let imgs_a: Vec<_> = pairs.iter().map(|p| &p.image_a).collect();
        let imgs_b: Vec<_> = pairs.iter().map(|p| &p.image_b).collect();
        let masks_a: Vec<_> = pairs.iter().map(|p| &p.mask_a).collect();
        let masks_b: Vec<_> = pairs.iter().map(|p| &p.mask_b).collect();
        Ok(PairBatch {
            img_a: batch_images(&imgs_a)?,
            img_b: batch_images(&imgs_b)?,
            mask_a: batch_masks(&masks_a)?,
            mask_b: batch_masks(&masks_b)?,
        })
    }
}

/// One optimization step: forward the pair batch, sum the two cross-entropy
/// terms, backpropagate, and apply Adam to every parameter jointly.
pub fn train_step<E: Element>(
    model: &mut CosegModel<E>,
    opt: &mut Adam<E>,
    batch: &PairBatch<E>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let ia = g.leaf(batch.img_a.clone(), false);
    let ib = g.leaf(batch.img_b.clone(), false);
    let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Train, rng)?;
    let loss_a = g.softmax_cross_entropy(out.logits_a, &batch.mask_a)?;
    let loss_b = g.softmax_cross_entropy(out.logits_b, &batch.mask_b)?;
    let loss = g.add(loss_a, loss_b)?;
    g.backward(loss)?;

    let grads: HashMap<String, Tensor<E>> = bound
        .params
        .iter()
        .filter_map(|(name, id)| g.grad(*id).map(|t| (name.clone(), t)))
        .collect();
    opt.begin_step();
    let mut update_err = None;
    model.visit_params_mut(|name, param| {
        if update_err.is_some() {
            return;
        }
        if let Some(grad) = grads.get(name) {
            if let Err(e) = opt.update(name, param, grad) {
                update_err = Some(e);
            }
        }
    });
    if let Some(e) = update_err {
        return Err(e);
    }
    Ok(g.value(loss).item().as_f64())
}

/// Pair loss without any parameter update (eval-mode forward).
pub fn pair_loss_eval<E: Element>(
    model: &mut CosegModel<E>,
    batch: &PairBatch<E>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout inactive in eval
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(batch.img_a.clone(), false);
    let ib = g.leaf(batch.img_b.clone(), false);
    let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Eval, &mut rng)?;
    let loss_a = g.softmax_cross_entropy(out.logits_a, &batch.mask_a)?;
    let loss_b = g.softmax_cross_entropy(out.logits_b, &batch.mask_b)?;
    let loss = g.add(loss_a, loss_b)?;
    Ok(g.value(loss).item().as_f64())
}

/// Eval-mode masks for a batch of pairs: (masks for the A side, B side).
pub fn predict_pairs<E: Element>(
    model: &mut CosegModel<E>,
    pairs: &[&SamplePair],
) -> Result<(Vec<Mask>, Vec<Mask>)> {
    let batch = PairBatch::<E>::from_pairs(pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ia = g.leaf(batch.img_a, false);
    let ib = g.leaf(batch.img_b, false);
    let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Eval, &mut rng)?;
    Ok((
        logits_to_masks(g.value(out.logits_a)),
        logits_to_masks(g.value(out.logits_b)),
    ))
}

/// Per-class evaluation over a pair list. Every pair contributes both of its
/// masks.
pub fn evaluate<E: Element>(
    model: &mut CosegModel<E>,
    pairs: &[SamplePair],
    batch_pairs: usize,
) -> Result<Vec<metrics::MetricRow>> {
    let mut per_class: HashMap<String, (usize, f64, f64)> = HashMap::new();
    for chunk in pairs.chunks(batch_pairs.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (masks_a, masks_b) = predict_pairs(model, &refs)?;
        for (i, pair) in chunk.iter().enumerate() {
            let jac = (metrics::jaccard(&masks_a[i], &pair.mask_a)?
                + metrics::jaccard(&masks_b[i], &pair.mask_b)?)
                / 2.0;
            let pre = (metrics::precision_pixel(&masks_a[i], &pair.mask_a)?
                + metrics::precision_pixel(&masks_b[i], &pair.mask_b)?)
                / 2.0;
            let entry = per_class
                .entry(pair.class.name().to_string())
                .or_insert((0, 0.0, 0.0));
            entry.0 += 1;
            entry.1 += jac;
            entry.2 += pre;
        }
    }
    let mut rows: Vec<metrics::MetricRow> = per_class
        .into_iter()
        .map(|(label, (n, jac, pre))| metrics::MetricRow {
            label,
            pairs: n,
            jaccard: jac / n as f64,
            precision: pre / n as f64,
        })
        .collect();
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(rows)
}

/// Mean jaccard over rows, weighted per class (rows already hold class means).
pub fn mean_jaccard(rows: &[metrics::MetricRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.jaccard).sum::<f64>() / rows.len() as f64
}

/// Recomputes batchnorm running statistics with dropout disabled.
///
/// Train-mode dropout scales survivors by 1/(1-p), so running stats gathered
/// during training describe a different activation distribution than the one
/// eval mode sees. A few dropout-free forward passes re-estimate the stats
/// the eval path actually needs.
pub fn refresh_batchnorm_stats<E: Element>(
    model: &mut CosegModel<E>,
    pairs: &[SamplePair],
    max_batches: usize,
    batch_pairs: usize,
) -> Result<()> {
    let saved_dropout = model.config.dropout;
    model.config.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in pairs.chunks(batch_pairs.max(1)).take(max_batches) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let batch = PairBatch::<E>::from_pairs(&refs)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ia = g.leaf(batch.img_a, false);
        let ib = g.leaf(batch.img_b, false);
        let result = forward_pair(&mut g, model, &bound, ia, ib, Mode::Train, &mut rng);
        model.config.dropout = saved_dropout;
        result?;
        model.config.dropout = 0.0;
    }
    model.config.dropout = saved_dropout;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once validation jaccard reaches this (checked after each epoch).
    pub target_val_jaccard: Option<f64>,
    /// Write per-epoch progress lines to stderr.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_pairs: 4,
            lr: 1e-3,
            seed: 0,
            target_val_jaccard: Some(0.9),
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_train_loss: f64,
    pub val_jaccard: f64,
    pub duration: Duration,
}

/// Epoch loop with shuffling and early stopping on validation jaccard.
pub fn train<E: Element>(
    model: &mut CosegModel<E>,
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut opt = Adam::new(AdamHyper {
        lr: opts.lr,
        ..AdamHyper::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut last_loss = f64::NAN;
    let mut val_jaccard = 0.0;
    let mut epochs_run = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_pairs.max(1)) {
            let refs: Vec<&SamplePair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let batch = PairBatch::<E>::from_pairs(&refs)?;
            epoch_loss += train_step(model, &mut opt, &batch, &mut rng)?;
            batches += 1;
        }
        last_loss = epoch_loss / batches.max(1) as f64;
        epochs_run = epoch + 1;
        refresh_batchnorm_stats(model, train_pairs, 12, opts.batch_pairs)?;
        if !val_pairs.is_empty() {
            let rows = evaluate(model, val_pairs, opts.batch_pairs)?;
            val_jaccard = mean_jaccard(&rows);
        }
        if opts.verbose {
            eprintln!(
                "epoch {:>3}: train loss {:.4}, val jaccard {:.4} ({:.1}s)",
                epochs_run,
                last_loss,
                val_jaccard,
                start.elapsed().as_secs_f64()
            );
        }
        if let Some(target) = opts.target_val_jaccard {
            if !val_pairs.is_empty() && val_jaccard >= target {
                break;
            }
        }
    }
    Ok(TrainReport {
        epochs_run,
        steps: opt.step_count(),
        final_train_loss: last_loss,
        val_jaccard,
        duration: start.elapsed(),
    })
}
