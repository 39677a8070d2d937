//! Instant group co-segmentation and the quadratic pairwise baseline.
//!
//! Instant mode runs in linear time: one attention vector per image, one
//! channelwise reduction (average or minimum), then one segmentation pass per
//! image. The pairwise baseline runs every unordered pair through the full
//! pair forward and majority-votes the per-pair masks.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Mask;
use crate::error::{CosegError, Result};
use crate::model::{
    channel_attention, decode, encode, forward_pair, logits_to_masks, spatial_attention,
    CosegModel, Variant,
};
use crate::tensor::{Element, Graph, Mode, Tensor};

/// Channelwise reduction applied to the per-image attention vectors.
/// Average finds the most common object; minimum keeps only channels active
/// in every image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    Average,
    Minimum,
}

impl GroupMode {
    pub fn name(self) -> &'static str {
        match self {
            GroupMode::Average => "average",
            GroupMode::Minimum => "minimum",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(GroupMode::Average),
            "minimum" => Ok(GroupMode::Minimum),
            other => Err(CosegError::Config(format!(
                "unknown group mode '{}', expected average|minimum",
                other
            ))),
        }
    }
}

/// Reduced group attention plus its provenance.
#[derive(Debug, Clone)]
pub struct GroupAttention {
    pub values: Vec<f64>,
    pub mode: GroupMode,
    pub sources: usize,
}

/// How many times each network stage ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounters {
    pub encoder: usize,
    pub attention: usize,
    pub decoder: usize,
    pub reductions: usize,
}

/// Output of a group run: per-image masks, per-image attention vectors (for
/// export), stage counters and wall-clock time.
#[derive(Debug, Clone)]
pub struct GroupResult {
    pub masks: Vec<Mask>,
    pub attentions: Vec<Vec<f64>>,
    pub counters: CallCounters,
    pub wall: Duration,
}

fn as_batch1<E: Element>(image: &Tensor<E>) -> Result<Tensor<E>> {
    match image.shape() {
        [c, h, w] => image.reshape(vec![1, *c, *h, *w]),
        [1, _, _, _] => Ok(image.clone()),
        other => Err(CosegError::invalid(
            "group",
            format!(
                "expected a [3,h,w] image, got {}",
                crate::error::format_dims(other)
            ),
        )),
    }
}

/// Channel attention of one image, through the exact code path the pair
/// forward uses (encode then the shared attention layer). Also returns the
/// feature map so segmentation can reuse it.
pub fn generate_attention<E: Element>(
    model: &mut CosegModel<E>,
    image: &Tensor<E>,
    counters: &mut CallCounters,
) -> Result<(Vec<E>, Tensor<E>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let img = g.leaf(as_batch1(image)?, false);
    let f = encode(&mut g, model, &bound, img, Mode::Eval)?;
    counters.encoder += 1;
    let alpha = channel_attention(&mut g, &bound, f)?;
    counters.attention += 1;
    Ok((g.value(alpha).data().to_vec(), g.value(f).clone()))
}

/// Channelwise mean or minimum of the attention vectors.
pub fn reduce_attentions<E: Element>(
    alphas: &[Vec<E>],
    mode: GroupMode,
) -> Result<GroupAttention> {
    if alphas.is_empty() {
        return Err(CosegError::invalid(
            "reduce_attentions",
            "empty attention list",
        ));
    }
    let c = alphas[0].len();
    if let Some(bad) = alphas.iter().find(|a| a.len() != c) {
        return Err(CosegError::shape_mismatch(
            "reduce_attentions",
            &[c],
            &[bad.len()],
        ));
    }
    let values = match mode {
        GroupMode::Average => {
            let n = alphas.len() as f64;
            (0..c)
                .map(|i| alphas.iter().map(|a| a[i].as_f64()).sum::<f64>() / n)
                .collect()
        }
        GroupMode::Minimum => (0..c)
            .map(|i| {
                alphas
                    .iter()
                    .map(|a| a[i].as_f64())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect(),
    };
    Ok(GroupAttention {
        values,
        mode,
        sources: alphas.len(),
    })
}

/// Segments one image under a fixed group attention: scale the feature by
/// the selector (for CSA, additionally by the image's own spatial attention)
/// and decode. With a cached feature the encoder is skipped.
pub fn segment_with_attention<E: Element>(
    model: &mut CosegModel<E>,
    image: &Tensor<E>,
    cached_feature: Option<&Tensor<E>>,
    group: &GroupAttention,
    counters: &mut CallCounters,
) -> Result<Mask> {
    if group.values.len() != model.config.feature_channels() {
        return Err(CosegError::shape_mismatch(
            "segment_with_attention",
            &[model.config.feature_channels()],
            &[group.values.len()],
        ));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let f = match cached_feature {
        Some(f) => g.leaf(f.clone(), false),
        None => {
            let img = g.leaf(as_batch1(image)?, false);
            let f = encode(&mut g, model, &bound, img, Mode::Eval)?;
            counters.encoder += 1;
            f
        }
    };
    let alpha = g.leaf(
        Tensor::from_parts(
            vec![1, group.values.len()],
            group.values.iter().map(|&v| E::of_f64(v)).collect(),
        ),
        false,
    );
    let attended = if model.config.variant == Variant::Csa {
        let spatial = spatial_attention(&mut g, f)?;
        let weight = g.broadcast_mul(alpha, spatial)?;
        g.broadcast_mul(weight, f)?
    } else {
        g.broadcast_mul(alpha, f)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout inactive in eval
    let logits = decode(&mut g, model, &bound, attended, Mode::Eval, &mut rng)?;
    counters.decoder += 1;
    Ok(logits_to_masks(g.value(logits)).remove(0))
}

/// Linear-time group co-segmentation: N attention passes, one reduction, N
/// segmentation passes. With `cache_features` (the default elsewhere) each
/// image is encoded exactly once.
pub fn instant_group_coseg<E: Element>(
    model: &mut CosegModel<E>,
    images: &[Tensor<E>],
    mode: GroupMode,
    cache_features: bool,
) -> Result<GroupResult> {
    if images.is_empty() {
        return Err(CosegError::invalid("instant_group_coseg", "empty group"));
    }
    let start = Instant::now();
    let mut counters = CallCounters::default();
    let mut alphas = Vec::with_capacity(images.len());
    let mut features = Vec::with_capacity(images.len());
    for image in images {
        let (alpha, feature) = generate_attention(model, image, &mut counters)?;
        alphas.push(alpha);
        if cache_features {
            features.push(feature);
        }
    }
    let group = reduce_attentions(&alphas, mode)?;
    counters.reductions += 1;
    let mut masks = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let cached = cache_features.then(|| &features[i]);
        masks.push(segment_with_attention(
            model,
            image,
            cached,
            &group,
            &mut counters,
        )?);
    }
    Ok(GroupResult {
        masks,
        attentions: alphas
            .iter()
            .map(|a| a.iter().map(|v| v.as_f64()).collect())
            .collect(),
        counters,
        wall: start.elapsed(),
    })
}

/// Quadratic baseline: every unordered pair through the full pair forward,
/// then a per-pixel majority vote over each image's N-1 masks (ties go to
/// foreground).
pub fn pairwise_group_coseg<E: Element>(
    model: &mut CosegModel<E>,
    images: &[Tensor<E>],
) -> Result<GroupResult> {
    let n = images.len();
    if n < 2 {
        return Err(CosegError::invalid(
            "pairwise_group_coseg",
            "need at least 2 images",
        ));
    }
    let start = Instant::now();
    let mut counters = CallCounters::default();
    let mut attentions: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut votes: Vec<Vec<u32>> = Vec::with_capacity(n);
    let mut vote_counts = vec![0u32; n];
    let shape = as_batch1(&images[0])?.shape().to_vec();
    let hw = shape[2] * shape[3];
    votes.resize_with(n, || vec![0u32; hw]);

    for i in 0..n {
        for j in i + 1..n {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ia = g.leaf(as_batch1(&images[i])?, false);
            let ib = g.leaf(as_batch1(&images[j])?, false);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward_pair(&mut g, model, &bound, ia, ib, Mode::Eval, &mut rng)?;
            counters.encoder += 2;
            counters.attention += 2;
            counters.decoder += 2;
            let mask_i = logits_to_masks(g.value(out.logits_a)).remove(0);
            let mask_j = logits_to_masks(g.value(out.logits_b)).remove(0);
            for (v, &m) in votes[i].iter_mut().zip(&mask_i.data) {
                *v += u32::from(m != 0);
            }
            for (v, &m) in votes[j].iter_mut().zip(&mask_j.data) {
                *v += u32::from(m != 0);
            }
            vote_counts[i] += 1;
            vote_counts[j] += 1;
            if attentions[i].is_none() {
                attentions[i] =
                    Some(g.value(out.alpha_a).data().iter().map(|v| v.as_f64()).collect());
            }
            if attentions[j].is_none() {
                attentions[j] =
                    Some(g.value(out.alpha_b).data().iter().map(|v| v.as_f64()).collect());
            }
        }
    }
    let (h, w) = (shape[2], shape[3]);
    let masks = votes
        .iter()
        .zip(&vote_counts)
        .map(|(v, &total)| Mask {
            w,
            h,
            data: v.iter().map(|&fg| u8::from(2 * fg >= total)).collect(),
        })
        .collect();
    Ok(GroupResult {
        masks,
        attentions: attentions.into_iter().map(|a| a.expect("every image paired")).collect(),
        counters,
        wall: start.elapsed(),
    })
}

/// One attention vector per line: label, then comma-separated values.
pub fn format_attention_export(labels: &[String], attentions: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for (label, alpha) in labels.iter().zip(attentions) {
        out.push_str(label);
        for v in alpha {
            out.push_str(&format!(",{:.6}", v));
        }
        out.push('\n');
    }
    out
}

/// One benchmark measurement.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub mode: &'static str,
    pub encoder: usize,
    pub attention: usize,
    pub decoder: usize,
    pub wall_ms: f64,
}

/// Runs instant (average) and pairwise over the first `n` images for each
/// requested group size.
pub fn benchmark<E: Element>(
    model: &mut CosegModel<E>,
    images: &[Tensor<E>],
    sizes: &[usize],
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        if n > images.len() {
            return Err(CosegError::invalid(
                "benchmark",
                format!("requested group of {} but only {} images", n, images.len()),
            ));
        }
        let subset = &images[..n];
        let instant = instant_group_coseg(model, subset, GroupMode::Average, true)?;
        rows.push(BenchRow {
            n,
            mode: "instant",
            encoder: instant.counters.encoder,
            attention: instant.counters.attention,
            decoder: instant.counters.decoder,
            wall_ms: instant.wall.as_secs_f64() * 1e3,
        });
        if n >= 2 {
            let pairwise = pairwise_group_coseg(model, subset)?;
            rows.push(BenchRow {
                n,
                mode: "pairwise",
                encoder: pairwise.counters.encoder,
                attention: pairwise.counters.attention,
                decoder: pairwise.counters.decoder,
                wall_ms: pairwise.wall.as_secs_f64() * 1e3,
            });
        }
    }
    Ok(rows)
}

/// Tab-separated benchmark report.
pub fn format_bench_report(rows: &[BenchRow]) -> String {
    let mut out = String::from("n\tmode\tencoder_calls\tattention_calls\tdecoder_calls\twall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.2}\n",
            r.n, r.mode, r.encoder, r.attention, r.decoder, r.wall_ms
        ));
    }
    out
}
