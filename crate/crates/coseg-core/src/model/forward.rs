//! Graph-level forward passes: encoder, the three attention learners,
//! decoder, and the full pair forward.

use rand_chacha::ChaCha8Rng;

use super::net::{BoundModel, CosegModel, BN_EPS, BN_MOMENTUM};
use crate::data::Mask;
use crate::error::{CosegError, Result};
use crate::model::config::{Pooling, Variant};
use crate::tensor::{Element, Graph, Mode, NodeId, Tensor};

/// Stages of conv/bn/relu followed by 2x2 downsampling. Output is the
/// non-negative feature map the attention learners act on.
pub fn encode<E: Element>(
    g: &mut Graph<E>,
    model: &mut CosegModel<E>,
    bound: &BoundModel,
    image: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let s = model.config.input_size;
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(CosegError::invalid(
            "encode",
            format!(
                "expected [n,3,{},{}] input, got {}",
                s,
                s,
                crate::error::format_dims(&shape)
            ),
        ));
    }
    let pooling = model.config.pooling;
    let mut x = image;
    for (stage, bound_stage) in model.encoder.iter_mut().zip(&bound.encoder) {
        for (block, bb) in stage.iter_mut().zip(bound_stage) {
            x = g.conv2d(x, bb.conv_w, bb.conv_b, 1, 1)?;
            x = g.batchnorm2d(
                x,
                bb.bn_gamma.expect("encoder blocks always carry bn"),
                bb.bn_beta.expect("encoder blocks always carry bn"),
                &mut block.bn.running_mean,
                &mut block.bn.running_var,
                BN_EPS,
                BN_MOMENTUM,
                mode,
            )?;
            x = g.relu(x);
        }
        x = match pooling {
            Pooling::Avg => g.avgpool2x2(x)?,
            Pooling::Max => g.maxpool2x2(x)?,
        };
    }
    Ok(x)
}

/// Channel attention: sigmoid of an affine map of the globally pooled
/// feature. Both images go through the same weights.
pub fn channel_attention<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundModel,
    feature: NodeId,
) -> Result<NodeId> {
    let pooled = g.global_avg_pool(feature)?;
    let pre = g.linear(pooled, bound.att_w, bound.att_b)?;
    Ok(g.sigmoid(pre))
}

/// Spatial attention: sigmoid of the channel mean at each location. No
/// learnable parameters.
pub fn spatial_attention<E: Element>(g: &mut Graph<E>, feature: NodeId) -> Result<NodeId> {
    let mean = g.channel_mean(feature)?;
    Ok(g.sigmoid(mean))
}

/// Fuses two channel attentions into one shared selector: sigmoid of an
/// affine map of their sum. Symmetric in its arguments.
pub fn fuse_attention<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundModel,
    alpha_a: NodeId,
    alpha_b: NodeId,
) -> Result<NodeId> {
    let (fw, fb) = match (bound.fuse_w, bound.fuse_b) {
        (Some(w), Some(b)) => (w, b),
        _ => {
            return Err(CosegError::invalid(
                "fuse_attention",
                "model has no fusion layer (not an fca variant)",
            ))
        }
    };
    let sum = g.add(alpha_a, alpha_b)?;
    let pre = g.linear(sum, fw, fb)?;
    Ok(g.sigmoid(pre))
}

/// Attention tensors produced while attending a pair.
pub struct AttendedPair {
    pub fa: NodeId,
    pub fb: NodeId,
    pub alpha_a: NodeId,
    pub alpha_b: NodeId,
    pub fused: Option<NodeId>,
    pub spatial_a: Option<NodeId>,
    pub spatial_b: Option<NodeId>,
}

/// Cross application: each feature map is scaled by the *other* image's
/// channel attention.
pub fn apply_ca<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundModel,
    fa: NodeId,
    fb: NodeId,
) -> Result<AttendedPair> {
    check_same_shape(g, "apply_ca", fa, fb)?;
    let alpha_a = channel_attention(g, bound, fa)?;
    let alpha_b = channel_attention(g, bound, fb)?;
    let fa2 = g.broadcast_mul(alpha_b, fa)?;
    let fb2 = g.broadcast_mul(alpha_a, fb)?;
    Ok(AttendedPair {
        fa: fa2,
        fb: fb2,
        alpha_a,
        alpha_b,
        fused: None,
        spatial_a: None,
        spatial_b: None,
    })
}

/// Fused application: one shared selector multiplies both feature maps.
pub fn apply_fca<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundModel,
    fa: NodeId,
    fb: NodeId,
) -> Result<AttendedPair> {
    check_same_shape(g, "apply_fca", fa, fb)?;
    let alpha_a = channel_attention(g, bound, fa)?;
    let alpha_b = channel_attention(g, bound, fb)?;
    let fused = fuse_attention(g, bound, alpha_a, alpha_b)?;
    let fa2 = g.broadcast_mul(fused, fa)?;
    let fb2 = g.broadcast_mul(fused, fb)?;
    Ok(AttendedPair {
        fa: fa2,
        fb: fb2,
        alpha_a,
        alpha_b,
        fused: Some(fused),
        spatial_a: None,
        spatial_b: None,
    })
}

/// Channel-spatial application: the other image's channel attention combined
/// with the image's own spatial attention.
pub fn apply_csa<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundModel,
    fa: NodeId,
    fb: NodeId,
) -> Result<AttendedPair> {
    check_same_shape(g, "apply_csa", fa, fb)?;
    let alpha_a = channel_attention(g, bound, fa)?;
    let alpha_b = channel_attention(g, bound, fb)?;
    let spatial_a = spatial_attention(g, fa)?;
    let spatial_b = spatial_attention(g, fb)?;
    let weight_a = g.broadcast_mul(alpha_b, spatial_a)?;
    let weight_b = g.broadcast_mul(alpha_a, spatial_b)?;
    let fa2 = g.broadcast_mul(weight_a, fa)?;
    let fb2 = g.broadcast_mul(weight_b, fb)?;
    Ok(AttendedPair {
        fa: fa2,
        fb: fb2,
        alpha_a,
        alpha_b,
        fused: None,
        spatial_a: Some(spatial_a),
        spatial_b: Some(spatial_b),
    })
}

fn check_same_shape<E: Element>(
    g: &Graph<E>,
    op: &str,
    a: NodeId,
    b: NodeId,
) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(CosegError::shape_mismatch(
            op,
            g.value(a).shape(),
            g.value(b).shape(),
        ));
    }
    Ok(())
}

/// Upsample/conv chain back to input resolution; the final conv emits the two
/// mask logit channels with no activation.
pub fn decode<E: Element>(
    g: &mut Graph<E>,
    model: &mut CosegModel<E>,
    bound: &BoundModel,
    feature: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let stages = model.config.stages();
    let extent = g.value(feature).shape()[2];
    if extent << stages != model.config.input_size {
        return Err(CosegError::invalid(
            "decode",
            format!(
                "feature extent {} does not upsample to input size {} in {} stages",
                extent, model.config.input_size, stages
            ),
        ));
    }
    let dropout = model.config.dropout;
    let mut x = feature;
    let last = model.decoder.len() - 1;
    for (i, (block, bb)) in model.decoder.iter_mut().zip(&bound.decoder).enumerate() {
        x = g.upsample_nearest2x(x)?;
        x = g.conv2d(x, bb.conv_w, bb.conv_b, 1, 1)?;
        if i == last {
            break;
        }
        x = g.relu(x);
        let bn = block.bn.as_mut().expect("non-final blocks carry bn");
        x = g.batchnorm2d(
            x,
            bb.bn_gamma.expect("non-final blocks carry bn"),
            bb.bn_beta.expect("non-final blocks carry bn"),
            &mut bn.running_mean,
            &mut bn.running_var,
            BN_EPS,
            BN_MOMENTUM,
            mode,
        )?;
        x = g.dropout(x, dropout, mode, rng)?;
    }
    Ok(x)
}

/// Everything a pair forward produces.
pub struct PairOutput {
    pub logits_a: NodeId,
    pub logits_b: NodeId,
    pub alpha_a: NodeId,
    pub alpha_b: NodeId,
    pub fused: Option<NodeId>,
    pub spatial_a: Option<NodeId>,
    pub spatial_b: Option<NodeId>,
}

/// Encode both images, attend per the configured variant, decode both. The
/// decoder sees only the attended features; the raw encoder output is never
/// concatenated back in.
pub fn forward_pair<E: Element>(
    g: &mut Graph<E>,
    model: &mut CosegModel<E>,
    bound: &BoundModel,
    image_a: NodeId,
    image_b: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<PairOutput> {
    let fa = encode(g, model, bound, image_a, mode)?;
    let fb = encode(g, model, bound, image_b, mode)?;
    let attended = match model.config.variant {
        Variant::Ca => apply_ca(g, bound, fa, fb)?,
        Variant::Fca => apply_fca(g, bound, fa, fb)?,
        Variant::Csa => apply_csa(g, bound, fa, fb)?,
    };
    let logits_a = decode(g, model, bound, attended.fa, mode, rng)?;
    let logits_b = decode(g, model, bound, attended.fb, mode, rng)?;
    Ok(PairOutput {
        logits_a,
        logits_b,
        alpha_a: attended.alpha_a,
        alpha_b: attended.alpha_b,
        fused: attended.fused,
        spatial_a: attended.spatial_a,
        spatial_b: attended.spatial_b,
    })
}

/// Argmax over the two logit channels, per pixel: foreground wins only on a
/// strictly larger logit.
pub fn logits_to_masks<E: Element>(logits: &Tensor<E>) -> Vec<Mask> {
    let shape = logits.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let hw = h * w;
    let data = logits.data();
    (0..n)
        .map(|ni| {
            let bg = &data[ni * 2 * hw..ni * 2 * hw + hw];
            let fg = &data[ni * 2 * hw + hw..ni * 2 * hw + 2 * hw];
            Mask {
                w,
                h,
                data: fg
                    .iter()
                    .zip(bg)
                    .map(|(&f, &b)| u8::from(f > b))
                    .collect(),
            }
        })
        .collect()
}
