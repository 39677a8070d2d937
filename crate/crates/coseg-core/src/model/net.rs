//! Model parameters: siamese encoder, attention learner, decoder.
//!
//! The encoder and decoder are shared between both inputs of a pair — there
//! is exactly one set of weights, bound once per graph and reused for every
//! image flowing through that graph.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use crate::error::{CosegError, Result};
use crate::tensor::{Element, Graph, NodeId, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ConvParams<E> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct BnParams<E> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
}

impl<E: Element> BnParams<E> {
    fn new(c: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[c], E::one()),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![E::zero(); c],
            running_var: vec![E::one(); c],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<E> {
    pub conv: ConvParams<E>,
    pub bn: BnParams<E>,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock<E> {
    pub conv: ConvParams<E>,
    /// The final block outputs raw logits: no activation, bn or dropout.
    pub bn: Option<BnParams<E>>,
}

/// Channel-attention weights shared by both images, plus the FCA fusion
/// layer when that variant is active.
#[derive(Debug, Clone)]
pub struct AttentionParams<E> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
    pub fuse_w: Option<Tensor<E>>,
    pub fuse_b: Option<Tensor<E>>,
}

#[derive(Debug, Clone)]
pub struct CosegModel<E> {
    pub config: ModelConfig,
    pub encoder: Vec<Vec<EncoderBlock<E>>>,
    pub attention: AttentionParams<E>,
    pub decoder: Vec<DecoderBlock<E>>,
}

fn he_uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    uniform_init(rng, shape, (6.0 / fan_in as f64).sqrt())
}

fn uniform_init<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::of_f64(rng.random_range(-limit..limit)))
}

impl<E: Element> CosegModel<E> {
    /// Fresh model with He-uniform conv/FC weights, zero biases, unit
    /// batchnorm scale. Fully determined by the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.stages());
        let mut cin = 3usize;
        for &cout in &config.stage_channels {
            let mut stage = Vec::with_capacity(config.convs_per_stage);
            for _ in 0..config.convs_per_stage {
                stage.push(EncoderBlock {
                    conv: ConvParams {
                        weight: he_uniform(&mut rng, &[cout, cin, 3, 3], cin * 9),
                        bias: Tensor::zeros(&[cout]),
                    },
                    bn: BnParams::new(cout),
                });
                cin = cout;
            }
            encoder.push(stage);
        }

        let c = config.feature_channels();
        let attention = AttentionParams {
            w: he_uniform(&mut rng, &[c, c], c),
            b: Tensor::zeros(&[c]),
            fuse_w: (config.variant == Variant::Fca)
                .then(|| he_uniform(&mut rng, &[c, c], c)),
            fuse_b: (config.variant == Variant::Fca).then(|| Tensor::zeros(&[c])),
        };

        let mut decoder = Vec::new();
        let widths = config.decoder_widths();
        let last = widths.len() - 1;
        for (i, &(din, dout)) in widths.iter().enumerate() {
            // The logit head starts near zero so initial predictions are
            // near-uniform softmax.
            let limit = if i == last {
                0.1 * (6.0 / (din * 9) as f64).sqrt()
            } else {
                (6.0 / (din * 9) as f64).sqrt()
            };
            decoder.push(DecoderBlock {
                conv: ConvParams {
                    weight: uniform_init(&mut rng, &[dout, din, 3, 3], limit),
                    bias: Tensor::zeros(&[dout]),
                },
                bn: (i != last).then(|| BnParams::new(dout)),
            });
        }

        Ok(CosegModel {
            config,
            encoder,
            attention,
            decoder,
        })
    }

    /// Visits every trainable parameter in a fixed order. This order defines
    /// the graph binding, the optimizer pairing and the checkpoint layout.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<E>)) {
        for (si, stage) in self.encoder.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                f(&format!("enc.s{}.c{}.conv.weight", si, bi), &block.conv.weight);
                f(&format!("enc.s{}.c{}.conv.bias", si, bi), &block.conv.bias);
                f(&format!("enc.s{}.c{}.bn.gamma", si, bi), &block.bn.gamma);
                f(&format!("enc.s{}.c{}.bn.beta", si, bi), &block.bn.beta);
            }
        }
        f("att.w", &self.attention.w);
        f("att.b", &self.attention.b);
        if let (Some(w), Some(b)) = (&self.attention.fuse_w, &self.attention.fuse_b) {
            f("att.fuse_w", w);
            f("att.fuse_b", b);
        }
        for (di, block) in self.decoder.iter().enumerate() {
            f(&format!("dec.b{}.conv.weight", di), &block.conv.weight);
            f(&format!("dec.b{}.conv.bias", di), &block.conv.bias);
            if let Some(bn) = &block.bn {
                f(&format!("dec.b{}.bn.gamma", di), &bn.gamma);
                f(&format!("dec.b{}.bn.beta", di), &bn.beta);
            }
        }
    }

    /// Mutable twin of [`CosegModel::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<E>)) {
        for (si, stage) in self.encoder.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                f(&format!("enc.s{}.c{}.conv.weight", si, bi), &mut block.conv.weight);
                f(&format!("enc.s{}.c{}.conv.bias", si, bi), &mut block.conv.bias);
                f(&format!("enc.s{}.c{}.bn.gamma", si, bi), &mut block.bn.gamma);
                f(&format!("enc.s{}.c{}.bn.beta", si, bi), &mut block.bn.beta);
            }
        }
        f("att.w", &mut self.attention.w);
        f("att.b", &mut self.attention.b);
        if let (Some(w), Some(b)) = (
            self.attention.fuse_w.as_mut(),
            self.attention.fuse_b.as_mut(),
        ) {
            f("att.fuse_w", w);
            f("att.fuse_b", b);
        }
        for (di, block) in self.decoder.iter_mut().enumerate() {
            f(&format!("dec.b{}.conv.weight", di), &mut block.conv.weight);
            f(&format!("dec.b{}.conv.bias", di), &mut block.conv.bias);
            if let Some(bn) = &mut block.bn {
                f(&format!("dec.b{}.bn.gamma", di), &mut bn.gamma);
                f(&format!("dec.b{}.bn.beta", di), &mut bn.beta);
            }
        }
    }

    /// Running batchnorm statistics, named alongside the parameters. Not
    /// trainable, but part of the model state (saved in checkpoints).
    pub fn visit_running_stats(&self, mut f: impl FnMut(&str, &[E])) {
        for (si, stage) in self.encoder.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                f(&format!("enc.s{}.c{}.bn.running_mean", si, bi), &block.bn.running_mean);
                f(&format!("enc.s{}.c{}.bn.running_var", si, bi), &block.bn.running_var);
            }
        }
        for (di, block) in self.decoder.iter().enumerate() {
            if let Some(bn) = &block.bn {
                f(&format!("dec.b{}.bn.running_mean", di), &bn.running_mean);
                f(&format!("dec.b{}.bn.running_var", di), &bn.running_var);
            }
        }
    }

    pub fn visit_running_stats_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<E>)) {
        for (si, stage) in self.encoder.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                f(&format!("enc.s{}.c{}.bn.running_mean", si, bi), &mut block.bn.running_mean);
                f(&format!("enc.s{}.c{}.bn.running_var", si, bi), &mut block.bn.running_var);
            }
        }
        for (di, block) in self.decoder.iter_mut().enumerate() {
            if let Some(bn) = &mut block.bn {
                f(&format!("dec.b{}.bn.running_mean", di), &mut bn.running_mean);
                f(&format!("dec.b{}.bn.running_var", di), &mut bn.running_var);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Replaces a named parameter, shape-checked. Used by checkpoint loading.
    pub fn set_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let mut found = false;
        let mut err = None;
        self.visit_params_mut(|n, t| {
            if n == name {
                found = true;
                if t.shape() != value.shape() {
                    err = Some(CosegError::shape_mismatch(name, t.shape(), value.shape()));
                } else {
                    *t = value.clone();
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !found {
            return Err(CosegError::Checkpoint(format!("no parameter named '{}'", name)));
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> CosegModel<F> {
        CosegModel {
            config: self.config.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|stage| {
                    stage
                        .iter()
                        .map(|b| EncoderBlock {
                            conv: ConvParams {
                                weight: b.conv.weight.cast(),
                                bias: b.conv.bias.cast(),
                            },
                            bn: BnParams {
                                gamma: b.bn.gamma.cast(),
                                beta: b.bn.beta.cast(),
                                running_mean: b.bn.running_mean.iter().map(|v| F::of_f64(v.as_f64())).collect(),
                                running_var: b.bn.running_var.iter().map(|v| F::of_f64(v.as_f64())).collect(),
                            },
                        })
                        .collect()
                })
                .collect(),
            attention: AttentionParams {
                w: self.attention.w.cast(),
                b: self.attention.b.cast(),
                fuse_w: self.attention.fuse_w.as_ref().map(|t| t.cast()),
                fuse_b: self.attention.fuse_b.as_ref().map(|t| t.cast()),
            },
            decoder: self
                .decoder
                .iter()
                .map(|b| DecoderBlock {
                    conv: ConvParams {
                        weight: b.conv.weight.cast(),
                        bias: b.conv.bias.cast(),
                    },
                    bn: b.bn.as_ref().map(|bn| BnParams {
                        gamma: bn.gamma.cast(),
                        beta: bn.beta.cast(),
                        running_mean: bn.running_mean.iter().map(|v| F::of_f64(v.as_f64())).collect(),
                        running_var: bn.running_var.iter().map(|v| F::of_f64(v.as_f64())).collect(),
                    }),
                })
                .collect(),
        }
    }
}

/// Graph leaf ids for one binding of the model's parameters.
pub struct BoundModel {
    pub encoder: Vec<Vec<BoundBlock>>,
    pub att_w: NodeId,
    pub att_b: NodeId,
    pub fuse_w: Option<NodeId>,
    pub fuse_b: Option<NodeId>,
    pub decoder: Vec<BoundBlock>,
    /// (name, node) pairs in [`CosegModel::visit_params`] order.
    pub params: Vec<(String, NodeId)>,
}

#[derive(Clone, Copy)]
pub struct BoundBlock {
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub bn_gamma: Option<NodeId>,
    pub bn_beta: Option<NodeId>,
}

impl<E: Element> CosegModel<E> {
    /// Registers every parameter as a graph leaf. `trainable` leaves collect
    /// gradients on backward.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> BoundModel {
        let mut params = Vec::new();
        let mut add = |g: &mut Graph<E>, name: String, t: &Tensor<E>| {
            let id = g.leaf(t.clone(), trainable);
            params.push((name, id));
            id
        };
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (si, stage) in self.encoder.iter().enumerate() {
            let mut bound_stage = Vec::with_capacity(stage.len());
            for (bi, block) in stage.iter().enumerate() {
                let conv_w = add(g, format!("enc.s{}.c{}.conv.weight", si, bi), &block.conv.weight);
                let conv_b = add(g, format!("enc.s{}.c{}.conv.bias", si, bi), &block.conv.bias);
                let gamma = add(g, format!("enc.s{}.c{}.bn.gamma", si, bi), &block.bn.gamma);
                let beta = add(g, format!("enc.s{}.c{}.bn.beta", si, bi), &block.bn.beta);
                bound_stage.push(BoundBlock {
                    conv_w,
                    conv_b,
                    bn_gamma: Some(gamma),
                    bn_beta: Some(beta),
                });
            }
            encoder.push(bound_stage);
        }
        let att_w = add(g, "att.w".to_string(), &self.attention.w);
        let att_b = add(g, "att.b".to_string(), &self.attention.b);
        let fuse_w = self
            .attention
            .fuse_w
            .as_ref()
            .map(|t| add(g, "att.fuse_w".to_string(), t));
        let fuse_b = self
            .attention
            .fuse_b
            .as_ref()
            .map(|t| add(g, "att.fuse_b".to_string(), t));
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (di, block) in self.decoder.iter().enumerate() {
            let conv_w = add(g, format!("dec.b{}.conv.weight", di), &block.conv.weight);
            let conv_b = add(g, format!("dec.b{}.conv.bias", di), &block.conv.bias);
            let (bn_gamma, bn_beta) = match &block.bn {
                Some(bn) => (
                    Some(add(g, format!("dec.b{}.bn.gamma", di), &bn.gamma)),
                    Some(add(g, format!("dec.b{}.bn.beta", di), &bn.beta)),
                ),
                None => (None, None),
            };
            decoder.push(BoundBlock {
                conv_w,
                conv_b,
                bn_gamma,
                bn_beta,
            });
        }
        BoundModel {
            encoder,
            att_w,
            att_b,
            fuse_w,
            fuse_b,
            decoder,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn init_is_seed_deterministic() {
        let a = CosegModel::<f64>::init(ModelConfig::default(), 3).unwrap();
        let b = CosegModel::<f64>::init(ModelConfig::default(), 3).unwrap();
        let c = CosegModel::<f64>::init(ModelConfig::default(), 4).unwrap();
        assert!(a.attention.w.bit_eq(&b.attention.w));
        assert!(!a.attention.w.bit_eq(&c.attention.w));
    }

    #[test]
    fn visit_and_bind_enumerate_identically() {
        let model = CosegModel::<f64>::init(ModelConfig::desk(Variant::Fca), 1).unwrap();
        let mut names = Vec::new();
        model.visit_params(|n, _| names.push(n.to_string()));
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let bound_names: Vec<String> = bound.params.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, bound_names);
    }

    #[test]
    fn fca_gets_fusion_parameters_others_do_not() {
        let fca = CosegModel::<f64>::init(ModelConfig::desk(Variant::Fca), 1).unwrap();
        let ca = CosegModel::<f64>::init(ModelConfig::desk(Variant::Ca), 1).unwrap();
        assert!(fca.attention.fuse_w.is_some());
        assert!(ca.attention.fuse_w.is_none());
    }

    #[test]
    fn attention_weight_is_square_in_feature_channels() {
        let model = CosegModel::<f64>::init(ModelConfig::default(), 1).unwrap();
        let c = model.config.feature_channels();
        assert_eq!(model.attention.w.shape(), &[c, c]);
        assert_eq!(model.attention.b.shape(), &[c]);
    }

    #[test]
    fn full_scale_model_is_constructible() {
        let model = CosegModel::<f32>::init(ModelConfig::full_scale(Variant::Ca), 1).unwrap();
        assert_eq!(model.config.feature_channels(), 512);
        assert_eq!(model.config.feature_extent(), 16);
        assert!(model.param_count() > 10_000_000);
    }
}
