//! Eagerly-executed reverse-mode differentiation graph.
//!
//! Each operation runs immediately and is recorded as an entry holding its
//! inputs, output and whatever forward context its derivative rule needs
//! (dropout mask, batch statistics, ...). A graph is built and differentiated
//! by one execution context; build a fresh graph per forward pass.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Element, MaskBatch, Tensor};
use crate::error::{format_dims, CosegError, Result};

/// Handle to a node inside one [`Graph`]. Only valid for the graph that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Train mode uses batch statistics and active dropout; eval mode is fully
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Node<E> {
    value: Tensor<E>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<E>>,
}

enum OpCtx<E> {
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Relu,
    Sigmoid,
    BatchNorm {
        mode: Mode,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    Dropout {
        keep: Option<Arc<Vec<bool>>>,
        p: f64,
    },
    UpsampleNearest2x,
    AvgPool2x2,
    MaxPool2x2 {
        argmax: Vec<u8>,
    },
    GlobalAvgPool,
    ChannelMean,
    Linear,
    MulBroadcast {
        out_shape: Vec<usize>,
        pa: Vec<usize>,
        pb: Vec<usize>,
    },
    Add,
    Sum,
    SoftmaxCrossEntropy {
        target: MaskBatch,
        probs: Vec<E>,
    },
}

struct Entry<E> {
    inputs: Vec<NodeId>,
    output: NodeId,
    ctx: OpCtx<E>,
}

/// Topologically ordered record of executed operations plus the tensors they
/// produced.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    entries: Vec<Entry<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            entries: Vec::new(),
        }
    }

    /// Registers an input tensor. Leaves with `requires_grad` accumulate
    /// gradients across [`Graph::backward`] calls.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push_node(value, requires_grad, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if any backward pass has reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<E>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self, id: NodeId) {
        self.nodes[id.0].grad = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, value: Tensor<E>, requires_grad: bool, is_leaf: bool) -> NodeId {
        #[cfg(debug_assertions)]
        debug_assert!(
            value.all_finite(),
            "non-finite values entered the graph at node {}",
            self.nodes.len()
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf,
            grad: None,
        });
        id
    }

    fn record(&mut self, inputs: Vec<NodeId>, value: Tensor<E>, ctx: OpCtx<E>) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let output = self.push_node(value, requires_grad, false);
        self.entries.push(Entry {
            inputs,
            output,
            ctx,
        });
        output
    }

    fn check_node(&self, op: &str, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(CosegError::invalid(
                op,
                format!("node {} is not part of this graph", id.0),
            ));
        }
        Ok(())
    }

    fn dims4(&self, op: &str, id: NodeId) -> Result<[usize; 4]> {
        let s = self.nodes[id.0].value.shape();
        match s {
            [n, c, h, w] => Ok([*n, *c, *h, *w]),
            _ => Err(CosegError::invalid(
                op,
                format!("expected a 4-d tensor, got {}", format_dims(s)),
            )),
        }
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    /// Cross-correlation (no kernel flip) with zero padding and floor output
    /// extents. Differentiable w.r.t. input, weight and bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let [n, cin, h, w] = self.dims4("conv2d", input)?;
        let wshape = self.nodes[weight.0].value.shape().to_vec();
        let [cout, wcin, k, k2] = match wshape.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => {
                return Err(CosegError::invalid(
                    "conv2d",
                    format!("weight must be 4-d, got {}", format_dims(&wshape)),
                ))
            }
        };
        if k != k2 {
            return Err(CosegError::invalid(
                "conv2d",
                format!("kernel must be square, got {}x{}", k, k2),
            ));
        }
        if wcin != cin {
            return Err(CosegError::shape_mismatch(
                "conv2d",
                self.nodes[input.0].value.shape(),
                &wshape,
            ));
        }
        if self.nodes[bias.0].value.shape() != [cout] {
            return Err(CosegError::shape_mismatch(
                "conv2d",
                &[cout],
                self.nodes[bias.0].value.shape(),
            ));
        }
        if k < 1 || stride < 1 {
            return Err(CosegError::invalid("conv2d", "kernel and stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(CosegError::invalid(
                "conv2d",
                format!(
                    "padded input {}x{} smaller than kernel {}",
                    h + 2 * pad,
                    w + 2 * pad,
                    k
                ),
            ));
        }
        let hout = kernels::conv_out_extent(h, k, stride, pad);
        let wout = kernels::conv_out_extent(w, k, stride, pad);
        let out = kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            n,
            cin,
            h,
            w,
            self.nodes[weight.0].value.data(),
            cout,
            k,
            self.nodes[bias.0].value.data(),
            stride,
            pad,
        );
        let value = Tensor::from_parts(vec![n, cout, hout, wout], out);
        Ok(self.record(
            vec![input, weight, bias],
            value,
            OpCtx::Conv2d { stride, pad },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::from_parts(
            self.nodes[input.0].value.shape().to_vec(),
            kernels::relu_forward(self.nodes[input.0].value.data()),
        );
        self.record(vec![input], value, OpCtx::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::from_parts(
            self.nodes[input.0].value.shape().to_vec(),
            kernels::sigmoid_forward(self.nodes[input.0].value.data()),
        );
        self.record(vec![input], value, OpCtx::Sigmoid)
    }

    /// Channel-wise batch normalization over (N, H, W).
    ///
    /// Train mode normalizes with this batch's statistics and folds them into
    /// the running stats by exponential moving average; eval mode normalizes
    /// with the running stats and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [E],
        running_var: &mut [E],
        eps: f64,
        momentum: f64,
        mode: Mode,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("batchnorm2d", input)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].value.shape() != [c] {
                return Err(CosegError::invalid(
                    "batchnorm2d",
                    format!(
                        "{} shape {} does not match {} channels",
                        name,
                        format_dims(self.nodes[id.0].value.shape()),
                        c
                    ),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(CosegError::invalid(
                "batchnorm2d",
                format!("running stats length must be {}", c),
            ));
        }
        if mode == Mode::Train && n * h * w < 2 {
            return Err(CosegError::invalid(
                "batchnorm2d",
                "train mode needs at least 2 values per channel (zero-variance hazard)",
            ));
        }
        let hw = h * w;
        let eps_e = E::of_f64(eps);
        let x = self.nodes[input.0].value.data();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let (mean, inv_std) = kernels::batch_stats(x, n, c, hw, eps_e);
                let mom = E::of_f64(momentum);
                let keep = E::one() - mom;
                for ci in 0..c {
                    // Recover batch variance from inv_std for the EMA update.
                    let var = E::one() / (inv_std[ci] * inv_std[ci]) - eps_e;
                    running_mean[ci] = keep * running_mean[ci] + mom * mean[ci];
                    running_var[ci] = keep * running_var[ci] + mom * var;
                }
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = running_mean.to_vec();
                let inv_std = running_var
                    .iter()
                    .map(|&v| E::one() / (v + eps_e).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };
        let out = kernels::batchnorm_normalize(
            x,
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.record(
            vec![input, gamma, beta],
            value,
            OpCtx::BatchNorm {
                mode,
                mean,
                inv_std,
            },
        ))
    }

    /// Inverted dropout; identity in eval mode. The mask comes from `rng`.
    pub fn dropout(
        &mut self,
        input: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CosegError::invalid(
                "dropout",
                format!("probability {} outside [0, 1)", p),
            ));
        }
        let shape = self.nodes[input.0].value.shape().to_vec();
        if mode == Mode::Eval || p == 0.0 {
            let value = Tensor::from_parts(shape, self.nodes[input.0].value.data().to_vec());
            return Ok(self.record(vec![input], value, OpCtx::Dropout { keep: None, p }));
        }
        let keep: Vec<bool> = (0..self.nodes[input.0].value.numel())
            .map(|_| rng.random::<f64>() >= p)
            .collect();
        let out = kernels::dropout_forward(self.nodes[input.0].value.data(), &keep, p);
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(
            vec![input],
            value,
            OpCtx::Dropout {
                keep: Some(Arc::new(keep)),
                p,
            },
        ))
    }

    /// Each element replicated into a 2x2 block.
    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("upsample_nearest2x", input)?;
        let out = kernels::upsample2x_forward(self.nodes[input.0].value.data(), n, c, h, w);
        let value = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out);
        Ok(self.record(vec![input], value, OpCtx::UpsampleNearest2x))
    }

    pub fn avgpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("avgpool2x2", input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CosegError::invalid(
                "avgpool2x2",
                format!("extents must be even, got {}x{}", h, w),
            ));
        }
        let out = kernels::avgpool2x2_forward(self.nodes[input.0].value.data(), n, c, h, w);
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        Ok(self.record(vec![input], value, OpCtx::AvgPool2x2))
    }

    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("maxpool2x2", input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CosegError::invalid(
                "maxpool2x2",
                format!("extents must be even, got {}x{}", h, w),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.nodes[input.0].value.data(), n, c, h, w);
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        Ok(self.record(vec![input], value, OpCtx::MaxPool2x2 { argmax }))
    }

    /// [n,c,h,w] -> [n,c]: mean over all spatial locations of each channel.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("global_avg_pool", input)?;
        let out = kernels::global_avg_pool_forward(self.nodes[input.0].value.data(), n, c, h * w);
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.record(vec![input], value, OpCtx::GlobalAvgPool))
    }

    /// [n,c,h,w] -> [n,h,w]: mean over channels at each spatial location.
    pub fn channel_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("channel_mean", input)?;
        if c < 1 {
            return Err(CosegError::invalid("channel_mean", "need at least 1 channel"));
        }
        let out = kernels::channel_mean_forward(self.nodes[input.0].value.data(), n, c, h * w);
        let value = Tensor::from_parts(vec![n, h, w], out);
        Ok(self.record(vec![input], value, OpCtx::ChannelMean))
    }

    /// Affine map `x * w + b` for x: [n,din], w: [din,dout], b: [dout].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xshape = self.nodes[input.0].value.shape().to_vec();
        let wshape = self.nodes[weight.0].value.shape().to_vec();
        let ([n, din], [wdin, dout]) = match (xshape.as_slice(), wshape.as_slice()) {
            ([a, b], [c, d]) => ([*a, *b], [*c, *d]),
            _ => {
                return Err(CosegError::invalid(
                    "linear",
                    format!(
                        "expected 2-d input and weight, got {} and {}",
                        format_dims(&xshape),
                        format_dims(&wshape)
                    ),
                ))
            }
        };
        if din != wdin {
            return Err(CosegError::shape_mismatch("linear", &xshape, &wshape));
        }
        if self.nodes[bias.0].value.shape() != [dout] {
            return Err(CosegError::shape_mismatch(
                "linear",
                &[dout],
                self.nodes[bias.0].value.shape(),
            ));
        }
        let out = kernels::linear_forward(
            self.nodes[input.0].value.data(),
            n,
            din,
            self.nodes[weight.0].value.data(),
            dout,
            self.nodes[bias.0].value.data(),
        );
        let value = Tensor::from_parts(vec![n, dout], out);
        Ok(self.record(vec![input, weight, bias], value, OpCtx::Linear))
    }

    /// Elementwise product with broadcasting (see [`kernels::broadcast_spec`]
    /// for the supported shape pairs). Gradients reduce-sum over broadcast
    /// axes.
    pub fn broadcast_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ashape = self.nodes[a.0].value.shape().to_vec();
        let bshape = self.nodes[b.0].value.shape().to_vec();
        let (out_shape, pa, pb) = kernels::broadcast_spec(&ashape, &bshape)
            .ok_or_else(|| CosegError::shape_mismatch("broadcast_mul", &ashape, &bshape))?;
        let out = kernels::broadcast_mul_forward(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &out_shape,
            &pa,
            &pb,
        );
        let value = Tensor::from_parts(out_shape.clone(), out);
        Ok(self.record(
            vec![a, b],
            value,
            OpCtx::MulBroadcast { out_shape, pa, pb },
        ))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ashape = self.nodes[a.0].value.shape().to_vec();
        if ashape != self.nodes[b.0].value.shape() {
            return Err(CosegError::shape_mismatch(
                "add",
                &ashape,
                self.nodes[b.0].value.shape(),
            ));
        }
        let out: Vec<E> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(ashape, out);
        Ok(self.record(vec![a, b], value, OpCtx::Add))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: E = self.nodes[input.0].value.data().iter().copied().sum();
        self.record(vec![input], Tensor::scalar(s), OpCtx::Sum)
    }

    /// Mean over all pixels of the negative log softmax probability of the
    /// target class. logits: [n,2,h,w]; target grids must match spatially.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: &MaskBatch) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4("softmax_cross_entropy", logits)?;
        if c != 2 {
            return Err(CosegError::invalid(
                "softmax_cross_entropy",
                format!("expected 2 logit channels, got {}", c),
            ));
        }
        let (tn, th, tw) = target.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(CosegError::shape_mismatch(
                "softmax_cross_entropy",
                &[n, h, w],
                &[tn, th, tw],
            ));
        }
        let (loss, probs) = kernels::softmax_ce_forward(
            self.nodes[logits.0].value.data(),
            n,
            h * w,
            target.labels(),
        );
        Ok(self.record(
            vec![logits],
            Tensor::scalar(loss),
            OpCtx::SoftmaxCrossEntropy {
                target: target.clone(),
                probs,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Gradients of `requires_grad`
    /// leaves are populated; calling again without [`Graph::zero_grad`]
    /// accumulates additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_node("backward", loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(CosegError::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {}",
                    format_dims(self.nodes[loss.0].value.shape())
                ),
            ));
        }
        // Scratch adjoints for this pass; only leaf grads persist.
        let mut adj: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![E::one()]);

        for ei in (0..self.entries.len()).rev() {
            let out_id = self.entries[ei].output;
            if !self.nodes[out_id.0].requires_grad {
                continue;
            }
            let dout = match adj[out_id.0].take() {
                Some(g) => g,
                None => continue,
            };
            let input_grads = self.entry_backward(ei, &dout)?;
            let inputs = self.entries[ei].inputs.clone();
            for (id, grad) in inputs.into_iter().zip(input_grads) {
                let (id, grad) = match grad {
                    Some(g) => (id, g),
                    None => continue,
                };
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut adj[id.0] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad) {
                            *a = *a + g;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !(node.is_leaf && node.requires_grad) {
                continue;
            }
            if let Some(g) = adj[i].take() {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a = *a + v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Per-op derivative rules. Returns one optional gradient per input.
    fn entry_backward(&self, ei: usize, dout: &[E]) -> Result<Vec<Option<Vec<E>>>> {
        let entry = &self.entries[ei];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shape = |id: NodeId| self.nodes[id.0].value.shape();
        Ok(match &entry.ctx {
            OpCtx::Conv2d { stride, pad } => {
                let x = entry.inputs[0];
                let wt = entry.inputs[1];
                let [n, cin, h, w] = match shape(x) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                let (cout, k) = (shape(wt)[0], shape(wt)[2]);
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(x),
                    n,
                    cin,
                    h,
                    w,
                    val(wt),
                    cout,
                    k,
                    *stride,
                    *pad,
                    dout,
                );
                vec![Some(dx), Some(dw), Some(db)]
            }
            OpCtx::Relu => vec![Some(kernels::relu_backward(val(entry.inputs[0]), dout))],
            OpCtx::Sigmoid => vec![Some(kernels::sigmoid_backward(
                val(entry.output),
                dout,
            ))],
            OpCtx::BatchNorm {
                mode,
                mean,
                inv_std,
            } => {
                let x = entry.inputs[0];
                let [n, c, h, w] = match shape(x) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                let gamma = val(entry.inputs[1]);
                let (dx, dg, db) = match mode {
                    Mode::Train => kernels::batchnorm_backward_train(
                        val(x),
                        n,
                        c,
                        h * w,
                        mean,
                        inv_std,
                        gamma,
                        dout,
                    ),
                    Mode::Eval => kernels::batchnorm_backward_eval(
                        val(x),
                        n,
                        c,
                        h * w,
                        mean,
                        inv_std,
                        gamma,
                        dout,
                    ),
                };
                vec![Some(dx), Some(dg), Some(db)]
            }
            OpCtx::Dropout { keep, p } => match keep {
                Some(mask) => vec![Some(kernels::dropout_backward(dout, mask, *p))],
                None => vec![Some(dout.to_vec())],
            },
            OpCtx::UpsampleNearest2x => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                vec![Some(kernels::upsample2x_backward(dout, n, c, h, w))]
            }
            OpCtx::AvgPool2x2 => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                vec![Some(kernels::avgpool2x2_backward(dout, n, c, h, w))]
            }
            OpCtx::MaxPool2x2 { argmax } => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                vec![Some(kernels::maxpool2x2_backward(dout, argmax, n, c, h, w))]
            }
            OpCtx::GlobalAvgPool => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                vec![Some(kernels::global_avg_pool_backward(dout, n, c, h * w))]
            }
            OpCtx::ChannelMean => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                vec![Some(kernels::channel_mean_backward(dout, n, c, h * w))]
            }
            OpCtx::Linear => {
                let (x, wt) = (entry.inputs[0], entry.inputs[1]);
                let (n, din) = (shape(x)[0], shape(x)[1]);
                let dd = shape(wt)[1];
                let (dx, dw, db) =
                    kernels::linear_backward(val(x), n, din, val(wt), dd, dout);
                vec![Some(dx), Some(dw), Some(db)]
            }
            OpCtx::MulBroadcast { out_shape, pa, pb } => {
                let (a, b) = (entry.inputs[0], entry.inputs[1]);
                let (da, db) = kernels::broadcast_mul_backward(
                    val(a),
                    val(b),
                    out_shape,
                    pa,
                    pb,
                    dout,
                );
                vec![Some(da), Some(db)]
            }
            OpCtx::Add => vec![Some(dout.to_vec()), Some(dout.to_vec())],
            OpCtx::Sum => {
                let n = self.nodes[entry.inputs[0].0].value.numel();
                vec![Some(vec![dout[0]; n])]
            }
            OpCtx::SoftmaxCrossEntropy { target, probs } => {
                let (n, h, w) = target.dims();
                vec![Some(kernels::softmax_ce_backward(
                    probs,
                    n,
                    h * w,
                    target.labels(),
                    dout[0],
                ))]
            }
        })
    }

    // ------------------------------------------------------------------
    // Replay
    // ------------------------------------------------------------------

    /// Re-executes every recorded entry from its recorded inputs and checks
    /// the outputs are reproduced bit-exactly. Stochastic context (dropout
    /// masks) and normalization statistics are taken from the record.
    pub fn replay_check(&self) -> Result<()> {
        for (ei, entry) in self.entries.iter().enumerate() {
            let recomputed = self.replay_entry(entry)?;
            let recorded = &self.nodes[entry.output.0].value;
            if !recorded.bit_eq(&recomputed) {
                return Err(CosegError::invalid(
                    "replay_check",
                    format!("entry {} did not reproduce its recorded output", ei),
                ));
            }
        }
        Ok(())
    }

    fn replay_entry(&self, entry: &Entry<E>) -> Result<Tensor<E>> {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shape = |id: NodeId| self.nodes[id.0].value.shape();
        let out_shape = self.nodes[entry.output.0].value.shape().to_vec();
        let data = match &entry.ctx {
            OpCtx::Conv2d { stride, pad } => {
                let (x, wt, b) = (entry.inputs[0], entry.inputs[1], entry.inputs[2]);
                let [n, cin, h, w] = match shape(x) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::conv2d_forward(
                    val(x),
                    n,
                    cin,
                    h,
                    w,
                    val(wt),
                    shape(wt)[0],
                    shape(wt)[2],
                    val(b),
                    *stride,
                    *pad,
                )
            }
            OpCtx::Relu => kernels::relu_forward(val(entry.inputs[0])),
            OpCtx::Sigmoid => kernels::sigmoid_forward(val(entry.inputs[0])),
            OpCtx::BatchNorm { mean, inv_std, .. } => {
                let x = entry.inputs[0];
                let [n, c, h, w] = match shape(x) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::batchnorm_normalize(
                    val(x),
                    n,
                    c,
                    h * w,
                    mean,
                    inv_std,
                    val(entry.inputs[1]),
                    val(entry.inputs[2]),
                )
            }
            OpCtx::Dropout { keep, p } => match keep {
                Some(mask) => kernels::dropout_forward(val(entry.inputs[0]), mask, *p),
                None => val(entry.inputs[0]).to_vec(),
            },
            OpCtx::UpsampleNearest2x => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::upsample2x_forward(val(entry.inputs[0]), n, c, h, w)
            }
            OpCtx::AvgPool2x2 => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::avgpool2x2_forward(val(entry.inputs[0]), n, c, h, w)
            }
            OpCtx::MaxPool2x2 { .. } => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::maxpool2x2_forward(val(entry.inputs[0]), n, c, h, w).0
            }
            OpCtx::GlobalAvgPool => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::global_avg_pool_forward(val(entry.inputs[0]), n, c, h * w)
            }
            OpCtx::ChannelMean => {
                let [n, c, h, w] = match shape(entry.inputs[0]) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => unreachable!(),
                };
                kernels::channel_mean_forward(val(entry.inputs[0]), n, c, h * w)
            }
            OpCtx::Linear => {
                let (x, wt) = (entry.inputs[0], entry.inputs[1]);
                kernels::linear_forward(
                    val(x),
                    shape(x)[0],
                    shape(x)[1],
                    val(wt),
                    shape(wt)[1],
                    val(entry.inputs[2]),
                )
            }
            OpCtx::MulBroadcast { out_shape, pa, pb } => kernels::broadcast_mul_forward(
                val(entry.inputs[0]),
                val(entry.inputs[1]),
                out_shape,
                pa,
                pb,
            ),
            OpCtx::Add => val(entry.inputs[0])
                .iter()
                .zip(val(entry.inputs[1]))
                .map(|(&x, &y)| x + y)
                .collect(),
            OpCtx::Sum => vec![val(entry.inputs[0]).iter().copied().sum()],
            OpCtx::SoftmaxCrossEntropy { target, .. } => {
                let (n, h, w) = target.dims();
                vec![
                    kernels::softmax_ce_forward(
                        val(entry.inputs[0]),
                        n,
                        h * w,
                        target.labels(),
                    )
                    .0,
                ]
            }
        };
        Ok(Tensor::from_parts(out_shape, data))
    }
}
