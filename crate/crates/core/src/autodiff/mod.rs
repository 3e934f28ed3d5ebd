//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] records every operation as it is evaluated, using the same
//! forward kernels as eager inference, so recorded values are bitwise equal
//! to the eager path. [`Graph::backward`] walks the record in reverse and
//! accumulates adjoints.

mod gradcheck;
mod model;
mod optim;
mod train;

pub use gradcheck::{certification_suite, grad_check, GradCheckConfig, GradCheckReport};
pub use model::{AlignerVars, KernelVars, PyramidVars};
pub use optim::{adam_step, LrSchedule, OptimState, ADAM_EPS, BETA1, BETA2, MAX_LR};
pub use train::{
    evaluate_loss, evaluate_psnr, train_toy, Budget, TrainConfig, TrainOutcome, CHARBONNIER_EPS,
};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::attention::{
    htn_rows, htn_rows_backward, scaled_scores, softmax_rows, softmax_rows_backward,
};
use crate::blockops::{b2t, flatten_blocks, t2b, unflatten_blocks, BlockGeometry};
use crate::error::{Result, XabaError};
use crate::pyramid::{channel_softmax, mix_candidates};
use crate::scalar::{lit, Scalar};
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, matmul, matmul_transposed, relu, resize,
    resize_backward, split_channels, ConvKernel, Direction, Shape, Tensor,
};

/// Mean Charbonnier penalty `mean(√((pred − target)² + ε²))`.
pub fn charbonnier<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(XabaError::config(format!(
            "charbonnier: prediction {} and target {} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(XabaError::precondition(
            "charbonnier epsilon must be positive",
        ));
    }
    let e2 = lit::<T>(eps * eps);
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| ((p - t) * (p - t) + e2).sqrt())
        .sum();
    Ok(sum / lit(pred.len() as f64))
}

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    T2b(Var, BlockGeometry),
    B2t(Var, usize),
    Flatten(Var),
    Unflatten(Var),
    Scores {
        q: Var,
        k: Var,
        d_k: usize,
    },
    Softmax(Var),
    Htn(Var),
    Matmul(Var, Var),
    Resize {
        x: Var,
        factor: usize,
        direction: Direction,
    },
    Concat(Vec<Var>),
    ChannelSoftmax(Var),
    Mix {
        mask: Var,
        candidates: Vec<Var>,
    },
    Charbonnier {
        pred: Var,
        target: Var,
        eps: f64,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn bias_tensor<T: Scalar>(bias: &[T]) -> Tensor<T> {
    Tensor::new(Shape::new(1, 1, 1, bias.len()), bias.to_vec())
        .expect("length matches by construction")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| {
            XabaError::State(format!("node {} has not been recorded in this graph", v.0))
        })
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a kernel as two trainable leaves (weights and a `(1, 1, 1, out)` bias).
    pub fn kernel(&mut self, k: &ConvKernel<T>) -> KernelVars {
        KernelVars {
            weight: self.param(k.weight.clone()),
            bias: self.param(bias_tensor(&k.bias)),
        }
    }

    pub fn conv2d(&mut self, input: Var, k: KernelVars) -> Result<Var> {
        self.node(input)?;
        let kernel = ConvKernel::new(
            self.value(k.weight).clone(),
            self.value(k.bias).data().to_vec(),
        )?;
        let out = conv2d(self.value(input), &kernel)?;
        let rg = self.grad_flag(&[input, k.weight, k.bias]);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight: k.weight,
                bias: k.bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = relu(&self.node(x)?.value);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.node(b)?;
        let out = self.node(a)?.value.add(self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn t2b(&mut self, x: Var, block_size: usize) -> Result<(Var, BlockGeometry)> {
        let (out, g) = t2b(&self.node(x)?.value, block_size)?;
        let rg = self.grad_flag(&[x]);
        Ok((self.push(out, Op::T2b(x, g), rg), g))
    }

    pub fn b2t(&mut self, x: Var, geometry: &BlockGeometry) -> Result<Var> {
        let out = b2t(&self.node(x)?.value, geometry)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::B2t(x, geometry.block_size), rg))
    }

    pub fn flatten_blocks(&mut self, x: Var) -> Result<Var> {
        let out = flatten_blocks(&self.node(x)?.value)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Flatten(x), rg))
    }

    pub fn unflatten_blocks(&mut self, x: Var, block_size: usize) -> Result<Var> {
        let out = unflatten_blocks(&self.node(x)?.value, block_size)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Unflatten(x), rg))
    }

    pub fn scaled_scores(&mut self, q: Var, k: Var, d_k: usize) -> Result<Var> {
        self.node(k)?;
        let out = scaled_scores(&self.node(q)?.value, self.value(k), d_k)?;
        let rg = self.grad_flag(&[q, k]);
        Ok(self.push(out, Op::Scores { q, k, d_k }, rg))
    }

    pub fn softmax_rows(&mut self, s: Var) -> Result<Var> {
        let out = softmax_rows(&self.node(s)?.value).values;
        let rg = self.grad_flag(&[s]);
        Ok(self.push(out, Op::Softmax(s), rg))
    }

    pub fn htn_rows(&mut self, s: Var) -> Result<Var> {
        let out = htn_rows(&self.node(s)?.value).values;
        let rg = self.grad_flag(&[s]);
        Ok(self.push(out, Op::Htn(s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.node(b)?;
        let out = matmul(&self.node(a)?.value, self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn resize(&mut self, x: Var, factor: usize, direction: Direction) -> Result<Var> {
        let out = resize(&self.node(x)?.value, factor, direction)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(
            out,
            Op::Resize {
                x,
                factor,
                direction,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        for &x in xs {
            self.node(x)?;
        }
        let refs: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let out = concat_channels(&refs)?;
        let rg = self.grad_flag(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let out = channel_softmax(&self.node(x)?.value);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::ChannelSoftmax(x), rg))
    }

    pub fn mix(&mut self, mask: Var, candidates: &[Var]) -> Result<Var> {
        self.node(mask)?;
        for &c in candidates {
            self.node(c)?;
        }
        let refs: Vec<&Tensor<T>> = candidates.iter().map(|&c| self.value(c)).collect();
        let out = mix_candidates(self.value(mask), &refs)?;
        let mut all = candidates.to_vec();
        all.push(mask);
        let rg = self.grad_flag(&all);
        Ok(self.push(
            out,
            Op::Mix {
                mask,
                candidates: candidates.to_vec(),
            },
            rg,
        ))
    }

    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        self.node(target)?;
        let loss = charbonnier(&self.node(pred)?.value, self.value(target), eps)?;
        let rg = self.grad_flag(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Charbonnier { pred, target, eps },
            rg,
        ))
    }

    /// `Σ x ⊙ weights` with constant weights; reduces any tensor to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.shape() != weights.shape() {
            return Err(XabaError::config(format!(
                "weighted_sum: {} vs {}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s: T = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.grad_flag(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Fingerprint of every piecewise branch taken in the forward pass: ReLU
    /// signs, HTN clamp regions and HTN fallback choices. Two evaluations with
    /// equal fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Htn(s) => {
                    let scores = self.value(*s);
                    let n = scores.shape().width.max(1);
                    for row in scores.data().chunks(n) {
                        let mut live = false;
                        for &v in row {
                            let region: u8 = if v <= T::zero() {
                                0
                            } else if v < T::one() {
                                1
                            } else {
                                2
                            };
                            live |= region > 0;
                            region.hash(&mut h);
                        }
                        if !live {
                            let pick = row.iter().enumerate().fold(0, |best, (i, &v)| {
                                if v > row[best] {
                                    i
                                } else {
                                    best
                                }
                            });
                            pick.hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Number of HTN rows that fell back to a one-hot row.
    pub fn htn_fallback_rows(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Htn(s) => Some(htn_rows(self.value(s)).fallback_rows),
                _ => None,
            })
            .sum()
    }

    /// Propagates adjoints from the scalar `loss` to every node that influenced it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(XabaError::State(format!(
                "backward needs a scalar loss, got shape {}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                for (target, contribution) in self.local_grads(&node.op, &node.value, &g)? {
                    if !self.nodes[target.0].requires_grad {
                        continue;
                    }
                    match &mut grads[target.0] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(contribution.data())
                            .for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one op with respect to each of its inputs.
    fn local_grads(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        Ok(match op {
            Op::Leaf => vec![],
            Op::Conv {
                input,
                weight,
                bias,
            } => {
                let kernel = ConvKernel::new(
                    self.value(*weight).clone(),
                    self.value(*bias).data().to_vec(),
                )?;
                let (dx, dw, db) = conv2d_backward(self.value(*input), &kernel, g)?;
                vec![(*input, dx), (*weight, dw), (*bias, bias_tensor(&db))]
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                vec![(
                    *x,
                    g.zip_with(xv, |gi, xi| if xi > T::zero() { gi } else { T::zero() })?,
                )]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::T2b(x, geometry) => vec![(*x, b2t(g, geometry)?)],
            Op::B2t(x, block) => vec![(*x, t2b(g, *block)?.0)],
            Op::Flatten(x) => {
                let block = self.value(*x).shape().height;
                vec![(*x, unflatten_blocks(g, block)?)]
            }
            Op::Unflatten(x) => vec![(*x, flatten_blocks(g)?)],
            Op::Scores { q, k, d_k } => {
                let root = lit::<T>((*d_k as f64).sqrt());
                let dq = matmul_transposed(g, false, self.value(*k), false).map(|v| v / root);
                let dk = matmul_transposed(g, true, self.value(*q), false).map(|v| v / root);
                vec![(*q, dq), (*k, dk)]
            }
            Op::Softmax(s) => vec![(*s, softmax_rows_backward(out, g))],
            Op::Htn(s) => vec![(*s, htn_rows_backward(self.value(*s), out, g))],
            Op::Matmul(a, b) => {
                let da = matmul_transposed(g, false, self.value(*b), true);
                let db = matmul_transposed(self.value(*a), true, g, false);
                vec![(*a, da), (*b, db)]
            }
            Op::Resize {
                x,
                factor,
                direction,
            } => {
                vec![(
                    *x,
                    resize_backward(g, self.value(*x).shape(), *factor, *direction),
                )]
            }
            Op::Concat(xs) => {
                let parts: Vec<usize> =
                    xs.iter().map(|&x| self.value(x).shape().channels).collect();
                xs.iter().copied().zip(split_channels(g, &parts)?).collect()
            }
            Op::ChannelSoftmax(x) => vec![(*x, channel_softmax_backward(out, g))],
            Op::Mix { mask, candidates } => {
                let m = self.value(*mask);
                let ms = m.shape();
                let cs = g.shape();
                let plane = cs.plane();
                let mut dmask = Tensor::zeros(ms);
                let mut out = Vec::with_capacity(candidates.len() + 1);
                for (i, &c) in candidates.iter().enumerate() {
                    let cv = self.value(c);
                    let mut dc = Tensor::zeros(cs);
                    for n in 0..cs.batch {
                        let mrow = &m.data()[(n * ms.channels + i) * plane..][..plane];
                        let dm_off = (n * ms.channels + i) * plane;
                        for ch in 0..cs.channels {
                            let off = (n * cs.channels + ch) * plane;
                            for (p, &mv) in mrow.iter().enumerate() {
                                let gv = g.data()[off + p];
                                dc.data_mut()[off + p] = gv * mv;
                                dmask.data_mut()[dm_off + p] += gv * cv.data()[off + p];
                            }
                        }
                    }
                    out.push((c, dc));
                }
                out.push((*mask, dmask));
                out
            }
            Op::Charbonnier { pred, target, eps } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let e2 = lit::<T>(eps * eps);
                let scale = g.data()[0] / lit(p.len() as f64);
                let dp = p.zip_with(t, |a, b| {
                    let d = a - b;
                    scale * d / (d * d + e2).sqrt()
                })?;
                let dt = dp.map(|v| -v);
                vec![(*pred, dp), (*target, dt)]
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                vec![(*x, weights.map(|w| w * s))]
            }
        })
    }
}

fn channel_softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let plane = s.plane();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.batch {
        for p in 0..plane {
            let base = n * s.item() + p;
            let dot: T = (0..s.channels)
                .map(|c| y.data()[base + c * plane] * g.data()[base + c * plane])
                .sum();
            for c in 0..s.channels {
                let i = base + c * plane;
                dx.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
            }
        }
    }
    dx
}
