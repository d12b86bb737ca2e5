use crate::error::{Error, Result};
use crate::ndgrad::kernels;
use crate::ndgrad::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation of one tape node. Everything the backward sweep needs
/// (pooling winners, conv geometry) is captured here at record time, so a
/// replay of the same program is bit-identical.
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    /// `mul * x + add`, elementwise with scalar coefficients. The additive
    /// constant never enters the backward rule, so only `mul` is recorded.
    Affine { a: ValueId, mul: f64 },
    /// `ln(max(x, floor))`; the floor keeps saturated inputs out of -inf.
    Log { a: ValueId, floor: f64 },
    /// `x^e` for a fixed exponent, on non-negative inputs.
    Powf { a: ValueId, exponent: f64 },
    Relu(ValueId),
    Sum(ValueId),
    /// `sum_i weights_i * x_i` with a fixed weight tensor, scalar result.
    WeightedSum { a: ValueId, weights: Tensor },
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        ksize: usize,
    },
    MaxPool2 { a: ValueId, argmax: Vec<u32>, input_len: usize },
    Upsample2 { a: ValueId, c: usize, h: usize, w: usize },
    ConcatChannels { a: ValueId, b: ValueId, split: usize },
    ChannelSoftmax { a: ValueId, c: usize, rest: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a differentiable program (a Wengert list).
///
/// Nodes may only reference earlier nodes, so the graph is acyclic by
/// construction and one reverse sweep visits every node after all of its
/// consumers. Gradients accumulate across fan-out: a value consumed twice
/// receives the sum of both contributions.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: participates in gradient accumulation.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: data, labels, masks. No gradient is stored for it
    /// and backward work feeding only constants is skipped.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.check(id).value
    }

    /// Gradient of the last `backward` root with respect to `id`, or `None`
    /// when no gradient flowed there.
    pub fn gradient(&self, id: ValueId) -> Option<&Tensor> {
        assert!(id.0 < self.nodes.len(), "ValueId from another tape");
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.check(a).value.zip_map(&self.check(b).value, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// `a - b`, recorded as a negate plus an add.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.check(a).value.zip_map(&self.check(b).value, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Elementwise quotient. The caller keeps denominators away from zero;
    /// ratio-style losses do so with an additive epsilon.
    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.check(a).value.zip_map(&self.check(b).value, "div", |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    /// `mul * x + add` elementwise.
    pub fn affine(&mut self, a: ValueId, mul: f64, add: f64) -> ValueId {
        let v = self.check(a).value.map(|x| mul * x + add);
        let ng = self.needs(a);
        self.push(v, Op::Affine { a, mul }, ng)
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        self.affine(a, factor, 0.0)
    }

    /// `ln(max(x, floor))`. Below the floor the gradient is zero, matching
    /// the clamp.
    pub fn log(&mut self, a: ValueId, floor: f64) -> ValueId {
        let v = self.check(a).value.map(|x| x.max(floor).ln());
        let ng = self.needs(a);
        self.push(v, Op::Log { a, floor }, ng)
    }

    /// `x^e` with constant exponent, for `x >= 0`. For `e < 1` the
    /// derivative at exactly zero is taken as zero (the one-sided limit
    /// diverges), the same convention as the relu kink.
    pub fn powf(&mut self, a: ValueId, exponent: f64) -> ValueId {
        let v = self.check(a).value.map(|x| x.powf(exponent));
        let ng = self.needs(a);
        self.push(v, Op::Powf { a, exponent }, ng)
    }

    /// `max(x, 0)`, subgradient zero at the kink.
    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = self.check(a).value.map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Sum of all elements, scalar result.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let v = Tensor::scalar(self.check(a).value.data().iter().sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `sum_i weights_i * x_i` with a fixed (non-differentiated) weight
    /// tensor of the same shape. One node covers a whole masked reduction.
    pub fn weighted_sum(&mut self, a: ValueId, weights: Tensor) -> Result<ValueId> {
        let av = &self.check(a).value;
        if !av.same_shape(&weights) {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: av.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s = av
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { a, weights }, ng))
    }

    /// Same-padding stride-1 convolution. `input` is `[Cin, H, W]`, `kernel`
    /// `[Cout, Cin, K, K]` with odd `K`, `bias` `[Cout]`; output is
    /// `[Cout, H, W]`.
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        let ishape = self.check(input).value.shape().to_vec();
        let kshape = self.check(kernel).value.shape().to_vec();
        let bshape = self.check(bias).value.shape().to_vec();
        let mismatch = |why: &'static str| Error::ShapeMismatch {
            op: why,
            lhs: ishape.clone(),
            rhs: kshape.clone(),
        };
        let [cin, h, w] = ishape[..] else {
            return Err(mismatch("conv2d input (want [Cin,H,W])"));
        };
        let [cout, kcin, ky, kx] = kshape[..] else {
            return Err(mismatch("conv2d kernel (want [Cout,Cin,K,K])"));
        };
        if kcin != cin || ky != kx || ky % 2 == 0 {
            return Err(mismatch("conv2d input/kernel"));
        }
        if bshape != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: kshape,
                rhs: bshape,
            });
        }
        let out = kernels::conv2d_forward(
            self.node_data(input),
            cin,
            h,
            w,
            self.node_data(kernel),
            self.node_data(bias),
            cout,
            ky,
        );
        let v = Tensor::new(vec![cout, h, w], out).expect("conv output length");
        let ng = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cin,
                h,
                w,
                cout,
                ksize: ky,
            },
            ng,
        ))
    }

    /// 2x2 stride-2 max pooling of `[C, H, W]` with even `H`, `W`. The
    /// winning positions are recorded for the backward sweep.
    pub fn max_pool2(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.check(a).value.shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch {
                op: "max_pool2 (want [C,H,W])",
                lhs: shape,
                rhs: vec![],
            });
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid_argument(format!(
                "max_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.node_data(a), c, h, w);
        let v = Tensor::new(vec![c, h / 2, w / 2], out).expect("pool output length");
        let ng = self.needs(a);
        Ok(self.push(
            v,
            Op::MaxPool2 {
                a,
                argmax,
                input_len: c * h * w,
            },
            ng,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.check(a).value.shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch {
                op: "upsample2 (want [C,H,W])",
                lhs: shape,
                rhs: vec![],
            });
        };
        let out = kernels::upsample2_forward(self.node_data(a), c, h, w);
        let v = Tensor::new(vec![c, 2 * h, 2 * w], out).expect("upsample output length");
        let ng = self.needs(a);
        Ok(self.push(v, Op::Upsample2 { a, c, h, w }, ng))
    }

    /// Stacks two `[C, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ashape = self.check(a).value.shape().to_vec();
        let bshape = self.check(b).value.shape().to_vec();
        let ([ca, ha, wa], [cb, hb, wb]) = (&ashape[..], &bshape[..]) else {
            return Err(Error::ShapeMismatch {
                op: "concat_channels (want [C,H,W])",
                lhs: ashape,
                rhs: bshape,
            });
        };
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.node_data(a));
        data.extend_from_slice(self.node_data(b));
        let v = Tensor::new(vec![ca + cb, *ha, *wa], data).expect("concat length");
        let split = ca * ha * wa;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::ConcatChannels { a, b, split }, ng))
    }

    /// Softmax across axis 0 of `[C, ...]`, one distribution per trailing
    /// position. Numerically stabilized by per-position max subtraction.
    pub fn channel_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.check(a).value.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "channel_softmax (want [C, ...])",
                lhs: shape,
                rhs: vec![],
            });
        }
        let c = shape[0];
        let rest: usize = shape[1..].iter().product();
        let out = kernels::channel_softmax_forward(self.node_data(a), c, rest);
        let v = Tensor::new(shape, out).expect("softmax length");
        let ng = self.needs(a);
        Ok(self.push(v, Op::ChannelSoftmax { a, c, rest }, ng))
    }

    /// Reverse accumulation from a scalar root. Clears previous gradients,
    /// seeds the root with 1, and sweeps the list once in reverse.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        let root_value = &self.check(root).value;
        if !root_value.is_scalar() {
            return Err(Error::invalid_argument(format!(
                "reverse accumulation needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad && i != root.0 {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Sends `g`, the gradient at node `i`, into the gradient slots of the
    /// node's differentiable operands.
    fn propagate(&mut self, i: usize, g: &Tensor) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum_scaled(a, g, 1.0);
                self.accum_scaled(b, g, 1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d = g.zip_map(&self.nodes[b.0].value, "mul'", |gv, bv| gv * bv).unwrap();
                    self.accum(a, d);
                }
                if self.needs(b) {
                    let d = g.zip_map(&self.nodes[a.0].value, "mul'", |gv, av| gv * av).unwrap();
                    self.accum(b, d);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d = g.zip_map(&self.nodes[b.0].value, "div'", |gv, bv| gv / bv).unwrap();
                    self.accum(a, d);
                }
                if self.needs(b) {
                    let q = self.nodes[i].value.clone(); // a / b
                    let mut d = g
                        .zip_map(&self.nodes[b.0].value, "div'", |gv, bv| -gv / bv)
                        .unwrap();
                    d = d.zip_map(&q, "div'", |x, qv| x * qv).unwrap();
                    self.accum(b, d);
                }
            }
            Op::Affine { a, mul, .. } => {
                let (a, mul) = (*a, *mul);
                self.accum_scaled(a, g, mul);
            }
            Op::Log { a, floor } => {
                let (a, floor) = (*a, *floor);
                if self.needs(a) {
                    let d = g
                        .zip_map(&self.nodes[a.0].value, "log'", |gv, x| {
                            if x > floor {
                                gv / x
                            } else {
                                0.0
                            }
                        })
                        .unwrap();
                    self.accum(a, d);
                }
            }
            Op::Powf { a, exponent } => {
                let (a, e) = (*a, *exponent);
                if self.needs(a) {
                    let d = g
                        .zip_map(&self.nodes[a.0].value, "powf'", |gv, x| {
                            if x == 0.0 && e < 1.0 {
                                0.0
                            } else {
                                gv * e * x.powf(e - 1.0)
                            }
                        })
                        .unwrap();
                    self.accum(a, d);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.needs(a) {
                    let d = g
                        .zip_map(&self.nodes[a.0].value, "relu'", |gv, x| {
                            if x > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        })
                        .unwrap();
                    self.accum(a, d);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.needs(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accum(a, Tensor::filled(shape, g.item()));
                }
            }
            Op::WeightedSum { a, weights } => {
                let a = *a;
                if self.needs(a) {
                    let d = weights.map(|wv| wv * g.item());
                    self.accum(a, d);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                cin,
                h,
                w,
                cout,
                ksize,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (cin, h, w, cout, ksize) = (*cin, *h, *w, *cout, *ksize);
                let go = g.data();
                if self.needs(bias) {
                    let d = kernels::conv2d_grad_bias(go, cout, h * w);
                    self.accum(bias, Tensor::new(vec![cout], d).unwrap());
                }
                if self.needs(kernel) {
                    let d = kernels::conv2d_grad_kernel(
                        go,
                        self.node_data(input),
                        cin,
                        h,
                        w,
                        cout,
                        ksize,
                    );
                    self.accum(
                        kernel,
                        Tensor::new(vec![cout, cin, ksize, ksize], d).unwrap(),
                    );
                }
                if self.needs(input) {
                    let d = kernels::conv2d_grad_input(
                        go,
                        self.node_data(kernel),
                        cin,
                        h,
                        w,
                        cout,
                        ksize,
                    );
                    self.accum(input, Tensor::new(vec![cin, h, w], d).unwrap());
                }
            }
            Op::MaxPool2 { a, argmax, input_len } => {
                let a = *a;
                if self.needs(a) {
                    let d = kernels::maxpool2_backward(g.data(), argmax, *input_len);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accum(a, Tensor::new(shape, d).unwrap());
                }
            }
            Op::Upsample2 { a, c, h, w } => {
                let (a, c, h, w) = (*a, *c, *h, *w);
                if self.needs(a) {
                    let d = kernels::upsample2_backward(g.data(), c, h, w);
                    self.accum(a, Tensor::new(vec![c, h, w], d).unwrap());
                }
            }
            Op::ConcatChannels { a, b, split } => {
                let (a, b, split) = (*a, *b, *split);
                let gd = g.data();
                if self.needs(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accum(a, Tensor::new(shape, gd[..split].to_vec()).unwrap());
                }
                if self.needs(b) {
                    let shape = self.nodes[b.0].value.shape().to_vec();
                    self.accum(b, Tensor::new(shape, gd[split..].to_vec()).unwrap());
                }
            }
            Op::ChannelSoftmax { a, c, rest } => {
                let (a, c, rest) = (*a, *c, *rest);
                if self.needs(a) {
                    let p = self.nodes[i].value.data();
                    let d = kernels::channel_softmax_backward(p, g.data(), c, rest);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accum(a, Tensor::new(shape, d).unwrap());
                }
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValueId {
        debug_assert!(
            value.all_finite(),
            "non-finite tape value at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId) -> &Node {
        assert!(id.0 < self.nodes.len(), "ValueId from another tape");
        &self.nodes[id.0]
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn node_data(&self, id: ValueId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn accum(&mut self, id: ValueId, contribution: Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.axpy(1.0, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accum_scaled(&mut self, id: ValueId, g: &Tensor, scale: f64) {
        if !self.needs(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(t) => t.axpy(scale, g),
            slot @ None => *slot = Some(g.map(|x| scale * x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let xx = t.mul(x, x).unwrap();
        let y = t.add(xx, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.value(y).item(), 12.0);
        assert_eq!(t.gradient(x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.gradient(x).unwrap().item(), 5.0);
        assert!(t.gradient(c).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(vec![2]));
        let err = t.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar root"), "{err}");
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(vec![3, 4, 4]));
        let k = t.param(Tensor::zeros(vec![2, 5, 3, 3])); // wrong Cin
        let b = t.param(Tensor::zeros(vec![2]));
        let err = t.conv2d(x, k, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4, 4]") && msg.contains("[2, 5, 3, 3]"), "{msg}");
    }

    #[test]
    fn div_gradients() {
        // y = a/b at a=1, b=4: dy/da = 1/4, dy/db = -1/16
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.0));
        let b = t.param(Tensor::scalar(4.0));
        let y = t.div(a, b).unwrap();
        t.backward(y).unwrap();
        assert!((t.gradient(a).unwrap().item() - 0.25).abs() < 1e-15);
        assert!((t.gradient(b).unwrap().item() + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn relu_zero_input_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x);
        let y = t.sum(r);
        t.backward(y).unwrap();
        assert_eq!(t.gradient(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_floor_blocks_gradient_below_floor() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1e-20, 0.5]).unwrap());
        let l = t.log(x, 1e-12);
        let y = t.sum(l);
        t.backward(y).unwrap();
        let g = t.gradient(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 2.0).abs() < 1e-15);
        assert!(t.value(l).data()[0].is_finite());
    }

    #[test]
    fn weighted_sum_matches_manual_dot() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = Tensor::new(vec![3], vec![0.5, 0.0, 2.0]).unwrap();
        let y = t.weighted_sum(x, w).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.value(y).item(), 6.5);
        assert_eq!(t.gradient(x).unwrap().data(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(Tensor::new(vec![1, 4, 4], (0..16).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap());
            let p = t.max_pool2(x).unwrap();
            let u = t.upsample2(p).unwrap();
            let s = t.channel_softmax(u).unwrap();
            let y = t.sum(s);
            t.backward(y).unwrap();
            (
                t.value(y).item(),
                t.gradient(x).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
