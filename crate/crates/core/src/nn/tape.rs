use super::kernels;
use super::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    /// Selects input-channel slices of a conv weight.
    GatherInChannels {
        w: Var,
        idx: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        arg: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    /// Elementwise max; `arg[i]` is the winning input for element i.
    Max {
        xs: Vec<Var>,
        arg: Vec<u8>,
    },
    Softmax(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass so it can be differentiated.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("only parameters are stored by reference"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Copies `v` as a constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let out = kernels::conv_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, bias }, rg)
    }

    pub fn gather_in_channels(&mut self, w: Var, idx: &[usize]) -> Var {
        let src = self.value(w);
        let [c_out, c_in, k, _] = src.shape();
        let kk = k * k;
        let mut out = Tensor::zeros([c_out, idx.len(), k, k]);
        for o in 0..c_out {
            for (j, &ci) in idx.iter().enumerate() {
                assert!(ci < c_in, "channel {ci} out of range {c_in}");
                let s = &src.data()[(o * c_in + ci) * kk..][..kk];
                out.data_mut()[(o * idx.len() + j) * kk..][..kk].copy_from_slice(s);
            }
        }
        let rg = self.rg(w);
        self.push(
            out,
            Op::GatherInChannels {
                w,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, inv_std, y) =
            kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (y, arg) = kernels::maxpool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::MaxPool2 { x, arg }, rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = kernels::upsample2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Upsample2(x), rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.value(xs[0]).shape();
        let (n, h, w) = (first[0], first[2], first[3]);
        let c: usize = xs.iter().map(|&v| self.value(v).channels()).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            let mut off = 0;
            for &v in xs {
                let t = self.value(v);
                assert_eq!(
                    (t.batch(), t.spatial()),
                    (n, (h, w)),
                    "concat operands differ in batch or spatial size"
                );
                let src = t.sample(s);
                out.sample_mut(s)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    /// Elementwise maximum over same-shaped tensors; ties go to the earliest.
    pub fn max(&mut self, xs: &[Var]) -> Var {
        assert!(
            !xs.is_empty() && xs.len() < 256,
            "max needs 1..=255 operands"
        );
        let shape = self.value(xs[0]).shape();
        for &v in xs {
            assert_eq!(self.value(v).shape(), shape, "max operands differ in shape");
        }
        let mut out = self.value(xs[0]).clone();
        let mut arg = vec![0u8; out.numel()];
        for (k, &v) in xs.iter().enumerate().skip(1) {
            for ((o, a), &x) in out
                .data_mut()
                .iter_mut()
                .zip(&mut arg)
                .zip(self.value(v).data())
            {
                if x > *o {
                    *o = x;
                    *a = k as u8;
                }
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(
            out,
            Op::Max {
                xs: xs.to_vec(),
                arg,
            },
            rg,
        )
    }

    /// Softmax over channels.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = kernels::softmax_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Softmax(x), rg)
    }

    /// Back-propagates `seeds` (output var, dLoss/dOutput) and returns the
    /// gradient of every parameter in the store, `None` where unused.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut param_grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Conv { x, w, bias } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut db = bias.map(|b| Tensor::zeros(self.value(b).shape()));
                    let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape()));
                    kernels::conv_backward(xv, wv, &g, &mut dw, db.as_mut(), dx.as_mut());
                    accumulate(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (bias, db) {
                        accumulate(&mut grads, *b, db);
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::GatherInChannels { w, idx } => {
                    let shape = self.value(*w).shape();
                    let [c_out, c_in, k, _] = shape;
                    let kk = k * k;
                    let mut dw = Tensor::zeros(shape);
                    for o in 0..c_out {
                        for (j, &ci) in idx.iter().enumerate() {
                            let src = &g.data()[(o * idx.len() + j) * kk..][..kk];
                            let dst = &mut dw.data_mut()[(o * c_in + ci) * kk..][..kk];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, dw);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let mut dg = Tensor::zeros(gv.shape());
                    let mut dbeta = Tensor::zeros(gv.shape());
                    let mut dx = self.rg(*x).then(|| Tensor::zeros(xhat.shape()));
                    kernels::instance_norm_backward(
                        xhat,
                        inv_std,
                        gv,
                        &g,
                        &mut dg,
                        &mut dbeta,
                        dx.as_mut(),
                    );
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, dbeta);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().expect("relu output");
                    let mut dx = g;
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        if yv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, arg } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    kernels::maxpool2_backward(&g, arg, &mut dx);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    kernels::upsample2_backward(&g, &mut dx);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let n = g.batch();
                    let mut off = 0;
                    for &v in xs {
                        let shape = self.value(v).shape();
                        let len = shape[1] * shape[2] * shape[3];
                        if self.rg(v) {
                            let mut dx = Tensor::zeros(shape);
                            for s in 0..n {
                                dx.sample_mut(s)
                                    .copy_from_slice(&g.sample(s)[off..off + len]);
                            }
                            accumulate(&mut grads, v, dx);
                        }
                        off += len;
                    }
                }
                Op::Max { xs, arg } => {
                    for (k, &v) in xs.iter().enumerate() {
                        if !self.rg(v) {
                            continue;
                        }
                        let mut dx = Tensor::zeros(g.shape());
                        for ((d, &a), &gv) in dx.data_mut().iter_mut().zip(arg).zip(g.data()) {
                            if a as usize == k {
                                *d = gv;
                            }
                        }
                        accumulate(&mut grads, v, dx);
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let mut dx = Tensor::zeros(y.shape());
                    kernels::softmax_backward(y, &g, &mut dx);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
