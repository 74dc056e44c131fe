use std::collections::BTreeMap;

use super::{
    activation, activation_grad, bilinear_resize, bilinear_resize_backward, conv2d,
    conv2d_backward, elementwise, Activation, Elementwise, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Activation(Activation, Var),
    Resize(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ChanwiseMul { map: Var, x: Var },
    Concat(Var, Var),
    Sum(Var),
    /// Weighted sum of equally shaped values.
    Linear(Vec<(Var, f64)>),
    /// Scalar output whose local gradient for each parent was computed in the
    /// forward pass.
    Fused(Vec<(Var, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive ops in execution order. Parents always precede
/// children, so a reverse sweep visits every node after all its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf whose gradient is reported by [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv2d(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        let rg = self.req(input) || self.req(kernel) || self.req(bias);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let y = activation(kind, self.value(x));
        let rg = self.req(x);
        self.push(y, Op::Activation(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = bilinear_resize(self.value(x), h, w)?;
        let rg = self.req(x);
        Ok(self.push(y, Op::Resize(x), rg))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let y = elementwise(kind, self.value(a), self.value(b))?;
        let rg = self.req(a) || self.req(b);
        let op = match kind {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Mul => Op::Mul(a, b),
            Elementwise::ChanwiseMul => Op::ChanwiseMul { map: a, x: b },
            Elementwise::ConcatChannels => Op::Concat(a, b),
        };
        Ok(self.push(y, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn chanwise_mul(&mut self, map: Var, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::ChanwiseMul, map, x)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::ConcatChannels, a, b)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.req(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Contract("linear combination of zero terms".into()))?;
        let mut acc = Tensor::zeros(self.value(first.0).dims());
        for &(v, w) in terms {
            if self.value(v).dims() != acc.dims() {
                return Err(Error::shape(
                    "linear",
                    format!("{:?} vs {:?}", self.value(v).dims(), acc.dims()),
                ));
            }
            acc.add_scaled(self.value(v), w);
        }
        let rg = terms.iter().any(|&(v, _)| self.req(v));
        Ok(self.push(acc, Op::Linear(terms.to_vec()), rg))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each parent.
    pub fn fused(&mut self, value: f64, local: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &local {
            if g.dims() != self.value(*v).dims() {
                return Err(Error::shape(
                    "fused",
                    format!("gradient {:?} for value {:?}", g.dims(), self.value(*v).dims()),
                ));
            }
        }
        let rg = local.iter().any(|(v, _)| self.req(*v));
        Ok(self.push(Tensor::scalar(value), Op::Fused(local), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0));

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(a) => a.add_scaled(&g, 1.0),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                &Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let want_params = self.req(kernel) || self.req(bias);
                    let (gi, gk, gb) = conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        stride,
                        pad,
                        &g,
                        self.req(input),
                        want_params,
                    )?;
                    if let Some(gi) = gi {
                        acc(&mut adj, input, gi);
                    }
                    if self.req(kernel) {
                        acc(&mut adj, kernel, gk.expect("kernel grad"));
                    }
                    if self.req(bias) {
                        acc(&mut adj, bias, gb.expect("bias grad"));
                    }
                }
                &Op::Activation(kind, x) => {
                    acc(&mut adj, x, activation_grad(kind, &node.value, &g));
                }
                &Op::Resize(x) => {
                    let (_, h, w) = self.value(x).chw()?;
                    acc(&mut adj, x, bilinear_resize_backward(&g, h, w)?);
                }
                &Op::Add(a, b) => {
                    if self.req(a) {
                        acc(&mut adj, a, g.clone());
                    }
                    if self.req(b) {
                        acc(&mut adj, b, g);
                    }
                }
                &Op::Mul(a, b) => {
                    if self.req(a) {
                        acc(&mut adj, a, elementwise(Elementwise::Mul, &g, self.value(b))?);
                    }
                    if self.req(b) {
                        acc(&mut adj, b, elementwise(Elementwise::Mul, &g, self.value(a))?);
                    }
                }
                &Op::ChanwiseMul { map, x } => {
                    let m = self.value(map);
                    let xv = self.value(x);
                    let (c, h, w) = xv.chw()?;
                    let plane = h * w;
                    if self.req(map) {
                        let mut gm = vec![0.0; plane];
                        for ch in 0..c {
                            let gs = &g.data()[ch * plane..(ch + 1) * plane];
                            let xs = &xv.data()[ch * plane..(ch + 1) * plane];
                            for p in 0..plane {
                                gm[p] += gs[p] * xs[p];
                            }
                        }
                        acc(&mut adj, map, Tensor::new(vec![1, h, w], gm)?);
                    }
                    if self.req(x) {
                        acc(&mut adj, x, elementwise(Elementwise::ChanwiseMul, m, &g)?);
                    }
                }
                &Op::Concat(a, b) => {
                    let (ca, h, w) = self.value(a).chw()?;
                    let split = ca * h * w;
                    let (cb, _, _) = self.value(b).chw()?;
                    if self.req(a) {
                        acc(&mut adj, a, Tensor::new(vec![ca, h, w], g.data()[..split].to_vec())?);
                    }
                    if self.req(b) {
                        acc(&mut adj, b, Tensor::new(vec![cb, h, w], g.data()[split..].to_vec())?);
                    }
                }
                &Op::Sum(x) => {
                    let gx = Tensor::full(self.value(x).dims(), g.data()[0]);
                    acc(&mut adj, x, gx);
                }
                Op::Linear(terms) => {
                    for &(v, w) in terms {
                        if self.req(v) {
                            acc(&mut adj, v, g.map(|e| e * w));
                        }
                    }
                }
                Op::Fused(local) => {
                    let up = g.data()[0];
                    for (v, lg) in local {
                        if self.req(*v) {
                            acc(&mut adj, *v, lg.map(|e| e * up));
                        }
                    }
                }
            }
        }

        let named = self
            .params
            .iter()
            .map(|(n, v)| {
                let g = adj[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).dims()));
                (n.clone(), g)
            })
            .collect();
        Ok(Gradients { adj, named })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf. `None` when no path connects it to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}
