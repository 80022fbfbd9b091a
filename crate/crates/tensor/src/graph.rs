use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Abs(Var),
    Relu(Var),
    Prelu(Var, Var),
    Tanh(Var),
    SumAll(Var),
    MeanAll(Var),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: Var,
        scale: Vec<f64>,
    },
    Concat(Var, Var),
    BoxMean(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are appended in evaluation order, so the append order is already a
/// topological order and [`Graph::backward`] walks it in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_hash: u64,
}

/// Gradients of a scalar loss with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::param`]. Leaves the loss
    /// does not depend on get a zero tensor; constants get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Learnable leaf; receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Fixed leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every branch decision taken so far (activation signs, `abs`
    /// signs, pooling winners). Two forward passes with equal signatures went
    /// through the same piecewise-smooth region.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.numel() == 1 {
            av.shape().to_vec()
        } else if av.numel() == 1 {
            bv.shape().to_vec()
        } else {
            return shape_err(format!(
                "elementwise shapes {:?} and {:?} do not match",
                av.shape(),
                bv.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let data = (0..n)
            .map(|i| {
                f(
                    ad[if ad.len() == 1 { 0 } else { i }],
                    bd[if bd.len() == 1 { 0 } else { i }],
                )
            })
            .collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum; a one-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.hash_signs(x);
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.hash_signs(x);
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    fn hash_signs(&mut self, x: Var) {
        let mut h = self.branch_hash;
        for &v in self.nodes[x.0].value.data() {
            let bit = if v > 0.0 {
                1
            } else if v < 0.0 {
                2
            } else {
                3
            };
            h = (h ^ bit).wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
    }

    /// Leaky rectifier with one learnable slope per channel (axis 0).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        if self.value(slope).numel() != c {
            return shape_err(format!(
                "prelu slope has {} entries for {c} channels",
                self.value(slope).numel()
            ));
        }
        let per = xv.numel() / c;
        let a = self.value(slope).data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a[i / per] * v })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.hash_signs(x);
        let rg = self.rg(&[x, slope]);
        Ok(self.push(t, Op::Prelu(x, slope), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Stride-1 cross-correlation of `[Cin, X, Y, Z]` with `[Cout, Cin, KX, KY, KZ]`,
    /// zero padding `pad` on every side.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: usize,
    ) -> Result<Var> {
        let ishape = self.value(input).dims4()?;
        let geom = ConvGeom::new(ishape, self.value(kernel).shape(), pad)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geom.cout {
                return shape_err(format!(
                    "conv bias has {} entries for {} output channels",
                    self.value(b).numel(),
                    geom.cout
                ));
            }
        }
        let out = kernels::conv3d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let [ox, oy, oz] = geom.output;
        let t = Tensor::new(vec![geom.cout, ox, oy, oz], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            t,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2×2×2 max pool, stride 2.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).dims4()?;
        if s[1..].iter().any(|d| d % 2 != 0) {
            return shape_err(format!(
                "max pool needs even spatial dims, got {:?}",
                &s[1..]
            ));
        }
        let (out, argmax) = kernels::maxpool2(self.value(x).data(), s);
        let mut h = self.branch_hash;
        for &a in &argmax {
            h = (h ^ a as u64).wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
        let t = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2, s[3] / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool { input: x, argmax }, rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample_nn(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).dims4()?;
        let out = kernels::upsample2(self.value(x).data(), s);
        let t = Tensor::new(vec![s[0], 2 * s[1], 2 * s[2], 2 * s[3]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample(x), rg))
    }

    /// Per-channel standardization over spatial voxels (biased variance),
    /// followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [c, ..] = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("instance norm affine params must have {c} entries"));
        }
        let xv = self.value(x);
        let per = xv.numel() / c;
        if per < 2 {
            return Err(TensorError::DegenerateInstance);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(c);
        for (ch, chunk) in xv.data().chunks(per).enumerate() {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for &v in chunk {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::InstanceNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let scale: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { input: x, scale }, rg))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).dims4()?, self.value(b).dims4()?);
        if sa[1..] != sb[1..] {
            return shape_err(format!("concat spatial dims differ: {sa:?} vs {sb:?}"));
        }
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2], sa[3]], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat(a, b), rg))
    }

    /// Valid-position uniform window mean, see [`crate::box_mean3d`].
    pub fn box_mean3d(&mut self, x: Var, window: usize) -> Result<Var> {
        let t = kernels::box_mean3d(self.value(x), window)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::BoxMean(x, window), rg))
    }

    /// Reverse-mode accumulation of d(loss)/d(leaf) for every learnable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = self
            .nodes
            .iter()
            .map(|n| {
                (n.requires_grad && matches!(n.op, Op::Leaf))
                    .then(|| Tensor::zeros(n.value.shape().to_vec()).expect("valid shape"))
            })
            .collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(slot) = leaves[i].as_mut() {
                        slot.data_mut().copy_from_slice(&g);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let pick = |d: &[f64], j: usize| d[if d.len() == 1 { 0 } else { j }];
                    let ga: Vec<f64> = match kind {
                        BinKind::Add | BinKind::Sub => g.clone(),
                        BinKind::Mul => (0..g.len()).map(|j| g[j] * pick(bv, j)).collect(),
                        BinKind::Div => (0..g.len()).map(|j| g[j] / pick(bv, j)).collect(),
                    };
                    let gb: Vec<f64> = match kind {
                        BinKind::Add => g.clone(),
                        BinKind::Sub => g.iter().map(|v| -v).collect(),
                        BinKind::Mul => (0..g.len()).map(|j| g[j] * pick(av, j)).collect(),
                        BinKind::Div => (0..g.len())
                            .map(|j| {
                                let d = pick(bv, j);
                                -g[j] * pick(av, j) / (d * d)
                            })
                            .collect(),
                    };
                    self.send_reduced(&mut grads, *a, ga);
                    self.send_reduced(&mut grads, *b, gb);
                }
                Op::AddScalar(x) => self.send(&mut grads, *x, g),
                Op::MulScalar(x, c) => self.send(&mut grads, *x, g.iter().map(|v| v * c).collect()),
                Op::Abs(x) => {
                    let xv = self.value(*x).data();
                    let gx = g.iter().zip(xv).map(|(g, &v)| g * sign(v)).collect();
                    self.send(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.send(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let yv = node.value.data();
                    let gx = g.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                    self.send(&mut grads, *x, gx);
                }
                Op::Prelu(x, slope) => {
                    let xv = self.value(*x).data();
                    let a = self.value(*slope).data();
                    let per = xv.len() / a.len();
                    let mut gx = Vec::with_capacity(xv.len());
                    let mut ga = vec![0.0; a.len()];
                    for (j, (&gj, &v)) in g.iter().zip(xv).enumerate() {
                        if v >= 0.0 {
                            gx.push(gj);
                        } else {
                            gx.push(a[j / per] * gj);
                            ga[j / per] += v * gj;
                        }
                    }
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *slope, ga);
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).numel();
                    self.send(&mut grads, *x, vec![g[0]; n]);
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).numel();
                    self.send(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    if self.requires_grad(*input) {
                        let gi =
                            kernels::conv3d_backward_input(&g, self.value(*kernel).data(), geom);
                        self.send(&mut grads, *input, gi);
                    }
                    if self.requires_grad(*kernel) {
                        let gk =
                            kernels::conv3d_backward_kernel(&g, self.value(*input).data(), geom);
                        self.send(&mut grads, *kernel, gk);
                    }
                    if let Some(b) = bias {
                        self.send(&mut grads, *b, kernels::channel_sums(&g, geom.cout));
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        gi[idx] += gv;
                    }
                    self.send(&mut grads, *input, gi);
                }
                Op::Upsample(x) => {
                    let s = self.value(*x).dims4()?;
                    self.send(&mut grads, *x, kernels::upsample2_backward(&g, s));
                }
                Op::InstanceNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let per = g.len() / c;
                    let gam = self.value(*gamma).data();
                    let mut gx = Vec::with_capacity(g.len());
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for ch in 0..c {
                        let gs = &g[ch * per..(ch + 1) * per];
                        let hs = &xhat[ch * per..(ch + 1) * per];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for (&gv, &h) in gs.iter().zip(hs) {
                            gg[ch] += gv * h;
                            gb[ch] += gv;
                            let d = gv * gam[ch];
                            sum_d += d;
                            sum_dh += d * h;
                        }
                        let n = per as f64;
                        let k = inv_std[ch] / n;
                        for (&gv, &h) in gs.iter().zip(hs) {
                            let d = gv * gam[ch];
                            gx.push(k * (n * d - sum_d - h * sum_dh));
                        }
                    }
                    self.send(&mut grads, *input, gx);
                    self.send(&mut grads, *gamma, gg);
                    self.send(&mut grads, *beta, gb);
                }
                Op::Dropout { input, scale } => {
                    let gx = g.iter().zip(scale).map(|(g, s)| g * s).collect();
                    self.send(&mut grads, *input, gx);
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).numel();
                    let mut ga = g;
                    let gb = ga.split_off(na);
                    self.send(&mut grads, *a, ga);
                    self.send(&mut grads, *b, gb);
                }
                Op::BoxMean(x, w) => {
                    let s = self.value(*x).dims4()?;
                    self.send(&mut grads, *x, kernels::box_mean_backward(&g, s, *w));
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `send`, summing the contribution down when `to` was broadcast.
    fn send_reduced(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if self.value(to).numel() == 1 && g.len() != 1 {
            let s = g.iter().sum();
            self.send(grads, to, vec![s]);
        } else {
            self.send(grads, to, g);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
