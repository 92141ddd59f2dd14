use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, MatRef, Volume};
use crate::tensor::Tensor;
use crate::{sigmoid, softplus};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// A differentiable operation defined outside this crate.
///
/// `backward` receives the input values, the recorded output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` where the input does not influence the output).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
struct MatmulSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Relu(usize),
    Silu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat(usize, usize),
    ChannelBias(usize, usize),
    Matmul(usize, usize, MatmulSpec),
    Softmax(usize),
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        k: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    GroupNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    tracked: bool,
}

/// Records a computation for one reverse-mode pass.
///
/// Node creation order is a topological order, so the backward pass is a
/// single reverse sweep over the node list.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

/// Gradients of tracked leaves, keyed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
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
            tracked: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.index].tracked = true;
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        va.expect_same_shape(name, vb)?;
        let out = va.zip_map(vb, f)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, op(ia, ib), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f);
        let rg = self.rg(ia);
        Ok(self.push(out, op(ia), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, move |x| x + s, Op::AddScalar)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.scale(s);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale(ia, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Mean(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape().is_empty() || va.shape()[1..] != vb.shape()[1..] || vb.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Concat(ia, ib), rg))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x` (`[C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let c = vx.shape().first().copied().unwrap_or(0);
        if c == 0 || vb.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let s = vx.len() / c;
        let mut out = vx.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let b = vb.data()[ch];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(out, Op::ChannelBias(ix, ib), rg))
    }

    /// Matrix product of rank-2 (`[M, K]`) or batched rank-3 (`[B, M, K]`)
    /// operands. `trans_a` / `trans_b` read the stored operand transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let (batch, sa, sb) = match (va.shape(), vb.shape()) {
            ([r, c], [r2, c2]) => (1, (*r, *c), (*r2, *c2)),
            ([ba, r, c], [bb, r2, c2]) if ba == bb => (*ba, (*r, *c), (*r2, *c2)),
            _ => return Err(mismatch()),
        };
        let (m, k) = if trans_a { (sa.1, sa.0) } else { sa };
        let (k2, n) = if trans_b { (sb.1, sb.0) } else { sb };
        if k != k2 {
            return Err(mismatch());
        }
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ma = mat(&va.data()[bi * m * k..(bi + 1) * m * k], sa, trans_a);
            let mb = mat(&vb.data()[bi * k * n..(bi + 1) * k * n], sb, trans_b);
            kernels::gemm(ma, mb, 0.0, &mut data[bi * m * n..(bi + 1) * m * n]);
        }
        let shape: Vec<usize> = if va.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(ia) || self.rg(ib);
        let spec = MatmulSpec {
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        };
        Ok(self.push(out, Op::Matmul(ia, ib, spec), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let n = *v
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let out = Tensor::new(v.shape(), kernels::softmax_rows(v.data(), n))?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Softmax(ia), rg))
    }

    /// Stride-1 convolution with "same" zero padding.
    ///
    /// `input` is `[Cin, D, H, W]`, `weight` is `[Cout, Cin, k, k, k]` with
    /// odd `k`, and `bias` (optional) has `Cout` elements.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let (vi, vw) = (&self.nodes[ii].value, &self.nodes[iw].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: vi.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        let vol = Volume::from_shape(vi.shape()).ok_or_else(mismatch)?;
        let (cout, k) = match *vw.shape() {
            [co, ci, k1, k2, k3] if ci == vol.channels && k1 == k2 && k2 == k3 && k1 % 2 == 1 => (co, k1),
            _ => return Err(mismatch()),
        };
        let bias_data = match ib {
            Some(ib) => {
                let vb = &self.nodes[ib].value;
                if vb.len() != cout {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv3d bias",
                        lhs: vw.shape().to_vec(),
                        rhs: vb.shape().to_vec(),
                    });
                }
                Some(vb.data())
            }
            None => None,
        };
        let data = kernels::conv3d_forward(vi.data(), vi.shape(), vw.data(), cout, k, bias_data);
        let out = Tensor::new(&[cout, vol.depth, vol.height, vol.width], data)?;
        let rg = self.rg(ii) || self.rg(iw) || ib.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv3d {
                input: ii,
                weight: iw,
                bias: ib,
                k,
            },
            rg,
        ))
    }

    /// 2×2×2 average pooling of a `[C, D, H, W]` volume with even extents.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let vol = Volume::from_shape(v.shape())
            .filter(|vol| vol.depth % 2 == 0 && vol.height % 2 == 0 && vol.width % 2 == 0)
            .ok_or_else(|| TensorError::invalid("avg_pool2", format!("needs even [C,D,H,W], got {:?}", v.shape())))?;
        let out = Tensor::new(
            &[vol.channels, vol.depth / 2, vol.height / 2, vol.width / 2],
            kernels::avg_pool2(v.data(), vol),
        )?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::AvgPool2(ia), rg))
    }

    /// Nearest-neighbour 2× upsampling of a `[C, D, H, W]` volume.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let vol = Volume::from_shape(v.shape())
            .ok_or_else(|| TensorError::invalid("upsample2", format!("needs [C,D,H,W], got {:?}", v.shape())))?;
        let out = Tensor::new(
            &[vol.channels, vol.depth * 2, vol.height * 2, vol.width * 2],
            kernels::upsample2(v.data(), vol),
        )?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Upsample2(ia), rg))
    }

    /// Group normalization over `[C, ...]` with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let vx = &self.nodes[ix].value;
        let c = vx.shape().first().copied().unwrap_or(0);
        if groups == 0 || c == 0 || c % groups != 0 {
            return Err(TensorError::invalid(
                "group_norm",
                format!("{groups} groups do not divide shape {:?}", vx.shape()),
            ));
        }
        let (vg, vb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if vg.len() != c || vb.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let (data, means, rstds) = kernels::group_norm(vx.data(), c, groups, vg.data(), vb.data());
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(
            out,
            Op::GroupNorm {
                input: ix,
                gamma: ig,
                beta: ib,
                groups,
                means,
                rstds,
            },
            rg,
        ))
    }

    /// Records an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(output, Op::Custom(idx, op), rg))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// tracked leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |j: usize, t: Tensor| {
                if !self.nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |j: usize| &self.nodes[j].value;
            let shaped =
                |j: usize, data: Vec<f64>| Tensor::new(self.nodes[j].value.shape(), data).expect("adjoint shape");
            match &node.op {
                Op::Leaf => {
                    if node.tracked {
                        out.map.insert(
                            Var {
                                tape: self.id,
                                index: i,
                            },
                            g,
                        );
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv)?);
                    acc(*b, g.zip_map(val(*a), |gv, av| gv * av)?);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, g.zip_map(vb, |gv, bv| gv / bv)?);
                    let gb: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    acc(*b, shaped(*b, gb));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y)?),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv / x)?),
                Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))?),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?),
                Op::Silu(a) => acc(
                    *a,
                    g.zip_map(val(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })?,
                ),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)?),
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let va = val(*a);
                    let gv = g.data()[0] / va.len() as f64;
                    acc(*a, Tensor::full(va.shape(), gv));
                }
                Op::Reshape(a) => acc(*a, shaped(*a, g.into_data())),
                Op::Concat(a, b) => {
                    let na = val(*a).len();
                    let data = g.into_data();
                    acc(*b, shaped(*b, data[na..].to_vec()));
                    acc(*a, shaped(*a, data[..na].to_vec()));
                }
                Op::ChannelBias(x, b) => {
                    let c = val(*b).len();
                    let s = g.len() / c;
                    let gb: Vec<f64> = g.data().chunks(s).map(|ch| ch.iter().sum()).collect();
                    acc(*b, shaped(*b, gb));
                    acc(*x, g);
                }
                Op::Matmul(a, b, spec) => {
                    let (va, vb) = (val(*a), val(*b));
                    let MatmulSpec {
                        batch,
                        m,
                        k,
                        n,
                        trans_a,
                        trans_b,
                    } = *spec;
                    let sa = if trans_a { (k, m) } else { (m, k) };
                    let sb = if trans_b { (n, k) } else { (k, n) };
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        let gc = MatRef::new(&g.data()[bi * m * n..(bi + 1) * m * n], m, n);
                        let ma = mat(&va.data()[bi * m * k..(bi + 1) * m * k], sa, trans_a);
                        let mb = mat(&vb.data()[bi * k * n..(bi + 1) * k * n], sb, trans_b);
                        let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_a {
                            kernels::gemm(mb, gc.t(), 0.0, ga_s);
                        } else {
                            kernels::gemm(gc, mb.t(), 0.0, ga_s);
                        }
                        let gb_s = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            kernels::gemm(gc.t(), ma, 0.0, gb_s);
                        } else {
                            kernels::gemm(ma.t(), gc, 0.0, gb_s);
                        }
                    }
                    acc(*a, shaped(*a, ga));
                    acc(*b, shaped(*b, gb));
                }
                Op::Softmax(a) => {
                    let n = *node.value.shape().last().expect("softmax rank");
                    let d = kernels::softmax_rows_backward(node.value.data(), g.data(), n);
                    acc(*a, shaped(*a, d));
                }
                Op::Conv3d { input, weight, bias, k } => {
                    let vi = val(*input);
                    let vol = Volume::from_shape(vi.shape()).expect("conv input shape");
                    let cout = node.value.shape()[0];
                    let (gi, gw, gbias) =
                        kernels::conv3d_backward(vi.data(), vol, val(*weight).data(), cout, *k, g.data());
                    acc(*input, shaped(*input, gi));
                    acc(*weight, shaped(*weight, gw));
                    if let Some(b) = bias {
                        acc(*b, shaped(*b, gbias));
                    }
                }
                Op::AvgPool2(a) => {
                    let vol = Volume::from_shape(val(*a).shape()).expect("pool shape");
                    acc(*a, shaped(*a, kernels::avg_pool2_adjoint(g.data(), vol)));
                }
                Op::Upsample2(a) => {
                    let vol = Volume::from_shape(val(*a).shape()).expect("upsample shape");
                    acc(*a, shaped(*a, kernels::upsample2_adjoint(g.data(), vol)));
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    groups,
                    means,
                    rstds,
                } => {
                    let vx = val(*input);
                    let c = vx.shape()[0];
                    let (gx, gg, gbeta) =
                        kernels::group_norm_backward(vx.data(), c, *groups, val(*gamma).data(), means, rstds, g.data());
                    acc(*input, shaped(*input, gx));
                    acc(*gamma, shaped(*gamma, gg));
                    acc(*beta, shaped(*beta, gbeta));
                }
                Op::Custom(inputs, op) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
                    let gs = op.backward(&vals, &node.value, &g);
                    if gs.len() != inputs.len() {
                        return Err(TensorError::invalid(
                            "custom backward",
                            format!(
                                "{} returned {} gradients for {} inputs",
                                op.name(),
                                gs.len(),
                                inputs.len()
                            ),
                        ));
                    }
                    for (&j, gj) in inputs.iter().zip(gs) {
                        if let Some(gj) = gj {
                            val(j).expect_same_shape(op.name(), &gj)?;
                            acc(j, gj);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn mat(data: &[f64], stored: (usize, usize), transposed: bool) -> MatRef<'_> {
    let m = MatRef::new(data, stored.0, stored.1);
    if transposed {
        m.t()
    } else {
        m
    }
}
