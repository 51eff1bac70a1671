use std::borrow::Cow;

use super::kernels::{self, ConvGeometry, Trans};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divides by the element count).
    Var,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Pow(usize, f64),
    Abs(usize),
    Sign,
    Sqrt(usize),
    ClampMin(usize, f64),
    Reduce { kind: ReduceKind, input: usize, collapsed: Vec<bool> },
    Expand(usize),
    Reshape(usize),
    Transpose(usize),
    Matmul(usize, usize),
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeometry },
    PixelShuffle { input: usize, r: usize },
    PixelUnshuffle { input: usize, r: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Crop { input: usize, offsets: Vec<usize> },
    Softmax { input: usize, axis: usize },
}

struct Node<'a> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
}

/// Wengert list of tensor operations. Nodes are stored in creation order,
/// which is also a valid topological order; backward visits them in reverse.
///
/// Leaves created with [`Tape::leaf`] borrow their data from the source
/// tensor for the lifetime `'a`, so model parameters are never copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    macs: u64,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` into `t`'s gradient buffer. A leaf that the
    /// loss does not depend on contributes zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node and resets the multiply-accumulate counter.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.macs = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by forward matmul and conv2d so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape matches value")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Cow<'a, [f64]>, rg: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, rg: bool) -> Var {
        self.push(op, shape, Cow::Owned(value), rg)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records `t` without copying its data; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
        )
    }

    /// Like [`Tape::leaf`] with an explicit differentiability flag.
    pub fn leaf_as(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            requires_grad,
        )
    }

    /// Records an owned tensor; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.owned(Op::Leaf, shape, t.into_data(), rg)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Var {
        self.owned(Op::Leaf, shape.to_vec(), vec![value; numel(shape)], false)
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (la, lb) = (numel(sa), numel(sb));
        let shape = if sa == sb {
            sa.clone()
        } else if lb == 1 {
            sa.clone()
        } else if la == 1 {
            sb.clone()
        } else {
            return Err(shape_err("elementwise", sa, sb));
        };
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = if la == lb {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if lb == 1 {
            let y = vb[0];
            va.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = va[0];
            vb.iter().map(|&y| f(x, y)).collect()
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.owned(Op::Binary { kind, a: a.0, b: b.0 }, shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, op: Op, x: Var, rg: bool, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.owned(op, shape, out, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::Neg(x.0), x, rg, |v| -v)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::Scale(x.0, k), x, rg, |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::AddScalar(x.0), x, rg, |v| v + k)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::LeakyRelu(x.0, slope), x, rg, |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::Sigmoid(x.0), x, rg, sigmoid)
    }

    /// `x^p` for a constant exponent; integral exponents use repeated
    /// multiplication so negative bases stay well defined.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::Pow(x.0, p), x, rg, |v| powf(v, p))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::Abs(x.0), x, rg, f64::abs)
    }

    /// `sign(x)` with `sign(0) = 0`. Gradients do not flow through it.
    pub fn sign(&mut self, x: Var) -> Var {
        self.unary(Op::Sign, x, false, sign)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::Sqrt(x.0), x, rg, f64::sqrt)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let rg = self.rg(x.0);
        self.unary(Op::ClampMin(x.0, floor), x, rg, |v| v.max(floor))
    }

    // ------------------------------------------------------------ reductions

    /// Reduces over `axes`, keeping them as extent-1 dimensions.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axes.is_empty() {
            return Err(Error::Domain("reduction over an empty axis set".into()));
        }
        let mut collapsed = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Dimension(format!(
                    "axis {a} out of range for shape {shape:?}"
                )));
            }
            collapsed[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&collapsed)
            .map(|(&d, &c)| if c { 1 } else { d })
            .collect();
        let out_len = numel(&out_shape);
        let count = numel(&shape) / out_len.max(1);
        if count == 0 {
            return Err(Error::Domain("reduction over zero elements".into()));
        }
        let map = kernels::collapse_map(&shape, &collapsed);
        let xv = &self.nodes[x.0].value;
        let mut sums = vec![0.0; out_len];
        for (&v, &m) in xv.iter().zip(&map) {
            sums[m] += v;
        }
        let out = match kind {
            ReduceKind::Sum => sums,
            ReduceKind::Mean => sums.into_iter().map(|s| s / count as f64).collect(),
            ReduceKind::Var => {
                let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
                let mut acc = vec![0.0; out_len];
                for (&v, &m) in xv.iter().zip(&map) {
                    let d = v - means[m];
                    acc[m] += d * d;
                }
                acc.into_iter().map(|s| s / count as f64).collect()
            }
        };
        let rg = self.rg(x.0);
        Ok(self.owned(
            Op::Reduce {
                kind,
                input: x.0,
                collapsed,
            },
            out_shape,
            out,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    pub fn var(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Var, x, axes)
    }

    fn all_axes(&self, x: Var) -> Vec<usize> {
        (0..self.nodes[x.0].shape.len()).collect()
    }

    /// Sum over every axis, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes = self.all_axes(x);
        let r = self.sum(x, &axes).expect("full reduction is always valid");
        self.reshape(r, &[1]).expect("one element")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes = self.all_axes(x);
        let r = self.mean(x, &axes).expect("full reduction is always valid");
        self.reshape(r, &[1]).expect("one element")
    }

    // ---------------------------------------------------------------- layout

    /// Repeats extent-1 dimensions of `x` to reach `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].shape;
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(shape_err("expand", src, shape));
        }
        let collapsed: Vec<bool> = src.iter().zip(shape).map(|(&s, &t)| s == 1 && t != 1).collect();
        let map = kernels::collapse_map(shape, &collapsed);
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = map.iter().map(|&m| xv[m]).collect();
        let rg = self.rg(x.0);
        Ok(self.owned(Op::Expand(x.0), shape.to_vec(), out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].shape;
        if numel(src) != numel(shape) {
            return Err(shape_err("reshape", src, shape));
        }
        let out = self.nodes[x.0].value.to_vec();
        let rg = self.rg(x.0);
        Ok(self.owned(Op::Reshape(x.0), shape.to_vec(), out, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x.0);
        Ok(self.owned(Op::Transpose(x.0), vec![c, r], out, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            Trans::No,
            &self.nodes[b.0].value,
            Trans::No,
            &mut out,
            0.0,
        );
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.owned(Op::Matmul(a.0, b.0), vec![m, n], out, rg))
    }

    /// 2-D cross-correlation with zero padding over an `n×c×h×w` input and a
    /// `c_out×c_in×kh×kw` kernel, plus an optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride < 1 {
            return Err(Error::Dimension("conv2d stride must be at least 1".into()));
        }
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        if let Some(b) = bias {
            if self.nodes[b.0].shape.iter().product::<usize>() != c_out {
                return Err(shape_err("conv2d bias", &self.nodes[b.0].shape, &[c_out]));
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (in_per, out_per) = (c_in * h * wd, c_out * oh * ow);
        let mut out = vec![0.0; n * out_per];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; geom.col_rows() * geom.col_cols()]
        };
        for s in 0..n {
            let xs = &xv[s * in_per..(s + 1) * in_per];
            let os = &mut out[s * out_per..(s + 1) * out_per];
            if geom.is_pointwise() {
                kernels::gemm(c_out, c_in, h * wd, wv, Trans::No, xs, Trans::No, os, 0.0);
            } else {
                kernels::im2col(xs, &geom, &mut cols);
                kernels::gemm(
                    c_out,
                    geom.col_rows(),
                    geom.col_cols(),
                    wv,
                    Trans::No,
                    &cols,
                    Trans::No,
                    os,
                    0.0,
                );
            }
            if let Some(b) = bias {
                let bv = &self.nodes[b.0].value;
                for (c, plane) in os.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        self.macs += (n * c_out * geom.col_rows() * geom.col_cols()) as u64;
        let rg = self.rg(x.0) || self.rg(w.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.owned(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            vec![n, c_out, oh, ow],
            out,
            rg,
        ))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(Error::Dimension(format!(
                "pixel_shuffle: channel extent of {s:?} not divisible by r^2 = {}",
                r * r
            )));
        }
        let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let map = kernels::pixel_shuffle_map(n, c, h, w, r);
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = map.iter().map(|&m| xv[m]).collect();
        let rg = self.rg(x.0);
        Ok(self.owned(
            Op::PixelShuffle { input: x.0, r },
            vec![n, c, h * r, w * r],
            out,
            rg,
        ))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::Dimension(format!(
                "pixel_unshuffle: spatial extents of {s:?} not divisible by r = {r}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
        let map = kernels::pixel_shuffle_map(n, c, h, w, r);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for (j, &m) in map.iter().enumerate() {
            out[m] = xv[j];
        }
        let rg = self.rg(x.0);
        Ok(self.owned(
            Op::PixelUnshuffle { input: x.0, r },
            vec![n, c * r * r, h, w],
            out,
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for v in xs {
            let s = &self.nodes[v.0].shape;
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in xs {
                let block = self.nodes[v.0].shape[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].value[o * block..(o + 1) * block]);
            }
        }
        let rg = xs.iter().any(|v| self.rg(v.0));
        Ok(self.owned(
            Op::Concat {
                inputs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Window of `extents` starting at `offsets`.
    pub fn crop(&mut self, x: Var, offsets: &[usize], extents: &[usize]) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let fits = offsets.len() == s.len()
            && extents.len() == s.len()
            && (0..s.len()).all(|d| offsets[d] + extents[d] <= s[d]);
        if !fits {
            return Err(Error::Dimension(format!(
                "crop window offsets {offsets:?} extents {extents:?} outside shape {s:?}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; numel(extents)];
        kernels::for_each_window_run(&s, offsets, extents, |src, dst, len| {
            out[dst..dst + len].copy_from_slice(&xv[src..src + len]);
        });
        let rg = self.rg(x.0);
        Ok(self.owned(
            Op::Crop {
                input: x.0,
                offsets: offsets.to_vec(),
            },
            extents.to_vec(),
            out,
            rg,
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {s:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&s, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.owned(Op::Softmax { input: x.0, axis }, s, out, rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse accumulation from a one-element `loss`. Returns gradients for
    /// every differentiable leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "loss node {} is not on this tape ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| -> &[f64] { &nodes[j].value };

        match &node.op {
            Op::Leaf | Op::Sign => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                let at = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
                if want(a) {
                    let ga = slot(grads, a, va.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * at(vb, k),
                            BinaryKind::Div => gk / at(vb, k),
                        };
                        ga[if va.len() == 1 { 0 } else { k }] += d;
                    }
                }
                if want(b) {
                    let gb = slot(grads, b, vb.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * at(va, k),
                            BinaryKind::Div => {
                                let y = at(vb, k);
                                -gk * at(va, k) / (y * y)
                            }
                        };
                        gb[if vb.len() == 1 { 0 } else { k }] += d;
                    }
                }
            }
            Op::Neg(x) => unary_back(grads, *x, want(*x), g, |_, gk| -gk),
            Op::Scale(x, s) => unary_back(grads, *x, want(*x), g, |_, gk| gk * s),
            Op::AddScalar(x) => unary_back(grads, *x, want(*x), g, |_, gk| gk),
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                unary_back(grads, *x, want(*x), g, |k, gk| {
                    if xv[k] > 0.0 {
                        gk
                    } else {
                        gk * slope
                    }
                })
            }
            Op::Sigmoid(x) => {
                let s = &node.value;
                unary_back(grads, *x, want(*x), g, |k, gk| gk * s[k] * (1.0 - s[k]))
            }
            Op::Pow(x, p) => {
                let xv = val(*x);
                let p = *p;
                unary_back(grads, *x, want(*x), g, |k, gk| {
                    if p == 0.0 {
                        0.0
                    } else {
                        gk * p * powf(xv[k], p - 1.0)
                    }
                })
            }
            Op::Abs(x) => {
                let xv = val(*x);
                unary_back(grads, *x, want(*x), g, |k, gk| gk * sign(xv[k]))
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                unary_back(grads, *x, want(*x), g, |k, gk| gk / (2.0 * y[k]))
            }
            Op::ClampMin(x, floor) => {
                let xv = val(*x);
                unary_back(grads, *x, want(*x), g, |k, gk| {
                    if xv[k] > *floor {
                        gk
                    } else {
                        0.0
                    }
                })
            }
            Op::Reduce {
                kind,
                input,
                collapsed,
            } => {
                if !want(*input) {
                    return;
                }
                let shape = &nodes[*input].shape;
                let xv = val(*input);
                let map = kernels::collapse_map(shape, collapsed);
                let count = (xv.len() / g.len()) as f64;
                let gx = slot(grads, *input, xv.len());
                match kind {
                    ReduceKind::Sum => {
                        for (k, &m) in map.iter().enumerate() {
                            gx[k] += g[m];
                        }
                    }
                    ReduceKind::Mean => {
                        for (k, &m) in map.iter().enumerate() {
                            gx[k] += g[m] / count;
                        }
                    }
                    ReduceKind::Var => {
                        let mut means = vec![0.0; g.len()];
                        for (k, &m) in map.iter().enumerate() {
                            means[m] += xv[k];
                        }
                        means.iter_mut().for_each(|v| *v /= count);
                        for (k, &m) in map.iter().enumerate() {
                            gx[k] += g[m] * 2.0 * (xv[k] - means[m]) / count;
                        }
                    }
                }
            }
            Op::Expand(x) => {
                if !want(*x) {
                    return;
                }
                let src = &nodes[*x].shape;
                let collapsed: Vec<bool> = src
                    .iter()
                    .zip(&node.shape)
                    .map(|(&s, &t)| s == 1 && t != 1)
                    .collect();
                let map = kernels::collapse_map(&node.shape, &collapsed);
                let gx = slot(grads, *x, numel(src));
                for (k, &m) in map.iter().enumerate() {
                    gx[m] += g[k];
                }
            }
            Op::Reshape(x) => unary_back(grads, *x, want(*x), g, |_, gk| gk),
            Op::Transpose(x) => {
                if !want(*x) {
                    return;
                }
                let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if want(*a) {
                    let vb = val(*b);
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm(m, n, k, g, Trans::No, vb, Trans::Yes, ga, 1.0);
                }
                if want(*b) {
                    let va = val(*a);
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm(k, m, n, va, Trans::Yes, g, Trans::No, gb, 1.0);
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                self.conv2d_backward(*x, *w, *bias, geom, g, grads);
            }
            Op::PixelShuffle { input, r } => {
                if !want(*input) {
                    return;
                }
                let s = &node.shape;
                let map = kernels::pixel_shuffle_map(s[0], s[1], s[2] / r, s[3] / r, *r);
                let gx = slot(grads, *input, g.len());
                for (k, &m) in map.iter().enumerate() {
                    gx[m] += g[k];
                }
            }
            Op::PixelUnshuffle { input, r } => {
                if !want(*input) {
                    return;
                }
                let s = &nodes[*input].shape;
                let map = kernels::pixel_shuffle_map(s[0], s[1], s[2] / r, s[3] / r, *r);
                let gx = slot(grads, *input, g.len());
                for (k, &m) in map.iter().enumerate() {
                    gx[k] += g[m];
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = kernels::axis_split(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let block = nodes[v].shape[*axis] * inner;
                        if want(v) {
                            let len = nodes[v].value.len();
                            let gv = slot(grads, v, len);
                            for (d, s) in gv[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[offset..offset + block])
                            {
                                *d += s;
                            }
                        }
                        offset += block;
                    }
                }
            }
            Op::Crop { input, offsets } => {
                if !want(*input) {
                    return;
                }
                let shape = &nodes[*input].shape;
                let gx = slot(grads, *input, numel(shape));
                kernels::for_each_window_run(shape, offsets, &node.shape, |src, dst, len| {
                    for (d, s) in gx[src..src + len].iter_mut().zip(&g[dst..dst + len]) {
                        *d += s;
                    }
                });
            }
            Op::Softmax { input, axis } => {
                if !want(*input) {
                    return;
                }
                let (outer, len, inner) = kernels::axis_split(&node.shape, *axis);
                let y = &node.value;
                let gx = slot(grads, *input, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: &ConvGeometry,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let xv = &nodes[x].value;
        let wv = &nodes[w].value;
        let n = nodes[x].shape[0];
        let c_out = nodes[w].shape[0];
        let in_per = geom.c_in * geom.h * geom.w;
        let out_plane = geom.oh * geom.ow;
        let out_per = c_out * out_plane;
        let (kr, kc) = (geom.col_rows(), geom.col_cols());

        if let Some(b) = bias.filter(|&b| nodes[b].requires_grad) {
            let gb = slot(grads, b, c_out);
            for s in 0..n {
                for c in 0..c_out {
                    let start = s * out_per + c * out_plane;
                    gb[c] += g[start..start + out_plane].iter().sum::<f64>();
                }
            }
        }
        let need_w = nodes[w].requires_grad;
        let need_x = nodes[x].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kr * kc]
        };
        let mut dcols = cols.clone();
        if need_w {
            let mut gw = grads[w].take().unwrap_or_else(|| vec![0.0; wv.len()]);
            for s in 0..n {
                let xs = &xv[s * in_per..(s + 1) * in_per];
                let gs = &g[s * out_per..(s + 1) * out_per];
                if geom.is_pointwise() {
                    kernels::gemm(c_out, kc, kr, gs, Trans::No, xs, Trans::Yes, &mut gw, 1.0);
                } else {
                    kernels::im2col(xs, geom, &mut cols);
                    kernels::gemm(c_out, kc, kr, gs, Trans::No, &cols, Trans::Yes, &mut gw, 1.0);
                }
            }
            grads[w] = Some(gw);
        }
        if need_x {
            let gx = slot(grads, x, xv.len());
            for s in 0..n {
                let gs = &g[s * out_per..(s + 1) * out_per];
                let gxs = &mut gx[s * in_per..(s + 1) * in_per];
                if geom.is_pointwise() {
                    kernels::gemm(kr, c_out, kc, wv, Trans::Yes, gs, Trans::No, gxs, 1.0);
                } else {
                    kernels::gemm(kr, c_out, kc, wv, Trans::Yes, gs, Trans::No, &mut dcols, 0.0);
                    kernels::col2im_add(&dcols, geom, gxs);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn unary_back(
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    wanted: bool,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !wanted {
        return;
    }
    let gx = slot(grads, x, g.len());
    for (k, &gk) in g.iter().enumerate() {
        gx[k] += f(k, gk);
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn powf(v: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        v.powi(p as i32)
    } else {
        v.powf(p)
    }
}
