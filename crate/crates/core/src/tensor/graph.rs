use std::collections::HashMap;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::optim::{ParamId, ParamStore};
use super::{dims5, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Lexicographic 3x3x3 offsets, `(-1,-1,-1)` first; index 13 is the centre.
pub const CUBE_OFFSETS: [[isize; 3]; 27] = {
    let mut out = [[0isize; 3]; 27];
    let mut i = 0;
    while i < 27 {
        out[i] = [(i / 9) as isize - 1, ((i / 3) % 3) as isize - 1, (i % 3) as isize - 1];
        i += 1;
    }
    out
};

enum Op<R> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    ScaleByVar { x: Var, s: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { parts: Vec<Var> },
    MaxOverAxis { x: Var, axis: usize, argmax: Vec<u32> },
    DwConv { x: Var, k: Var, geom: ConvGeom },
    Deconv { x: Var, k: Var, geom: ConvGeom },
    Pointwise { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Normalize { x: Var, block: usize, rstd: Vec<R> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Gelu { x: Var, gate: Vec<R> },
    LeakyRelu(Var, R),
    Sigmoid(Var),
    Softplus(Var),
    GlobalAvgPool(Var),
    ChannelScale { x: Var, s: Var },
    Gmf { x: Var, mu: Var, sigma: Var },
    Gather { src: Var, sample: usize, points: Vec<[usize; 3]>, offsets: Vec<[isize; 3]> },
    BroadcastRows(Var),
    Dice { p: Var, y: Vec<R>, eps: R },
    Bce { p: Var, y: Vec<R> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Records ops for one forward pass and replays them in reverse.
///
/// A graph is single-use: build it, call [`Graph::backward`] once per root,
/// then drop it. Parameters are pulled in from a [`ParamStore`] by id and
/// deduplicated, so a parameter used twice accumulates both contributions.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    params: HashMap<ParamId, Var>,
}

impl<R: Real> Gradients<R> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU written as `x * sigmoid(2z)`, `z = c(x + a x^3)`.
/// Returns the value and the gate `sigmoid(2z)`.
#[inline]
fn gelu<R: Real>(x: R) -> (R, R) {
    let z = R::lit(2.0 * GELU_C) * (x + R::lit(GELU_A) * x * x * x);
    let s = R::one() / (R::one() + (-z).exp());
    (x * s, s)
}

#[inline]
fn gelu_grad<R: Real>(x: R, s: R) -> R {
    let dz = R::lit(2.0 * GELU_C) * (R::one() + R::lit(3.0 * GELU_A) * x * x);
    s + x * s * (R::one() - s) * dz
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

const BCE_CLAMP: f64 = 1e-7;

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<R>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable leaf (gradients are kept for it).
    pub fn input(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.leaf(store.get(id).clone(), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).unwrap()
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scale must hold one value, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push("scale_by", out, Op::ScaleByVar { x, s }, &[x, s])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (vals, gate): (Vec<R>, Vec<R>) = t.data().iter().map(|&v| gelu(v)).unzip();
        let out = Tensor::new(t.shape(), vals)?;
        self.push("gelu", out, Op::Gelu { x, gate }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = R::lit(slope);
        let out = self.value(x).map(|v| if v > R::zero() { v } else { v * s });
        self.push("leaky_relu", out, Op::LeakyRelu(x, s), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push("softplus", out, Op::Softplus(x), &[x])
    }

    // ---- reductions and layout -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(kernels::sum(self.value(x).data()));
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(kernels::sum(t.data()) / R::lit(t.len() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Flattens everything after the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rows = s[0];
        let cols = s[1..].iter().product();
        self.reshape(x, &[rows, cols])
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", "need at least 2 axes"));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Stacks `[P_i, K]` matrices into `[sum P_i, K]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if let [single] = parts {
            return Ok(*single);
        }
        let mut lifted = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p).to_vec();
            if s.len() != 2 {
                return Err(Error::shape("concat_rows", format!("{s:?}")));
            }
            rows += s[0];
            lifted.push(self.reshape(*p, &[1, s[0], s[1]])?);
        }
        let joined = self.concat(&lifted)?;
        let k = self.shape(joined)[2];
        self.reshape(joined, &[rows, k])
    }

    /// Maximum over `axis`, removing it. Ties go to the lowest index.
    /// Returns the values and the winning indices.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<u32>)> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::invalid("max_over_axis", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let m = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut vals = vec![R::zero(); outer * inner];
        let mut arg = vec![0u32; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for r in 0..inner {
                let mut best = d[o * m * inner + r];
                let mut bi = 0u32;
                for i in 1..m {
                    let v = d[(o * m + i) * inner + r];
                    if v > best {
                        best = v;
                        bi = i as u32;
                    }
                }
                vals[o * inner + r] = best;
                arg[o * inner + r] = bi;
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, vals)?;
        let v = self.push(
            "max_over_axis",
            out,
            Op::MaxOverAxis {
                x,
                axis,
                argmax: arg.clone(),
            },
            &[x],
        )?;
        Ok((v, arg))
    }

    // ---- convolutions ------------------------------------------------

    /// Depthwise 3D convolution. `kernel` is `[C, k, k, k]`; `same` pads by
    /// `(k-1)/2` zeros, otherwise no padding.
    pub fn conv3d_depthwise(&mut self, x: Var, kernel: Var, stride: usize, same: bool) -> Result<Var> {
        let [n, c, h, w, d] = dims5(self.shape(x), "conv3d_depthwise")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[0] != c || ks[1] != ks[2] || ks[2] != ks[3] {
            return Err(Error::shape(
                "conv3d_depthwise",
                format!("kernel {ks:?} for {c} channels"),
            ));
        }
        let k = ks[1];
        let pad = if same { k.saturating_sub(1) / 2 } else { 0 };
        let geom = ConvGeom::new([h, w, d], k, stride, pad)?;
        let data = kernels::depthwise_conv(self.value(x).data(), self.value(kernel).data(), n, c, &geom);
        let [oh, ow, od] = geom.output;
        let out = Tensor::new(&[n, c, oh, ow, od], data)?;
        self.push("conv3d_depthwise", out, Op::DwConv { x, k: kernel, geom }, &[x, kernel])
    }

    /// Stride-2 depthwise transposed convolution doubling each spatial extent.
    /// It is the exact adjoint of `conv3d_depthwise(.., stride 2, same)` on
    /// the doubled grid.
    pub fn deconv3d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        if stride != 2 {
            return Err(Error::invalid("deconv3d", format!("stride {stride} unsupported; only 2")));
        }
        let [n, c, h, w, d] = dims5(self.shape(x), "deconv3d")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[0] != c || ks[1] != ks[2] || ks[2] != ks[3] {
            return Err(Error::shape("deconv3d", format!("kernel {ks:?} for {c} channels")));
        }
        let k = ks[1];
        let geom = ConvGeom::new([2 * h, 2 * w, 2 * d], k, 2, k.saturating_sub(1) / 2)?;
        if geom.output != [h, w, d] {
            return Err(Error::shape("deconv3d", format!("kernel {k} cannot invert stride 2")));
        }
        let data = kernels::depthwise_conv_transpose(self.value(x).data(), self.value(kernel).data(), n, c, &geom);
        let out = Tensor::new(&[n, c, 2 * h, 2 * w, 2 * d], data)?;
        self.push("deconv3d", out, Op::Deconv { x, k: kernel, geom }, &[x, kernel])
    }

    /// 1x1x1 convolution: `weight` is `[Cout, Cin]`, `bias` is `[Cout]`.
    pub fn conv3d_pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, cin, h, w, d] = dims5(self.shape(x), "conv3d_pointwise")?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[1] != cin || self.shape(bias) != [ws[0]] {
            return Err(Error::shape(
                "conv3d_pointwise",
                format!("weight {ws:?}, bias {:?} for {cin} input channels", self.shape(bias)),
            ));
        }
        let cout = ws[0];
        let s = h * w * d;
        let data = kernels::pointwise(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            cin,
            cout,
            s,
        );
        let out = Tensor::new(&[n, cout, h, w, d], data)?;
        self.push("conv3d_pointwise", out, Op::Pointwise { x, w: weight, b: bias }, &[x, weight, bias])
    }

    /// `x: [P, K]`, `weight: [J, K]`, optional `bias: [J]` -> `[P, J]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let (p, k, j) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut data = vec![R::zero(); p * j];
        data.par_chunks_mut(j.max(1)).enumerate().for_each(|(r, row)| {
            let xr = &xv[r * k..(r + 1) * k];
            for (o, out) in row.iter_mut().enumerate() {
                let b = bv.map_or(R::zero(), |b| b[o]);
                *out = kernels::dot(xr, &wv[o * k..(o + 1) * k]) + b;
            }
        });
        let out = Tensor::new(&[p, j], data)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("linear", out, Op::Linear { x, w: weight, b: bias }, &inputs)
    }

    // ---- normalization -------------------------------------------------

    /// Zero-mean unit-variance normalization per (sample, group), no affine.
    pub fn normalize_groups(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(Error::invalid(
                "group_norm",
                format!("{} channels not divisible into {groups} groups", s.get(1).copied().unwrap_or(0)),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let block = s[1] / groups * inner;
        let (data, _mean, rstd) = kernels::normalize_blocks(self.value(x).data(), block, eps);
        let out = Tensor::new(&s, data)?;
        self.push("group_norm", out, Op::Normalize { x, block, rstd }, &[x])
    }

    /// Per-channel `x * gamma[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s.get(1).copied().unwrap_or(0);
        if s.len() < 2 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("channel_affine", format!("x {s:?} gamma {:?}", self.shape(gamma))));
        }
        let inner: usize = s[2..].iter().product();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let out = Tensor::new(&s, data)?;
        self.push("channel_affine", out, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_groups(x, groups, eps)?;
        self.channel_affine(n, gamma, beta)
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let c = *self
            .shape(x)
            .get(1)
            .ok_or_else(|| Error::shape("instance_norm", "missing channel axis"))?;
        self.normalize_groups(x, c, eps)
    }

    // ---- channel attention ---------------------------------------------

    /// Spatial mean per (sample, channel): `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let inv = R::lit(1.0 / inner as f64);
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| kernels::sum(c) * inv)
            .collect();
        let out = Tensor::new(&[s[0], s[1]], data)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// Scales each `(n, c)` slab of `x` by `s[n, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || self.shape(s) != [xs[0], xs[1]] {
            return Err(Error::shape("channel_scale", format!("x {xs:?}, s {:?}", self.shape(s))));
        }
        let inner: usize = xs[2..].iter().product();
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / inner])
            .collect();
        let out = Tensor::new(&xs, data)?;
        self.push("channel_scale", out, Op::ChannelScale { x, s }, &[x, s])
    }

    // ---- fuzzy membership ----------------------------------------------

    /// Gaussian membership of every voxel under `m` functions per channel.
    /// `x: [N, C, ...]`, `mu, sigma: [m, C]` -> `[N, m, C, ...]`.
    pub fn gmf(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(mu).to_vec();
        if xs.len() < 3 || ms.len() != 2 || ms[1] != xs[1] || self.shape(sigma) != ms.as_slice() {
            return Err(Error::shape(
                "gmf_membership",
                format!("x {xs:?}, mu {ms:?}, sigma {:?}", self.shape(sigma)),
            ));
        }
        if self.value(sigma).data().iter().any(|&s| s <= R::zero()) {
            return Err(Error::invalid("gmf_membership", "sigma must be strictly positive"));
        }
        let (n, c, m) = (xs[0], xs[1], ms[0]);
        let inner: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let (mv, sv) = (self.value(mu).data(), self.value(sigma).data());
        let mut data = vec![R::zero(); n * m * c * inner];
        data.par_chunks_mut(inner).enumerate().for_each(|(idx, row)| {
            let ch = idx % c;
            let i = (idx / c) % m;
            let b = idx / (c * m);
            let (mu, sig) = (mv[i * c + ch], sv[i * c + ch]);
            let k = -R::one() / (R::lit(2.0) * sig * sig);
            let src = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
            for (o, &v) in row.iter_mut().zip(src) {
                let d = v - mu;
                *o = (d * d * k).exp();
            }
        });
        let mut shape = vec![n, m];
        shape.extend_from_slice(&xs[1..]);
        let out = Tensor::new(&shape, data)?;
        self.push("gmf_membership", out, Op::Gmf { x, mu, sigma }, &[x, mu, sigma])
    }

    // ---- point features ------------------------------------------------

    /// Gathers the 3x3x3 neighbourhood of each point from sample `sample`
    /// of `src: [N, C, H, W, D]`. Output row layout is offset-major then
    /// channel; neighbours outside the volume read as zero.
    pub fn gather_cube(
        &mut self,
        src: Var,
        sample: usize,
        points: &[[usize; 3]],
        include_center: bool,
    ) -> Result<Var> {
        self.gather(src, sample, points, cube_offsets(include_center))
    }

    /// Feature vector at each point: `[P, C]`.
    pub fn gather_points(&mut self, src: Var, sample: usize, points: &[[usize; 3]]) -> Result<Var> {
        self.gather(src, sample, points, vec![[0, 0, 0]])
    }

    fn gather(
        &mut self,
        src: Var,
        sample: usize,
        points: &[[usize; 3]],
        offsets: Vec<[isize; 3]>,
    ) -> Result<Var> {
        let [n, c, h, w, d] = dims5(self.shape(src), "gather_cube")?;
        if sample >= n {
            return Err(Error::invalid("gather_cube", format!("sample {sample} of {n}")));
        }
        if let Some(p) = points.iter().find(|p| p[0] >= h || p[1] >= w || p[2] >= d) {
            return Err(Error::invalid(
                "gather_cube",
                format!("centroid {p:?} outside {:?}", [h, w, d]),
            ));
        }
        let row = offsets.len() * c;
        let vox = h * w * d;
        let base = sample * c * vox;
        let last = kernels::channel_last(&self.value(src).data()[base..base + c * vox], c);
        let mut data = vec![R::zero(); points.len() * row];
        data.par_chunks_mut(row.max(1)).zip(points.par_iter()).for_each(|(out, p)| {
            for (oi, off) in offsets.iter().enumerate() {
                if let Some(lin) = neighbour(*p, *off, [h, w, d]) {
                    out[oi * c..(oi + 1) * c].copy_from_slice(&last[lin * c..(lin + 1) * c]);
                }
            }
        });
        let out = Tensor::new(&[points.len(), row], data)?;
        self.push(
            "gather_cube",
            out,
            Op::Gather {
                src,
                sample,
                points: points.to_vec(),
                offsets,
            },
            &[src],
        )
    }

    /// Repeats a `[J]` vector as `rows` rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        if vs.len() != 1 {
            return Err(Error::shape("broadcast_rows", format!("{vs:?}")));
        }
        let vals = self.value(v).data().to_vec();
        let data = (0..rows).flat_map(|_| vals.iter().copied()).collect();
        let out = Tensor::new(&[rows, vs[0]], data)?;
        self.push("broadcast_rows", out, Op::BroadcastRows(v), &[v])
    }

    // ---- losses --------------------------------------------------------

    /// `1 - (2 sum(p y) + eps) / (sum p + sum y + eps)`.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor<R>, eps: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape("dice_loss", format!("{:?} vs {:?}", self.shape(p), target.shape())));
        }
        let pv = self.value(p).data();
        let y = target.data();
        let e = R::lit(eps);
        let num = R::lit(2.0) * kernels::dot(pv, y) + e;
        let den = kernels::sum(pv) + kernels::sum(y) + e;
        let out = Tensor::scalar(R::one() - num / den);
        self.push(
            "dice_loss",
            out,
            Op::Dice {
                p,
                y: y.to_vec(),
                eps: e,
            },
            &[p],
        )
    }

    /// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor<R>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape("bce_loss", format!("{:?} vs {:?}", self.shape(p), target.shape())));
        }
        let lo = R::lit(BCE_CLAMP);
        let hi = R::one() - lo;
        let pv = self.value(p).data();
        let y = target.data();
        let total = pv.iter().zip(y).fold(R::zero(), |acc, (&pv, &yv)| {
            let q = pv.max(lo).min(hi);
            acc - (yv * q.ln() + (R::one() - yv) * (R::one() - q).ln())
        });
        let out = Tensor::scalar(total / R::lit(pv.len().max(1) as f64));
        self.push("bce_loss", out, Op::Bce { p, y: y.to_vec() }, &[p])
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<R>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), R::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contrib) in self.vjp(i, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    /// Discrete state of every non-smooth op in the graph: the sign pattern
    /// of leaky-ReLU inputs and the winners of each max. Two forward passes
    /// with equal signatures evaluate the same smooth branch.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(x, _) => {
                    sig.extend(self.value(*x).data().iter().map(|&v| u32::from(v > R::zero())));
                }
                Op::MaxOverAxis { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    fn vjp(&self, i: usize, g: &Tensor<R>) -> Result<Vec<(Var, Tensor<R>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let like = |v: &Var, data: Vec<R>| Tensor::new(val(v).shape(), data).unwrap();
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let da = gd.iter().zip(val(b).data()).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(val(a).data()).map(|(&g, &x)| g * x).collect();
                vec![(*a, like(a, da)), (*b, like(b, db))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::ScaleByVar { x, s } => {
                let sv = val(s).item();
                let ds = kernels::dot(gd, val(x).data());
                vec![(*x, g.map(|v| v * sv)), (*s, like(s, vec![ds]))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = R::lit(val(x).len() as f64);
                vec![(*x, Tensor::full(val(x).shape(), gd[0] / n))]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(x).shape())?)],
            Op::Concat { parts } => {
                let n = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let total = out.shape()[1] * inner;
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let block = val(p).shape()[1] * inner;
                    let mut d = Vec::with_capacity(n * block);
                    for b in 0..n {
                        d.extend_from_slice(&gd[b * total + offset..b * total + offset + block]);
                    }
                    offset += block;
                    res.push((*p, like(p, d)));
                }
                res
            }
            Op::MaxOverAxis { x, axis, argmax } => {
                let s = val(x).shape();
                let m = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![R::zero(); val(x).len()];
                for (j, (&gv, &a)) in gd.iter().zip(argmax).enumerate() {
                    let (o, r) = (j / inner, j % inner);
                    let src = (o * m + a as usize) * inner + r;
                    dx[src] = dx[src] + gv;
                }
                vec![(*x, like(x, dx))]
            }
            Op::DwConv { x, k, geom } => {
                let [n, c, ..] = dims5(val(x).shape(), "conv3d_depthwise")?;
                let dx = kernels::depthwise_conv_transpose(gd, val(k).data(), n, c, geom);
                let dk = kernels::depthwise_kernel_grad(gd, val(x).data(), n, c, geom);
                vec![(*x, like(x, dx)), (*k, like(k, dk))]
            }
            Op::Deconv { x, k, geom } => {
                let [n, c, ..] = dims5(val(x).shape(), "deconv3d")?;
                let dx = kernels::depthwise_conv(gd, val(k).data(), n, c, geom);
                let dk = kernels::depthwise_kernel_grad(val(x).data(), gd, n, c, geom);
                vec![(*x, like(x, dx)), (*k, like(k, dk))]
            }
            Op::Pointwise { x, w, b } => {
                let [n, cin, h, ww, d] = dims5(val(x).shape(), "conv3d_pointwise")?;
                let cout = val(w).shape()[0];
                let (dx, dw, db) =
                    kernels::pointwise_backward(gd, val(x).data(), val(w).data(), n, cin, cout, h * ww * d);
                vec![(*x, like(x, dx)), (*w, like(w, dw)), (*b, like(b, db))]
            }
            Op::Linear { x, w, b } => {
                let (p, k) = (val(x).shape()[0], val(x).shape()[1]);
                let j = val(w).shape()[0];
                let (xv, wv) = (val(x).data(), val(w).data());
                let mut dx = vec![R::zero(); p * k];
                dx.par_chunks_mut(k.max(1)).enumerate().for_each(|(r, row)| {
                    for o in 0..j {
                        kernels::axpy(gd[r * j + o], &wv[o * k..(o + 1) * k], row);
                    }
                });
                let mut dw = vec![R::zero(); j * k];
                // row blocks keep a slice of x hot while every output row consumes it
                const ROWS: usize = 32;
                dw.par_chunks_mut(k.max(1) * 8).enumerate().for_each(|(chunk, rows)| {
                    for r0 in (0..p).step_by(ROWS) {
                        for (i, row) in rows.chunks_mut(k.max(1)).enumerate() {
                            let o = chunk * 8 + i;
                            for r in r0..(r0 + ROWS).min(p) {
                                kernels::axpy(gd[r * j + o], &xv[r * k..(r + 1) * k], row);
                            }
                        }
                    }
                });
                let mut res = vec![(*x, like(x, dx)), (*w, like(w, dw))];
                if let Some(b) = b {
                    let db = (0..j)
                        .map(|o| (0..p).fold(R::zero(), |a, r| a + gd[r * j + o]))
                        .collect();
                    res.push((*b, like(b, db)));
                }
                res
            }
            Op::Normalize { x, block, rstd } => {
                let dx = kernels::normalize_blocks_backward(gd, out.data(), rstd, *block);
                vec![(*x, like(x, dx))]
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let s = val(x).shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let gv = val(gamma).data();
                let xv = val(x).data();
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gr)| gr * gv[(i / inner) % c])
                    .collect();
                let mut dg = vec![R::zero(); c];
                let mut dbeta = vec![R::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        dg[ch] = dg[ch] + kernels::dot(&gd[r.clone()], &xv[r.clone()]);
                        dbeta[ch] = dbeta[ch] + kernels::sum(&gd[r]);
                    }
                }
                vec![(*x, like(x, dx)), (*gamma, like(gamma, dg)), (*beta, like(beta, dbeta))]
            }
            Op::Gelu { x, gate } => {
                let dx = gd
                    .iter()
                    .zip(val(x).data())
                    .zip(gate)
                    .map(|((&g, &v), &s)| g * gelu_grad(v, s))
                    .collect();
                vec![(*x, like(x, dx))]
            }
            Op::LeakyRelu(x, s) => {
                let dx = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(&g, &v)| if v > R::zero() { g } else { g * *s })
                    .collect();
                vec![(*x, like(x, dx))]
            }
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (R::one() - y))
                    .collect();
                vec![(*x, like(x, dx))]
            }
            Op::Softplus(x) => {
                let dx = gd.iter().zip(val(x).data()).map(|(&g, &v)| g * sigmoid(v)).collect();
                vec![(*x, like(x, dx))]
            }
            Op::GlobalAvgPool(x) => {
                let inner: usize = val(x).shape()[2..].iter().product();
                let inv = R::lit(1.0 / inner as f64);
                let dx = (0..val(x).len()).map(|i| gd[i / inner] * inv).collect();
                vec![(*x, like(x, dx))]
            }
            Op::ChannelScale { x, s } => {
                let inner: usize = val(x).shape()[2..].iter().product();
                let (xv, sv) = (val(x).data(), val(s).data());
                let dx = gd.iter().enumerate().map(|(i, &g)| g * sv[i / inner]).collect();
                let ds = (0..sv.len())
                    .map(|j| kernels::dot(&gd[j * inner..(j + 1) * inner], &xv[j * inner..(j + 1) * inner]))
                    .collect();
                vec![(*x, like(x, dx)), (*s, like(s, ds))]
            }
            Op::Gmf { x, mu, sigma } => {
                let xs = val(x).shape();
                let (n, c) = (xs[0], xs[1]);
                let m = val(mu).shape()[0];
                let inner: usize = xs[2..].iter().product();
                let (xv, mv, sv) = (val(x).data(), val(mu).data(), val(sigma).data());
                let f = out.data();
                let mut dx = vec![R::zero(); xv.len()];
                let mut dmu = vec![R::zero(); m * c];
                let mut dsig = vec![R::zero(); m * c];
                for b in 0..n {
                    for i in 0..m {
                        for ch in 0..c {
                            let (mu, s) = (mv[i * c + ch], sv[i * c + ch]);
                            let inv_s2 = R::one() / (s * s);
                            let xo = (b * c + ch) * inner;
                            let fo = ((b * m + i) * c + ch) * inner;
                            let (mut am, mut as_) = (R::zero(), R::zero());
                            for r in 0..inner {
                                let d = xv[xo + r] - mu;
                                let gf = gd[fo + r] * f[fo + r];
                                let t = gf * d * inv_s2;
                                dx[xo + r] = dx[xo + r] - t;
                                am = am + t;
                                as_ = as_ + t * d;
                            }
                            dmu[i * c + ch] = dmu[i * c + ch] + am;
                            dsig[i * c + ch] = dsig[i * c + ch] + as_ / s;
                        }
                    }
                }
                vec![(*x, like(x, dx)), (*mu, like(mu, dmu)), (*sigma, like(sigma, dsig))]
            }
            Op::Gather {
                src,
                sample,
                points,
                offsets,
            } => {
                let [_, c, h, w, d] = dims5(val(src).shape(), "gather_cube")?;
                let offs = offsets;
                let row = offs.len() * c;
                let vox = h * w * d;
                let base = sample * c * vox;
                let mut acc = vec![R::zero(); vox * c];
                for (pi, p) in points.iter().enumerate() {
                    for (oi, off) in offs.iter().enumerate() {
                        if let Some(lin) = neighbour(*p, *off, [h, w, d]) {
                            let from = &gd[pi * row + oi * c..pi * row + (oi + 1) * c];
                            for (a, &b) in acc[lin * c..(lin + 1) * c].iter_mut().zip(from) {
                                *a = *a + b;
                            }
                        }
                    }
                }
                let mut ds = vec![R::zero(); val(src).len()];
                kernels::channel_first_into(&acc, c, &mut ds[base..base + c * vox]);
                vec![(*src, like(src, ds))]
            }
            Op::BroadcastRows(v) => {
                let j = val(v).len();
                let mut dv = vec![R::zero(); j];
                for r in gd.chunks(j.max(1)) {
                    for (a, &b) in dv.iter_mut().zip(r) {
                        *a = *a + b;
                    }
                }
                vec![(*v, like(v, dv))]
            }
            Op::Dice { p, y, eps } => {
                let pv = val(p).data();
                let num = R::lit(2.0) * kernels::dot(pv, y) + *eps;
                let den = kernels::sum(pv) + kernels::sum(y) + *eps;
                let g0 = gd[0];
                let den2 = den * den;
                let dp = y
                    .iter()
                    .map(|&yv| -g0 * (R::lit(2.0) * yv * den - num) / den2)
                    .collect();
                vec![(*p, like(p, dp))]
            }
            Op::Bce { p, y } => {
                let lo = R::lit(BCE_CLAMP);
                let hi = R::one() - lo;
                let pv = val(p).data();
                let scale = gd[0] / R::lit(pv.len().max(1) as f64);
                let dp = pv
                    .iter()
                    .zip(y)
                    .map(|(&q, &yv)| {
                        if q < lo || q > hi {
                            R::zero()
                        } else {
                            -scale * (yv / q - (R::one() - yv) / (R::one() - q))
                        }
                    })
                    .collect();
                vec![(*p, like(p, dp))]
            }
        })
    }
}

fn cube_offsets(include_center: bool) -> Vec<[isize; 3]> {
    CUBE_OFFSETS
        .iter()
        .enumerate()
        .filter(|(i, _)| include_center || *i != 13)
        .map(|(_, o)| *o)
        .collect()
}

fn neighbour(p: [usize; 3], off: [isize; 3], dims: [usize; 3]) -> Option<usize> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + off[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some((q[0] * dims[1] + q[1]) * dims[2] + q[2])
}

