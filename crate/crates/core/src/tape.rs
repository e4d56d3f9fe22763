//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to propagate an upstream gradient back to its inputs. Nodes are never
//! mutated after they are recorded, so replaying the tape backward from a
//! scalar output yields exact gradients for every leaf that asked for one.
//!
//! Broadcasting is deliberately narrow: the right operand of `add`, `sub` and
//! `mul` may either match the left operand or repeat it along trailing
//! singleton axes (e.g. `[B,h,w,1]` against `[B,h,w,c]`). Bias addition and
//! per-channel scaling have their own ops.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{lit, matmul_into, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Per-axis sampling table for half-pixel bilinear resizing.
#[derive(Clone, Debug)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut table = AxisTable {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            table.lo.push(lo);
            table.hi.push((lo + 1).min(src - 1));
            table.frac.push(pos - lo as f64);
        }
        table
    }
}

#[derive(Clone, Debug)]
struct ResizeGeom {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    ys: AxisTable,
    xs: AxisTable,
}

enum Op<T> {
    Constant,
    Param(String),
    Watched,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannels(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Var, Var),
    Resize {
        x: Var,
        geom: Box<ResizeGeom>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    /// Scalar whose input gradients were computed alongside its value.
    Loss(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
    by_var: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a named parameter; `None` if the output did not depend on it.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Gradient for a watched or parameter leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

/// Records operations for one forward pass. Confined to a single thread.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    names: HashSet<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_block(big: &[usize], small: &[usize]) -> Option<usize> {
    if big == small {
        return Some(1);
    }
    if big.len() != small.len() {
        return None;
    }
    let split = small.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if big[..split] != small[..split] {
        return None;
    }
    Some(big[split..].iter().product())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Input columns `[ix_lo, ix_hi)` touched by a kernel row at output column `ox`,
/// and the first tap they map to.
#[inline]
fn tap_span(g: &ConvGeom, ox: usize) -> (usize, usize, usize) {
    let start = (ox * g.stride) as isize - g.pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + g.kernel as isize).min(g.in_w as isize)).max(0) as usize;
    (lo, hi.max(lo), (lo as isize - start) as usize)
}

// Each kernel row reads `kernel · in_c` contiguous input values, so rows are
// copied whole rather than tap by tap.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let krow = g.kernel * g.in_c;
    let mut cols = vec![T::zero(); g.out_pixels() * patch];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                let (lo, hi, first) = tap_span(g, ox);
                let len = (hi - lo) * g.in_c;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = ((b * g.in_h + iy as usize) * g.in_w + lo) * g.in_c;
                    let dst = row + ky * krow + first * g.in_c;
                    cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let krow = g.kernel * g.in_c;
    let mut dx = vec![T::zero(); g.batch * g.in_h * g.in_w * g.in_c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                let (lo, hi, first) = tap_span(g, ox);
                let len = (hi - lo) * g.in_c;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = ((b * g.in_h + iy as usize) * g.in_w + lo) * g.in_c;
                    let src = row + ky * krow + first * g.in_c;
                    for (d, s) in dx[dst..dst + len].iter_mut().zip(&dcols[src..src + len]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    dx
}

fn add_bias_rows<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

fn sum_rows<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
    acc
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            names: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A named learnable leaf. Names are unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::Argument(format!("parameter `{name}` registered twice")));
        }
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    /// An anonymous leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn watch(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Watched, true)
    }

    /// Records a scalar whose gradients with respect to `inputs` are already known.
    ///
    /// Each gradient tensor must match the dims of its input.
    pub fn custom_scalar(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.dims() != self.dims(*v) {
                return Err(Error::shape(format!(
                    "custom gradient dims {:?} do not match input dims {:?}",
                    g.dims(),
                    self.dims(*v)
                )));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        let inputs = inputs
            .into_iter()
            .filter(|(v, _)| self.nodes[v.0].requires_grad)
            .collect();
        Ok(self.push(Tensor::scalar(value), Op::Loss(inputs), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x[..., in] · w[in, out] + b[out]` over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let (fan_in, fan_out) = self.value(w).as_matrix("linear weight")?;
        if xd.last() != Some(&fan_in) {
            return Err(Error::shape(format!(
                "linear: input dims {xd:?} do not end in {fan_in}"
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != [fan_out] {
                return Err(Error::shape(format!(
                    "linear: bias dims {:?}, expected [{fan_out}]",
                    self.dims(b)
                )));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        matmul_into(rows, fan_in, fan_out, self.data(x), false, self.data(w), false, &mut out, false);
        if let Some(b) = b {
            add_bias_rows(&mut out, self.data(b));
        }
        let mut od = xd;
        *od.last_mut().unwrap() = fan_out;
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(&od, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Square-kernel convolution on NHWC input with weights `[k, k, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, in_h, in_w, in_c) = match self.dims(x) {
            &[b, h, w, c] => (b, h, w, c),
            d => return Err(Error::shape(format!("conv2d: input must be NHWC, got {d:?}"))),
        };
        let (kernel, out_c) = match self.dims(w) {
            &[kh, kw, ci, co] if kh == kw && ci == in_c => (kh, co),
            d => {
                return Err(Error::shape(format!(
                    "conv2d: weight dims {d:?} incompatible with {in_c} input channels"
                )))
            }
        };
        if stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(Error::shape(format!(
                "conv2d: kernel {kernel} stride {stride} pad {pad} does not fit {in_h}x{in_w}"
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != [out_c] {
                return Err(Error::shape(format!("conv2d: bias dims {:?}", self.dims(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
            out_c,
            kernel,
            stride,
            pad,
        };
        let cols = im2col(self.data(x), &geom);
        let m = geom.out_pixels();
        let mut out = vec![T::zero(); m * out_c];
        matmul_into(m, geom.patch_len(), out_c, &cols, false, self.data(w), false, &mut out, false);
        if let Some(b) = b {
            add_bias_rows(&mut out, self.data(b));
        }
        let value = Tensor::new(&[batch, geom.out_h, geom.out_w, out_c], out)?;
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize)> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        let block = broadcast_block(ad, bd).ok_or_else(|| {
            Error::shape(format!("{what}: cannot broadcast {bd:?} onto {ad:?}"))
        })?;
        let (av, bv) = (self.data(a), self.data(b));
        let data = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i / block]))
            .collect();
        Ok((Tensor::new(ad, data)?, block))
    }

    /// Orders operands of a commutative op so the right one is the broadcast one.
    fn commute(&self, a: Var, b: Var) -> (Var, Var) {
        if self.value(a).len() < self.value(b).len() {
            (b, a)
        } else {
            (a, b)
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.commute(a, b);
        let (out, _) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.commute(a, b);
        let (out, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[B, ..., c] * v[B, c]`: scales every spatial position by a per-sample channel vector.
    pub fn mul_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let xd = self.dims(x);
        let vd = self.dims(v);
        if xd.len() < 2 || vd.len() != 2 || vd[0] != xd[0] || vd[1] != *xd.last().unwrap() {
            return Err(Error::shape(format!(
                "mul_channels: {vd:?} does not match channels of {xd:?}"
            )));
        }
        let (batch, c) = (vd[0], vd[1]);
        let per_sample = self.value(x).len() / batch;
        let xv = self.data(x);
        let vv = self.data(v);
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..batch {
            let scale = &vv[b * c..(b + 1) * c];
            for row in xv[b * per_sample..(b + 1) * per_sample].chunks_exact(c) {
                out.extend(row.iter().zip(scale).map(|(a, s)| *a * *s));
            }
        }
        let value = Tensor::new(self.dims(x), out)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::MulChannels(x, v), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value(x).map(T::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / lit::<T>(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != bd.len() || ad[..ad.len() - 1] != bd[..bd.len() - 1] {
            return Err(Error::shape(format!("concat: {ad:?} vs {bd:?}")));
        }
        let (ca, cb) = (*ad.last().unwrap(), *bd.last().unwrap());
        let mut od = ad.to_vec();
        *od.last_mut().unwrap() = ca + cb;
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.chunks_exact(ca).zip(bv.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(&od, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Bilinear resize of NHWC input with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (batch, in_h, in_w, channels) = match self.dims(x) {
            &[b, h, w, c] => (b, h, w, c),
            d => return Err(Error::shape(format!("resize: input must be NHWC, got {d:?}"))),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize: zero-sized target"));
        }
        let geom = ResizeGeom {
            batch,
            channels,
            in_h,
            in_w,
            ys: AxisTable::new(in_h, out_h),
            xs: AxisTable::new(in_w, out_w),
        };
        let xv = self.data(x);
        let mut out = vec![T::zero(); batch * out_h * out_w * channels];
        for b in 0..batch {
            for oy in 0..out_h {
                let (y0, y1) = (geom.ys.lo[oy], geom.ys.hi[oy]);
                let fy: T = lit(geom.ys.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1) = (geom.xs.lo[ox], geom.xs.hi[ox]);
                    let fx: T = lit(geom.xs.frac[ox]);
                    let taps = [
                        (y0, x0, (T::one() - fy) * (T::one() - fx)),
                        (y0, x1, (T::one() - fy) * fx),
                        (y1, x0, fy * (T::one() - fx)),
                        (y1, x1, fy * fx),
                    ];
                    let dst = ((b * out_h + oy) * out_w + ox) * channels;
                    for (yy, xx, wgt) in taps {
                        if wgt == T::zero() {
                            continue;
                        }
                        let src = ((b * in_h + yy) * in_w + xx) * channels;
                        for c in 0..channels {
                            out[dst + c] += wgt * xv[src + c];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, out_h, out_w, channels], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resize { x, geom: Box::new(geom) }, rg))
    }

    /// `[B, h, w, c] -> [B, c]` maximum over spatial positions.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, pixels, c) = self.spatial_layout(x, "global_max_pool")?;
        let xv = self.data(x);
        let mut out = vec![T::neg_infinity(); batch * c];
        let mut argmax = vec![0usize; batch * c];
        for b in 0..batch {
            for p in 0..pixels {
                let base = (b * pixels + p) * c;
                for k in 0..c {
                    if xv[base + k] > out[b * c + k] {
                        out[b * c + k] = xv[base + k];
                        argmax[b * c + k] = base + k;
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// `[B, h, w, c] -> [B, c]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, pixels, c) = self.spatial_layout(x, "global_avg_pool")?;
        let xv = self.data(x);
        let mut out = vec![T::zero(); batch * c];
        for b in 0..batch {
            for p in 0..pixels {
                let base = (b * pixels + p) * c;
                for k in 0..c {
                    out[b * c + k] += xv[base + k];
                }
            }
        }
        let inv = T::one() / lit::<T>(pixels as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[batch, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    fn spatial_layout(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.dims(x) {
            &[b, h, w, c] => Ok((b, h * w, c)),
            d => Err(Error::shape(format!("{what}: expected [B,h,w,c], got {d:?}"))),
        }
    }

    /// Selects rows of a `[N, d]` matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows: no rows selected"));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(format!("gather_rows: row {bad} out of {n}")));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(&[rows.len(), d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row of a `[N, d]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).as_matrix("l2_normalize_rows")?;
        let floor: T = lit(1e-12);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks_exact(d) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|v| *v / norm));
        }
        let value = Tensor::new(self.dims(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.value(output).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got dims {:?}",
                self.dims(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        let mut result = Gradients {
            by_name: BTreeMap::new(),
            by_var: BTreeMap::new(),
        };

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn propagate(
        &self,
        idx: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        result: &mut Gradients<T>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contribution: Vec<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => {
                let t = Tensor::new(node.value.dims(), g)?;
                result.by_var.insert(Var(idx), t.clone());
                result.by_name.insert(name.clone(), t);
            }
            Op::Watched => {
                result.by_var.insert(Var(idx), Tensor::new(node.value.dims(), g)?);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix("matmul")?;
                let n = self.value(*b).dims()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(m, n, k, &g, false, self.data(*b), true, &mut da, false);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(k, m, n, self.data(*a), true, &g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (fan_in, fan_out) = self.value(*w).as_matrix("linear")?;
                let rows = self.value(*x).len() / fan_in;
                if wants(*x) {
                    let mut dx = vec![T::zero(); rows * fan_in];
                    matmul_into(rows, fan_out, fan_in, &g, false, self.data(*w), true, &mut dx, false);
                    send(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); fan_in * fan_out];
                    matmul_into(fan_in, rows, fan_out, self.data(*x), true, &g, false, &mut dw, false);
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        send(*b, sum_rows(&g, fan_out));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let m = geom.out_pixels();
                let patch = geom.patch_len();
                if wants(*w) {
                    let mut dw = vec![T::zero(); patch * geom.out_c];
                    matmul_into(patch, m, geom.out_c, cols, true, &g, false, &mut dw, false);
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        send(*b, sum_rows(&g, geom.out_c));
                    }
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); m * patch];
                    matmul_into(m, geom.out_c, patch, &g, false, self.data(*w), true, &mut dcols, false);
                    send(*x, col2im(&dcols, geom));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                let block = broadcast_block(self.dims(*a), self.dims(*b)).expect("checked in forward");
                if wants(*b) {
                    let mut db: Vec<T> = g.chunks_exact(block).map(|c| c.iter().copied().sum()).collect();
                    if negate {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, db);
                }
                if wants(*a) {
                    send(*a, g);
                }
            }
            Op::Mul(a, b) => {
                let block = broadcast_block(self.dims(*a), self.dims(*b)).expect("checked in forward");
                let (av, bv) = (self.data(*a), self.data(*b));
                if wants(*b) {
                    let db = g
                        .chunks_exact(block)
                        .zip(av.chunks_exact(block))
                        .map(|(gc, ac)| gc.iter().zip(ac).map(|(x, y)| *x * *y).sum())
                        .collect();
                    send(*b, db);
                }
                if wants(*a) {
                    let da = g.iter().enumerate().map(|(i, x)| *x * bv[i / block]).collect();
                    send(*a, da);
                }
            }
            Op::MulChannels(x, v) => {
                let vd = self.dims(*v);
                let (batch, c) = (vd[0], vd[1]);
                let per_sample = self.value(*x).len() / batch;
                let (xv, vv) = (self.data(*x), self.data(*v));
                if wants(*v) {
                    let mut dv = vec![T::zero(); batch * c];
                    for b in 0..batch {
                        let span = b * per_sample..(b + 1) * per_sample;
                        for (gr, xr) in g[span.clone()].chunks_exact(c).zip(xv[span].chunks_exact(c)) {
                            for k in 0..c {
                                dv[b * c + k] += gr[k] * xr[k];
                            }
                        }
                    }
                    send(*v, dv);
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for b in 0..batch {
                        let scale = &vv[b * c..(b + 1) * c];
                        for gr in g[b * per_sample..(b + 1) * per_sample].chunks_exact(c) {
                            dx.extend(gr.iter().zip(scale).map(|(a, s)| *a * *s));
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Scale(x, f) => send(*x, g.into_iter().map(|v| v * *f).collect()),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)).collect());
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(g, y)| *g * (T::one() - *y * *y)).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(g, y)| *g * *y).collect());
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                send(*x, g.iter().zip(xv).map(|(g, v)| *g / *v).collect());
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / lit::<T>(n as f64); n]);
            }
            Op::Reshape(x) => send(*x, g),
            Op::Concat(a, b) => {
                let ca = *self.dims(*a).last().unwrap();
                let cb = *self.dims(*b).last().unwrap();
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Resize { x, geom } => {
                let (out_h, out_w, c) = (geom.ys.lo.len(), geom.xs.lo.len(), geom.channels);
                let mut dx = vec![T::zero(); geom.batch * geom.in_h * geom.in_w * c];
                for b in 0..geom.batch {
                    for oy in 0..out_h {
                        let (y0, y1) = (geom.ys.lo[oy], geom.ys.hi[oy]);
                        let fy: T = lit(geom.ys.frac[oy]);
                        for ox in 0..out_w {
                            let (x0, x1) = (geom.xs.lo[ox], geom.xs.hi[ox]);
                            let fx: T = lit(geom.xs.frac[ox]);
                            let taps = [
                                (y0, x0, (T::one() - fy) * (T::one() - fx)),
                                (y0, x1, (T::one() - fy) * fx),
                                (y1, x0, fy * (T::one() - fx)),
                                (y1, x1, fy * fx),
                            ];
                            let src = ((b * out_h + oy) * out_w + ox) * c;
                            for (yy, xx, wgt) in taps {
                                if wgt == T::zero() {
                                    continue;
                                }
                                let dst = ((b * geom.in_h + yy) * geom.in_w + xx) * c;
                                for k in 0..c {
                                    dx[dst + k] += wgt * g[src + k];
                                }
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += *gv;
                }
                send(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (batch, pixels, c) = self.spatial_layout(*x, "global_avg_pool")?;
                let inv = T::one() / lit::<T>(pixels as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for b in 0..batch {
                    let row = &g[b * c..(b + 1) * c];
                    for _ in 0..pixels {
                        dx.extend(row.iter().map(|v| *v * inv));
                    }
                }
                send(*x, dx);
            }
            Op::GatherRows { x, rows } => {
                let d = self.dims(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (gr, &r) in g.chunks_exact(d).zip(rows) {
                    for (t, s) in dx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                        *t += *s;
                    }
                }
                send(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.dims(*x)[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), norm) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(norms) {
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, yv)| (*gv - *yv * dot) / *norm));
                }
                send(*x, dx);
            }
            Op::Loss(inputs) => {
                for (v, grad) in inputs {
                    send(*v, grad.data().iter().map(|x| *x * g[0]).collect());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, data).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.watch(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.watch(Tensor::zeros(&[4]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data(), &[0.5; 4]);
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_of_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[2.0]));
        let s = tape.sigmoid(x);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((tape.value(s).data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_stays_open_interval_in_f64() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[-30.0, -5.0, 5.0, 30.0]));
        let s = tape.sigmoid(x);
        assert!(tape.value(s).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn trailing_singleton_broadcast_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let ok = tape.constant(Tensor::zeros(&[2, 3, 1]));
        let ok2 = tape.constant(Tensor::zeros(&[2, 1, 1]));
        let bad = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let bad2 = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(tape.mul(x, ok).is_ok());
        assert!(tape.add(ok2, x).is_ok());
        assert!(matches!(tape.mul(x, bad), Err(Error::Shape(_))));
        assert!(matches!(tape.add(x, bad2), Err(Error::Shape(_))));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.watch(Tensor::zeros(&[3]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut tape = Tape::<f64>::new();
        tape.param("w", Tensor::zeros(&[1])).unwrap();
        assert!(tape.param("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn unreachable_params_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", t(&[1], &[2.0])).unwrap();
        let _b = tape.param("b", t(&[1], &[5.0])).unwrap();
        let y = tape.scale(a, 3.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[3.0]);
        assert!(g.get("b").is_none());
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 4x4 single channel, 3x3 kernel, stride 1, pad 1, one output channel
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let w = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(t(&[1, 4, 4, 1], &x));
        let wv = tape.constant(t(&[3, 3, 1, 1], &w));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let out = tape.value(y).data();
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut acc = 0.0;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += w[(ky * 3 + kx) as usize] * x[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert_eq!(out[(oy * 4 + ox) as usize], acc);
            }
        }
    }

    #[test]
    fn resize_identity_and_halving() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(t(&[1, 4, 4, 1], &x));
        let same = tape.resize_bilinear(xv, 4, 4).unwrap();
        assert_eq!(tape.value(same).data(), &x[..]);
        let half = tape.resize_bilinear(xv, 2, 2).unwrap();
        // half-pixel centres at scale 2 average each 2x2 block
        assert_eq!(tape.value(half).data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn max_and_avg_pool_on_constant_field_agree() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3, 4], 0.7));
        let mx = tape.global_max_pool(x).unwrap();
        let av = tape.global_avg_pool(x).unwrap();
        assert!(tape.value(mx).max_abs_diff(tape.value(av)).unwrap() < 1e-15);
    }
}
