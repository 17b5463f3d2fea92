//! Define-by-run reverse-mode tape.
//!
//! Maps use NHWC layout with an optional leading batch axis: a rank-3 input
//! is treated as a batch of one and keeps rank 3 on output.

use super::exec;
use super::linalg::{column_sums, gemm, gemm_tn_reduce};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Cross-entropy targets: class indices or probability rows.
#[derive(Clone, Debug)]
pub enum Targets<T> {
    Index(Vec<usize>),
    Probs(Vec<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding; the output extent must be integral.
    Explicit(usize),
    /// Output extent `ceil(in / stride)`, extra padding on the trailing side.
    Same,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    hout: usize,
    wout: usize,
    cout: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn rows(&self) -> usize {
        self.batch * self.hout * self.wout
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var, batch: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geo: ConvGeom, cols: Option<Vec<T>> },
    Relu { x: Var },
    AvgPool { x: Var, hw: usize, channels: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    WeightedSum { terms: Vec<(Var, T)> },
    Sum { x: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<T>, temperature: T, rows: usize },
    L2 { a: Var, b: Var },
    WeightedSqDist { x: Var, anchor: Vec<T>, weights: Vec<T>, coef: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::AvgPool { .. } => "global_avgpool",
            Op::Add { .. } => "residual_add",
            Op::Scale { .. } => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum { .. } => "sum",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::L2 { .. } => "l2_reconstruction",
            Op::WeightedSqDist { .. } => "weighted_sq_dist",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and runs one reverse pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    checked: bool,
    record: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-wise softmax of `logits / temperature` for an `rows × classes` block.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
        let mut sum = T::zero();
        for (p, &v) in o.iter_mut().zip(row) {
            *p = (v / temperature - max).exp();
            sum += *p;
        }
        o.iter_mut().for_each(|p| *p /= sum);
    }
    out
}

fn map_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(op, format!("expected a rank-3 or rank-4 map, got {shape:?}"))),
    }
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [b, n] => Ok((b, n)),
        _ => Err(Error::shape(op, format!("expected rank 1 or 2, got {shape:?}"))),
    }
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Explicit(p) => {
            let span = input + 2 * p;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-integral output extent: ({input}+2*{p}-{k})/{stride}"),
                ));
            }
            Ok(((span - k) / stride + 1, p))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false, checked: true, record: true }
    }

    /// A tape that never records gradient state; used for evaluation.
    pub fn inference() -> Self {
        Tape { record: false, ..Self::new() }
    }

    /// Toggles the per-op finiteness check (on by default).
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.checked && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = requires_grad && self.record;
        let op = if self.record { op } else { strip(op) };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, false, Op::Leaf)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `y = x·Wᵀ + b` for `x` of shape `[in]` or `[batch, in]` and `W` of `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, fan_in) = matrix_dims(self.shape(x), "dense")?;
        let (out, w_in) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape("dense", format!("weight must be [out, in], got {s:?}"))),
        };
        if w_in != fan_in || self.shape(b) != [out] {
            return Err(Error::shape(
                "dense",
                format!("x {:?}, W {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let mut y = vec![T::zero(); batch * out];
        gemm(batch, fan_in, out, self.value(x), false, self.value(w), true, &mut y, false);
        let bias = self.value(b);
        y.chunks_exact_mut(out)
            .for_each(|row| row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb));
        let shape = if self.shape(x).len() == 1 { vec![out] } else { vec![batch, out] };
        let rg = self.rg(&[x, w, b]);
        self.push(shape, y, rg, Op::Dense { x, w, b, batch })
    }

    /// Cross-correlation with kernel `[k, k, cin, cout]` and optional bias `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let x_shape = self.shape(x).to_vec();
        let (batch, h, wd, cin) = map_dims(&x_shape, "conv2d")?;
        let (k, cout) = match *self.shape(w) {
            [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            ref s => {
                return Err(Error::shape("conv2d", format!("kernel {s:?} does not fit input {x_shape:?}")))
            }
        };
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let (hout, pad_top) = out_extent(h, k, stride, padding)?;
        let (wout, pad_left) = out_extent(wd, k, stride, padding)?;
        let geo = ConvGeom { batch, h, w: wd, cin, k, stride, pad_top, pad_left, hout, wout, cout };

        let cols = if geo.is_pointwise() { None } else { Some(self.im2col(x, &geo)) };
        let mut y = vec![T::zero(); geo.rows() * cout];
        {
            let a = cols.as_deref().unwrap_or_else(|| self.value(x));
            gemm(geo.rows(), geo.patch(), cout, a, false, self.value(w), false, &mut y, false);
        }
        if let Some(b) = b {
            let bias = self.value(b);
            y.chunks_exact_mut(cout)
                .for_each(|row| row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb));
        }
        let shape = if x_shape.len() == 3 { vec![hout, wout, cout] } else { vec![batch, hout, wout, cout] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let cols = if rg { cols } else { None };
        self.push(shape, y, rg, Op::Conv { x, w, b, geo, cols })
    }

    fn im2col(&self, x: Var, g: &ConvGeom) -> Vec<T> {
        let src = self.value(x);
        let per_example = g.hout * g.wout * g.patch();
        let mut cols = vec![T::zero(); g.batch * per_example];
        exec::for_each_chunk_mut(&mut cols, per_example, |bi, dst| {
            let img = &src[bi * g.h * g.w * g.cin..(bi + 1) * g.h * g.w * g.cin];
            for oy in 0..g.hout {
                for ox in 0..g.wout {
                    let row = &mut dst[(oy * g.wout + ox) * g.patch()..][..g.patch()];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let s = (iy as usize * g.w + ix as usize) * g.cin;
                            let d = (ky * g.k + kx) * g.cin;
                            row[d..d + g.cin].copy_from_slice(&img[s..s + g.cin]);
                        }
                    }
                }
            }
        });
        cols
    }

    fn col2im(dcols: &[T], g: &ConvGeom) -> Vec<T> {
        let per_image = g.h * g.w * g.cin;
        let per_example = g.hout * g.wout * g.patch();
        let mut dx = vec![T::zero(); g.batch * per_image];
        exec::for_each_chunk_mut(&mut dx, per_image, |bi, img| {
            let src = &dcols[bi * per_example..(bi + 1) * per_example];
            for oy in 0..g.hout {
                for ox in 0..g.wout {
                    let row = &src[(oy * g.wout + ox) * g.patch()..][..g.patch()];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let s = (iy as usize * g.w + ix as usize) * g.cin;
                            let d = (ky * g.k + kx) * g.cin;
                            img[s..s + g.cin]
                                .iter_mut()
                                .zip(&row[d..d + g.cin])
                                .for_each(|(a, &v)| *a += v);
                        }
                    }
                }
            }
        });
        dx
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), y, rg, Op::Relu { x })
    }

    /// Mean over spatial positions: `[b, h, w, c] -> [b, c]`, `[h, w, c] -> [c]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, h, w, c) = map_dims(&shape, "global_avgpool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let src = self.value(x);
        let mut y = vec![T::zero(); batch * c];
        for (bi, out) in y.chunks_exact_mut(c).enumerate() {
            for pos in src[bi * hw * c..(bi + 1) * hw * c].chunks_exact(c) {
                out.iter_mut().zip(pos).for_each(|(o, &v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let out_shape = if shape.len() == 3 { vec![c] } else { vec![batch, c] };
        let rg = self.rg(&[x]);
        self.push(out_shape, y, rg, Op::AvgPool { x, hw, channels: c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("residual_add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), y, rg, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), y, rg, Op::Scale { x, c })
    }

    /// `Σ wᵢ·xᵢ` over same-shape inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let first = terms.first().ok_or(Error::Empty("weighted_sum terms"))?.0;
        let shape = self.shape(first).to_vec();
        let mut y = vec![T::zero(); numel(&shape)];
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{:?} vs {shape:?}", self.shape(v))));
            }
            y.iter_mut().zip(self.value(v)).for_each(|(o, &x)| *o += w * x);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(shape, y, rg, Op::WeightedSum { terms: terms.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    /// `−Σ_c t_c · log softmax(logits/T)_c`, averaged over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Targets<T>, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        let (rows, classes) = matrix_dims(self.shape(logits), "softmax_cross_entropy")?;
        let t = match targets {
            Targets::Index(idx) => {
                if idx.len() != rows {
                    return Err(Error::shape("softmax_cross_entropy", format!("{} targets for {rows} rows", idx.len())));
                }
                let mut t = vec![T::zero(); rows * classes];
                for (r, &c) in idx.iter().enumerate() {
                    if c >= classes {
                        return Err(Error::Validation(format!("class index {c} out of range {classes}")));
                    }
                    t[r * classes + c] = T::one();
                }
                t
            }
            Targets::Probs(p) => {
                if p.len() != rows * classes {
                    return Err(Error::shape("softmax_cross_entropy", format!("{} target values", p.len())));
                }
                for row in p.chunks_exact(classes) {
                    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                    if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < T::zero()) {
                        return Err(Error::Validation(format!("probability target sums to {s}")));
                    }
                }
                p.clone()
            }
        };
        let z = self.value(logits);
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let zr = &z[r * classes..(r + 1) * classes];
            let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
            let lse = max + zr.iter().map(|&v| (v / temperature - max).exp()).sum::<T>().ln();
            for c in 0..classes {
                let s = zr[c] / temperature - lse;
                probs[r * classes + c] = s.exp();
                total -= t[r * classes + c] * s;
            }
        }
        let loss = total / T::of(rows as f64);
        let rg = self.rg(&[logits]);
        let (probs, t) = if rg { (probs, t) } else { (Vec::new(), Vec::new()) };
        self.push(vec![1], vec![loss], rg, Op::SoftmaxCe { logits, probs, targets: t, temperature, rows })
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn l2_reconstruction(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l2_reconstruction", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let n = T::of(self.value(a).len() as f64);
        let s = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / n;
        let rg = self.rg(&[a, b]);
        self.push(vec![1], vec![s], rg, Op::L2 { a, b })
    }

    /// `coef · Σ_j w_j (x_j − anchor_j)²`.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &[T], weights: &[T], coef: T) -> Result<Var> {
        let n = self.value(x).len();
        if anchor.len() != n || weights.len() != n {
            return Err(Error::shape(
                "weighted_sq_dist",
                format!("{n} values, {} anchor, {} weights", anchor.len(), weights.len()),
            ));
        }
        let s = self
            .value(x)
            .iter()
            .zip(anchor)
            .zip(weights)
            .map(|((&v, &a), &w)| w * (v - a) * (v - a))
            .sum::<T>()
            * coef;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::WeightedSqDist { x, anchor: anchor.to_vec(), weights: weights.to_vec(), coef })
    }

    /// Reverse pass from a scalar `loss`. Gradients land on every node that
    /// requires them and are read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b, batch } => {
                let (out, fan_in) = (self.shape(*w)[0], self.shape(*w)[1]);
                if needs(*x) {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    gemm(*batch, out, fan_in, g, false, self.value(*w), false, &mut dx, false);
                    add_into(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); out * fan_in];
                    gemm_tn_reduce(*batch, out, fan_in, g, self.value(*x), &mut dw);
                    add_into(&mut grads[w.0], dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); out];
                    column_sums(*batch, out, g, &mut db);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Conv { x, w, b, geo, cols } => {
                let (m, kd, cout) = (geo.rows(), geo.patch(), geo.cout);
                if needs(*w) {
                    let a = cols.as_deref().unwrap_or_else(|| self.value(*x));
                    let mut dw = vec![T::zero(); kd * cout];
                    gemm_tn_reduce(m, kd, cout, a, g, &mut dw);
                    add_into(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut db = vec![T::zero(); cout];
                    column_sums(m, cout, g, &mut db);
                    add_into(&mut grads[b.0], db);
                }
                if needs(*x) {
                    let mut dcols = vec![T::zero(); m * kd];
                    gemm(m, cout, kd, g, false, self.value(*w), true, &mut dcols, false);
                    let dx = if geo.is_pointwise() { dcols } else { Self::col2im(&dcols, geo) };
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Relu { x } => {
                let dx = node.value.iter().zip(g).map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() }).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::AvgPool { x, hw, channels } => {
                let inv = T::one() / T::of(*hw as f64);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (bi, gb) in g.chunks_exact(*channels).enumerate() {
                    for pos in dx[bi * hw * channels..(bi + 1) * hw * channels].chunks_exact_mut(*channels) {
                        pos.iter_mut().zip(gb).for_each(|(d, &gv)| *d = gv * inv);
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Scale { x, c } => {
                add_into(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if needs(v) {
                        add_into(&mut grads[v.0], g.iter().map(|&gv| gv * w).collect());
                    }
                }
            }
            Op::Sum { x } => {
                add_into(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
            }
            Op::SoftmaxCe { logits, probs, targets, temperature, rows } => {
                let classes = probs.len() / rows;
                let scale = g[0] / (T::of(*rows as f64) * *temperature);
                let mut dz = vec![T::zero(); probs.len()];
                for r in 0..*rows {
                    let span = r * classes..(r + 1) * classes;
                    let mass: T = targets[span.clone()].iter().copied().sum();
                    for c in span {
                        dz[c] = scale * (probs[c] * mass - targets[c]);
                    }
                }
                add_into(&mut grads[logits.0], dz);
            }
            Op::L2 { a, b } => {
                let n = T::of(self.value(*a).len() as f64);
                let two = T::of(2.0) * g[0] / n;
                let diff: Vec<T> = self.value(*a).iter().zip(self.value(*b)).map(|(&p, &q)| two * (p - q)).collect();
                if needs(*b) {
                    add_into(&mut grads[b.0], diff.iter().map(|&d| -d).collect());
                }
                if needs(*a) {
                    add_into(&mut grads[a.0], diff);
                }
            }
            Op::WeightedSqDist { x, anchor, weights, coef } => {
                let two = T::of(2.0) * *coef * g[0];
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(anchor)
                    .zip(weights)
                    .map(|((&v, &a), &w)| two * w * (v - a))
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
        }
    }
}

fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::Conv { x, w, b, geo, .. } => Op::Conv { x, w, b, geo, cols: None },
        Op::SoftmaxCe { logits, temperature, rows, .. } => {
            Op::SoftmaxCe { logits, probs: Vec::new(), targets: Vec::new(), temperature, rows }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn dense_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![2], &[3.0, -1.0]), false).unwrap();
        let w = tape.leaf(&t(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]), false).unwrap();
        let b = tape.leaf(&t(vec![2], &[0.0, 0.0]), false).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, -1.0]);

        let x = tape.leaf(&t(vec![2], &[1.0, 1.0]), false).unwrap();
        let w = tape.leaf(&t(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, 7.0]);

        let bad = tape.leaf(&t(vec![3], &[0.0; 3]), false).unwrap();
        assert!(matches!(tape.dense(bad, w, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![2, 2, 1], &[1.0, -2.0, 3.0, 0.5]), false).unwrap();
        let k = tape.leaf(&t(vec![1, 1, 1, 1], &[2.0]), false).unwrap();
        let y = tape.conv2d(x, k, None, 1, Padding::Explicit(0)).unwrap();
        assert_eq!(tape.value(y), &[2.0, -4.0, 6.0, 1.0]);

        let x = tape.leaf(&t(vec![3, 3, 1], &[1.0; 9]), false).unwrap();
        let k = tape.leaf(&t(vec![3, 3, 1, 1], &[1.0; 9]), false).unwrap();
        let y = tape.conv2d(x, k, None, 1, Padding::Explicit(0)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![4, 4, 1], &[0.0; 16]), false).unwrap();
        let k = tape.leaf(&t(vec![3, 3, 1, 1], &[0.0; 9]), false).unwrap();
        assert!(tape.conv2d(x, k, None, 2, Padding::Explicit(1)).is_err());
        // same padding puts the extra row on the trailing edge
        let y = tape.conv2d(x, k, None, 2, Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 1]);
    }

    #[test]
    fn relu_and_pool() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![3], &[-1.0, 0.0, 2.0]), true).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(&t(vec![2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let p = tape.global_avgpool(z).unwrap();
        assert_eq!(tape.value(p), &[2.5]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_relu_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![4], &[-1.0, -0.1, -3.0, -2.0]), true).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&t(vec![2], &[0.0, 0.0]), true).unwrap();
        let l = tape.softmax_cross_entropy(z, &Targets::Index(vec![0]), 1.0).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_stationary_at_matching_target() {
        for temp in [1.0, 2.0] {
            let logits = [0.3, -1.2, 2.5, 0.0];
            let target = softmax_rows(&logits, 4, temp);
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(&t(vec![4], &logits), true).unwrap();
            let l = tape.softmax_cross_entropy(z, &Targets::Probs(target), temp).unwrap();
            tape.backward(l).unwrap();
            assert!(tape.grad(z).unwrap().iter().all(|g| g.abs() < 1e-7));
        }
    }

    #[test]
    fn cross_entropy_validates_targets() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&t(vec![2], &[0.0, 0.0]), true).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(z, &Targets::Probs(vec![0.5, 0.6]), 1.0),
            Err(Error::Validation(_))
        ));
        assert!(tape.softmax_cross_entropy(z, &Targets::Index(vec![2]), 1.0).is_err());
        assert!(tape.softmax_cross_entropy(z, &Targets::Index(vec![0]), 0.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax_rows(&[1e4f32, -1e4, 0.0, 1e4], 4, 1.0);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_mean_convention() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(vec![2], &[1.0, 0.0]), true).unwrap();
        let b = tape.leaf(&t(vec![2], &[0.0, 0.0]), false).unwrap();
        let l = tape.l2_reconstruction(a, b).unwrap();
        assert_eq!(tape.scalar(l), 0.5);
        let same = tape.l2_reconstruction(a, a).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn linear_chain_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![3], &[1.0, -4.0, 2.0]), true).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn residual_add_grads_are_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(vec![2], &[1.0, 2.0]), true).unwrap();
        let b = tape.leaf(&t(vec![2], &[0.0, 0.0]), true).unwrap();
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        let c = t(vec![3], &[0.0; 3]);
        let mut tape2 = Tape::<f64>::new();
        let a2 = tape2.leaf(&c, false).unwrap();
        let b2 = tape2.leaf(&t(vec![2], &[0.0; 2]), false).unwrap();
        assert!(tape2.add(a2, b2).is_err());
    }

    #[test]
    fn tape_reuse_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1], &[1.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        assert!(matches!(tape.relu(x), Err(Error::TapeConsumed)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn checked_mode_catches_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1], &[1e300]), false).unwrap();
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite("scale"))));
    }
}
