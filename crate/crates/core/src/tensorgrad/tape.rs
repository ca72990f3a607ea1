use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rayon::prelude::*;

use super::{Result, TensorError};

/// Scalar types the tape can compute with. f32 is the training mode,
/// f64 the gradient-checking mode.
pub trait Element:
    Float + NumAssign + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Debug + Default + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

#[inline]
fn el<T: Element>(v: f64) -> T {
    T::from_f64(v).expect("finite literal")
}

#[inline]
fn f64_of<T: Element>(v: T) -> f64 {
    v.to_f64().expect("finite element")
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    Relu { x: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, padding: usize, cols: Vec<Vec<T>> },
    GlobalAvgPool { x: TensorId },
    L2Normalize { x: TensorId, eps: f64, norms: Vec<f64> },
    // Scalar losses precompute their input gradient at forward time; the
    // backward pass only scales it by the upstream scalar.
    ScalarLoss { x: TensorId, grad_x: Vec<f64> },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Records operations in execution order; `backward` replays them in reverse.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    backward_ran: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_ran: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert an input tensor.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        f64_of(self.nodes[id.0].data[0])
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ----- elementwise and reduction ops -----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let rg = self.requires(x);
        Ok(self.push(vec![1], vec![acc], rg, Op::Sum { x }))
    }

    /// Elementwise max(x, 0). Subgradient at 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.requires(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Relu { x }))
    }

    // ----- dense layers -----

    /// x[N,D] . w[D,E] + b[E]
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            });
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![T::zero(); n * e];
        out.par_chunks_mut(e).enumerate().for_each(|(row, orow)| {
            orow.copy_from_slice(bd);
            let xrow = &xd[row * d..(row + 1) * d];
            for (di, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[di * e..(di + 1) * e];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        });
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, e], out, rg, Op::Linear { x, w, b }))
    }

    /// x[N,C,H,W] * w[F,C,kh,kw] + b[F], zero padding. im2col + matmul with
    /// the same accumulation order as the naive nested-loop form.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            });
        }
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, cw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != cw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} != weight channels {}", c, cw),
            });
        }
        if bs[0] != f {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias len {} != filters {}", bs[0], f),
            });
        }
        if kh > h + 2 * padding || kw > wd_ + 2 * padding || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} exceeds padded input {}x{} (stride {})",
                    kh,
                    kw,
                    h + 2 * padding,
                    wd_ + 2 * padding,
                    stride
                ),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd_ + 2 * padding - kw) / stride + 1;
        let q = c * kh * kw;
        let p = oh * ow;

        let xd = &self.nodes[x.0].data;
        let wdat = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;

        let per_image: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|img| {
                let xin = &xd[img * c * h * wd_..(img + 1) * c * h * wd_];
                let col = im2col(xin, c, h, wd_, kh, kw, stride, padding, oh, ow);
                let mut out = vec![T::zero(); f * p];
                for fi in 0..f {
                    let wrow = &wdat[fi * q..(fi + 1) * q];
                    let orow = &mut out[fi * p..(fi + 1) * p];
                    for o in orow.iter_mut() {
                        *o = bd[fi];
                    }
                    for (qi, &wv) in wrow.iter().enumerate() {
                        let crow = &col[qi * p..(qi + 1) * p];
                        for (o, &cv) in orow.iter_mut().zip(crow) {
                            *o += wv * cv;
                        }
                    }
                }
                (col, out)
            })
            .collect();

        let mut cols = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * f * p);
        for (col, o) in per_image {
            cols.push(col);
            out.extend_from_slice(&o);
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, f, oh, ow], out, rg, Op::Conv2d { x, w, b, stride, padding, cols }))
    }

    /// Mean over the spatial axes: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected rank 4, got {:?}", xs),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = el::<T>(1.0 / (h * w) as f64);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            *o = acc * inv;
        }
        let rg = self.requires(x);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool { x }))
    }

    /// Row-wise L2 normalization with an eps guard for near-zero rows.
    pub fn l2_normalize(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "l2_normalize",
                detail: format!("expected rank 2, got {:?}", xs),
            });
        }
        let (n, d) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].data;
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![T::zero(); n * d];
        for row in 0..n {
            let xrow = &xd[row * d..(row + 1) * d];
            let norm = xrow.iter().map(|&v| f64_of(v) * f64_of(v)).sum::<f64>().sqrt();
            norms.push(norm);
            let scale = el::<T>(1.0 / norm.max(eps));
            for (o, &v) in out[row * d..(row + 1) * d].iter_mut().zip(xrow) {
                *o = v * scale;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![n, d], out, rg, Op::L2Normalize { x, eps, norms }))
    }

    // ----- losses -----

    /// NT-Xent loss over a batch of row-paired projections: rows 2k and 2k+1
    /// are the two views of source image k. Returns the mean of the per-anchor
    /// terms over all 2N anchors. Internals run in f64 with a log-sum-exp
    /// stabilizer.
    pub fn nt_xent(&mut self, z: TensorId, tau: f64) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(TensorError::InvalidTemperature { tau });
        }
        let zs = self.shape(z);
        if zs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "nt_xent",
                detail: format!("expected rank 2, got {:?}", zs),
            });
        }
        let (rows, d) = (zs[0], zs[1]);
        if rows < 2 || rows % 2 != 0 {
            return Err(TensorError::BadContrastiveBatch { rows });
        }
        let zf: Vec<f64> = self.data(z).iter().map(|&v| f64_of(v)).collect();
        let norms = row_norms(&zf, rows, d)?;
        let sim = cosine_similarity_from_norms(&zf, &norms, rows, d);

        let mut loss = 0.0;
        // dLoss/dS, zero on the diagonal.
        let mut gs = vec![0.0f64; rows * rows];
        for i in 0..rows {
            let partner = i ^ 1;
            let srow = &sim[i * rows..(i + 1) * rows];
            let mut maxv = f64::NEG_INFINITY;
            for (k, &s) in srow.iter().enumerate() {
                if k != i {
                    maxv = maxv.max(s / tau);
                }
            }
            let mut denom = 0.0;
            for (k, &s) in srow.iter().enumerate() {
                if k != i {
                    denom += (s / tau - maxv).exp();
                }
            }
            let lse = maxv + denom.ln();
            loss += lse - srow[partner] / tau;
            for k in 0..rows {
                if k == i {
                    continue;
                }
                let softmax = (srow[k] / tau - maxv).exp() / denom;
                let indicator = if k == partner { 1.0 } else { 0.0 };
                gs[i * rows + k] = (softmax - indicator) / (tau * rows as f64);
            }
        }
        loss /= rows as f64;

        // Chain through the cosine similarity (quotient rule on both norms).
        let mut grad_z = vec![0.0f64; rows * d];
        for a in 0..rows {
            for j in 0..rows {
                if j == a {
                    continue;
                }
                let m = gs[a * rows + j] + gs[j * rows + a];
                if m == 0.0 {
                    continue;
                }
                let c1 = m / (norms[a] * norms[j]);
                let c2 = m * sim[a * rows + j] / (norms[a] * norms[a]);
                for t in 0..d {
                    grad_z[a * d + t] += c1 * zf[j * d + t] - c2 * zf[a * d + t];
                }
            }
        }
        let rg = self.requires(z);
        Ok(self.push(vec![1], vec![el(loss)], rg, Op::ScalarLoss { x: z, grad_x: grad_z }))
    }

    /// Mean softmax cross-entropy over rows of `logits` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} vs {} labels", ls, labels.len()),
            });
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, k),
            });
        }
        let ld: Vec<f64> = self.data(logits).iter().map(|&v| f64_of(v)).collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0f64; n * k];
        for row in 0..n {
            let lrow = &ld[row * k..(row + 1) * k];
            let maxv = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = lrow.iter().map(|&v| (v - maxv).exp()).sum();
            let lse = maxv + denom.ln();
            loss += lse - lrow[labels[row]];
            for col in 0..k {
                let softmax = (lrow[col] - maxv).exp() / denom;
                let indicator = if col == labels[row] { 1.0 } else { 0.0 };
                grad[row * k + col] = (softmax - indicator) / n as f64;
            }
        }
        loss /= n as f64;
        let rg = self.requires(logits);
        Ok(self.push(vec![1], vec![el(loss)], rg, Op::ScalarLoss { x: logits, grad_x: grad }))
    }

    /// Mean absolute error against a constant target. Subgradient at 0 is 0.
    pub fn l1_loss(&mut self, pred: TensorId, target: &[f64]) -> Result<TensorId> {
        let n = self.data(pred).len();
        if n != target.len() || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "l1_loss",
                detail: format!("{} predictions vs {} targets", n, target.len()),
            });
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0f64; n];
        for i in 0..n {
            let diff = f64_of(self.data(pred)[i]) - target[i];
            loss += diff.abs();
            grad[i] = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            } / n as f64;
        }
        loss /= n as f64;
        let rg = self.requires(pred);
        Ok(self.push(vec![1], vec![el(loss)], rg, Op::ScalarLoss { x: pred, grad_x: grad }))
    }

    // ----- backward -----

    /// Populate gradients of every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::BackwardWithoutReset);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.backward_ran = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.dispatch(&op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    /// Clear all gradients so another backward pass may run.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_ran = false;
    }

    fn accumulate(&mut self, id: TensorId, contrib: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn dispatch(&mut self, op: &Op<T>, gout: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.requires(*a) {
                    self.accumulate(*a, gout.to_vec());
                }
                if self.requires(*b) {
                    self.accumulate(*b, gout.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let c: Vec<T> =
                        gout.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*a, c);
                }
                if self.requires(*b) {
                    let c: Vec<T> =
                        gout.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*b, c);
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let g0 = gout[0];
                    self.accumulate(*x, vec![g0; self.data(*x).len()]);
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let c: Vec<T> = gout
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(*x, c);
                }
            }
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, gout),
            Op::Conv2d { x, w, b, stride, padding, cols } => {
                self.backward_conv2d(*x, *w, *b, *stride, *padding, cols, gout)
            }
            Op::GlobalAvgPool { x } => {
                if self.requires(*x) {
                    let xs = &self.nodes[x.0].shape;
                    let (n, c, h, wdim) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = el::<T>(1.0 / (h * wdim) as f64);
                    let mut dx = vec![T::zero(); n * c * h * wdim];
                    for i in 0..n * c {
                        let g = gout[i] * inv;
                        for v in &mut dx[i * h * wdim..(i + 1) * h * wdim] {
                            *v = g;
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                if self.requires(*x) {
                    let d = self.nodes[x.0].shape[1];
                    let xd = &self.nodes[x.0].data;
                    let mut dx = vec![T::zero(); xd.len()];
                    for (row, &norm) in norms.iter().enumerate() {
                        let xrow = &xd[row * d..(row + 1) * d];
                        let grow = &gout[row * d..(row + 1) * d];
                        let drow = &mut dx[row * d..(row + 1) * d];
                        if norm > *eps {
                            // d/dx (x/|x|) = (g - y (y.g)) / |x|
                            let inv = 1.0 / norm;
                            let ydotg: f64 = xrow
                                .iter()
                                .zip(grow)
                                .map(|(&xv, &gv)| f64_of(xv) * inv * f64_of(gv))
                                .sum();
                            for t in 0..d {
                                let y = f64_of(xrow[t]) * inv;
                                drow[t] = el((f64_of(grow[t]) - y * ydotg) * inv);
                            }
                        } else {
                            let inv = el::<T>(1.0 / *eps);
                            for t in 0..d {
                                drow[t] = grow[t] * inv;
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::ScalarLoss { x, grad_x } => {
                if self.requires(*x) {
                    let g0 = f64_of(gout[0]);
                    let c: Vec<T> = grad_x.iter().map(|&g| el(g0 * g)).collect();
                    self.accumulate(*x, c);
                }
            }
        }
    }

    fn backward_linear(&mut self, x: TensorId, w: TensorId, b: TensorId, gout: &[T]) {
        let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let e = self.nodes[w.0].shape[1];
        if self.requires(x) {
            let wd = &self.nodes[w.0].data;
            let mut dx = vec![T::zero(); n * d];
            dx.par_chunks_mut(d).enumerate().for_each(|(row, drow)| {
                let grow = &gout[row * e..(row + 1) * e];
                for (di, dv) in drow.iter_mut().enumerate() {
                    let wrow = &wd[di * e..(di + 1) * e];
                    let mut acc = T::zero();
                    for (&g, &wv) in grow.iter().zip(wrow) {
                        acc += g * wv;
                    }
                    *dv = acc;
                }
            });
            self.accumulate(x, dx);
        }
        if self.requires(w) {
            let xd = &self.nodes[x.0].data;
            let mut dw = vec![T::zero(); d * e];
            dw.par_chunks_mut(e).enumerate().for_each(|(di, drow)| {
                for row in 0..n {
                    let xv = xd[row * d + di];
                    let grow = &gout[row * e..(row + 1) * e];
                    for (dv, &g) in drow.iter_mut().zip(grow) {
                        *dv += xv * g;
                    }
                }
            });
            self.accumulate(w, dw);
        }
        if self.requires(b) {
            let mut db = vec![T::zero(); e];
            for row in 0..n {
                for (dv, &g) in db.iter_mut().zip(&gout[row * e..(row + 1) * e]) {
                    *dv += g;
                }
            }
            self.accumulate(b, db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
        cols: &[Vec<T>],
        gout: &[T],
    ) {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd_ + 2 * padding - kw) / stride + 1;
        let q = c * kh * kw;
        let p = oh * ow;

        if self.requires(w) {
            let mut dw = vec![T::zero(); f * q];
            dw.par_chunks_mut(q).enumerate().for_each(|(fi, dwrow)| {
                for img in 0..n {
                    let grow = &gout[(img * f + fi) * p..(img * f + fi + 1) * p];
                    let col = &cols[img];
                    for (qi, dv) in dwrow.iter_mut().enumerate() {
                        let crow = &col[qi * p..(qi + 1) * p];
                        let mut acc = T::zero();
                        for (&g, &cv) in grow.iter().zip(crow) {
                            acc += g * cv;
                        }
                        *dv += acc;
                    }
                }
            });
            self.accumulate(w, dw);
        }
        if self.requires(b) {
            let mut db = vec![T::zero(); f];
            for img in 0..n {
                for (fi, dv) in db.iter_mut().enumerate() {
                    let grow = &gout[(img * f + fi) * p..(img * f + fi + 1) * p];
                    let mut acc = T::zero();
                    for &g in grow {
                        acc += g;
                    }
                    *dv += acc;
                }
            }
            self.accumulate(b, db);
        }
        if self.requires(x) {
            let wdat = &self.nodes[w.0].data;
            let mut dx = vec![T::zero(); n * c * h * wd_];
            dx.par_chunks_mut(c * h * wd_).enumerate().for_each(|(img, dximg)| {
                let mut dcol = vec![T::zero(); q * p];
                for fi in 0..f {
                    let grow = &gout[(img * f + fi) * p..(img * f + fi + 1) * p];
                    let wrow = &wdat[fi * q..(fi + 1) * q];
                    for (qi, &wv) in wrow.iter().enumerate() {
                        let drow = &mut dcol[qi * p..(qi + 1) * p];
                        for (dv, &g) in drow.iter_mut().zip(grow) {
                            *dv += wv * g;
                        }
                    }
                }
                col2im_add(&dcol, dximg, c, h, wd_, kh, kw, stride, padding, oh, ow);
            });
            self.accumulate(x, dx);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let p = oh * ow;
    let mut col = vec![T::zero(); c * kh * kw * p];
    let mut q = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let crow = &mut col[q * p..(q + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            crow[oy * ow + ox] = plane[base + ix as usize];
                        }
                    }
                }
                q += 1;
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    dcol: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let p = oh * ow;
    let mut q = 0usize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let crow = &dcol[q * p..(q + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += crow[oy * ow + ox];
                        }
                    }
                }
                q += 1;
            }
        }
    }
}

/// Row norms of a row-major matrix; errors on (near-)zero rows.
pub fn row_norms(z: &[f64], rows: usize, d: usize) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(rows);
    for row in 0..rows {
        let n = z[row * d..(row + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(TensorError::ZeroNormRow { row });
        }
        norms.push(n);
    }
    Ok(norms)
}

/// Full pairwise cosine similarity given precomputed row norms.
pub fn cosine_similarity_from_norms(z: &[f64], norms: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut sim = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let dot: f64 = z[i * d..(i + 1) * d]
                .iter()
                .zip(&z[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            sim[i * rows + j] = dot / (norms[i] * norms[j]);
        }
    }
    sim
}
