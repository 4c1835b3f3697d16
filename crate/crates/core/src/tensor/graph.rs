use std::sync::Arc;

use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Nonzero pattern of a constant input, used by [`Graph::linear`] when the
/// input is mostly zeros (one-hot observations).
#[derive(Debug)]
struct SparseRows<T> {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
        sparse: Option<SparseRows<T>>,
    },
    Add(usize, usize),
    AddBroadcast(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: T },
    ScaleRows { x: usize, weights: Vec<T>, width: usize },
    Tanh(usize),
    Sigmoid(usize),
    Clip { x: usize, lo: T, hi: T },
    LayerNorm { x: usize, gain: usize, shift: usize, width: usize, xhat: Vec<T>, rstd: Vec<T> },
    Concat { a: usize, b: usize, wa: usize, wb: usize },
    SelectSeq { x: usize, seq: usize, width: usize, index: usize },
    Reshape(usize),
    Attention { q: usize, k: usize, v: usize, batch: usize, sq: usize, sk: usize, width: usize, heads: usize, probs: Vec<T> },
    LogSoftmax { x: usize, width: usize },
    Softmax { x: usize, width: usize },
    Pick { x: usize, width: usize, index: Vec<usize> },
    RowMse { pred: usize, target: Vec<T>, weights: Option<Vec<T>>, width: usize, mean_over_row: bool },
    Bce { prob: usize, target: Vec<T> },
    PpoSurrogate { logp: usize, ratio: Vec<T>, adv: Vec<T>, eps: T },
    EntropyMean { logp: usize, width: usize },
    ClippedValueLoss { value: usize, old: Vec<T>, returns: Vec<T>, eps: T },
    WeightedKl { logq: usize, ref_logp: Vec<T>, weights: Vec<T>, width: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Append-only computation tape. Every op records what its backward rule
/// needs; [`Graph::backward`] replays the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value: Tensor::from_shared(shape, Arc::new(data)), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    fn shape_of(&self, v: usize) -> &[usize] {
        self.nodes[v].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?, false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.shape_of(v.0)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.data(v.0)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x @ w + b` over the last dimension of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wshape = self.shape_of(w.0).to_vec();
        if wshape.len() != 2 {
            return Err(mismatch("linear", format!("weight must be 2-D, got {wshape:?}")));
        }
        let (fan_in, fan_out) = (wshape[0], wshape[1]);
        let xshape = self.shape_of(x.0).to_vec();
        if *xshape.last().unwrap() != fan_in {
            return Err(mismatch("linear", format!("input {xshape:?} vs weight {wshape:?}")));
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.len() != fan_out {
                return Err(mismatch("linear", format!("bias {:?} vs out {fan_out}", self.shape_of(b.0))));
            }
        }
        let rows = self.nodes[x.0].value.len() / fan_in;
        let xd = self.data(x.0);
        let wd = self.data(w.0);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bd = self.data(b.0);
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bd);
            }
        }

        let sparse = if !self.nodes[x.0].needs_grad {
            let nnz = xd.iter().filter(|v| !v.is_zero()).count();
            (nnz * 4 <= xd.len()).then(|| {
                let mut sp = SparseRows { offsets: Vec::with_capacity(rows + 1), cols: Vec::with_capacity(nnz), vals: Vec::with_capacity(nnz) };
                sp.offsets.push(0);
                for row in xd.chunks_exact(fan_in) {
                    for (c, &v) in row.iter().enumerate() {
                        if !v.is_zero() {
                            sp.cols.push(c);
                            sp.vals.push(v);
                        }
                    }
                    sp.offsets.push(sp.cols.len());
                }
                sp
            })
        } else {
            None
        };

        match &sparse {
            Some(sp) => {
                for (r, orow) in out.chunks_exact_mut(fan_out).enumerate() {
                    for i in sp.offsets[r]..sp.offsets[r + 1] {
                        let (c, v) = (sp.cols[i], sp.vals[i]);
                        let wrow = &wd[c * fan_out..(c + 1) * fan_out];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + v * wv;
                        }
                    }
                }
            }
            None => unsafe {
                T::gemm(
                    rows,
                    fan_in,
                    fan_out,
                    T::one(),
                    xd.as_ptr(),
                    fan_in as isize,
                    1,
                    wd.as_ptr(),
                    fan_out as isize,
                    1,
                    T::one(),
                    out.as_mut_ptr(),
                    fan_out as isize,
                    1,
                );
            },
        }

        let mut shape = xshape;
        *shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        Ok(self.push(shape, out, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0), rows, fan_in, fan_out, sparse }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape_of(a.0) != self.shape_of(b.0) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape_of(a.0), self.shape_of(b.0))));
        }
        let out = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape_of(a.0).to_vec(), out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a.0), self.shape_of(b.0));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", format!("{sa:?} vs {sb:?}")));
        }
        let bd = self.data(b.0);
        let out = self.data(a.0).chunks_exact(bd.len()).flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y)).collect();
        Ok(self.push(self.shape_of(a.0).to_vec(), out, Op::AddBroadcast(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape_of(a.0) != self.shape_of(b.0) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.shape_of(a.0), self.shape_of(b.0))));
        }
        let out = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape_of(a.0).to_vec(), out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.data(x.0).iter().map(|&v| scale * v + shift).collect();
        self.push(self.shape_of(x.0).to_vec(), out, Op::Affine { x: x.0, scale }, &[x.0])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    /// Multiplies every row (last dimension) by a constant weight.
    pub fn scale_rows(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let width = self.nodes[x.0].value.width();
        let rows = self.nodes[x.0].value.len() / width;
        if weights.len() != rows {
            return Err(mismatch("scale_rows", format!("{rows} rows vs {} weights", weights.len())));
        }
        let out = self.data(x.0).chunks_exact(width).zip(weights).flat_map(|(row, &w)| row.iter().map(move |&v| v * w)).collect();
        Ok(self.push(self.shape_of(x.0).to_vec(), out, Op::ScaleRows { x: x.0, weights: weights.to_vec(), width }, &[x.0]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.data(x.0).iter().map(|v| v.tanh()).collect();
        self.push(self.shape_of(x.0).to_vec(), out, Op::Tanh(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x.0).iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        self.push(self.shape_of(x.0).to_vec(), out, Op::Sigmoid(x.0), &[x.0])
    }

    /// Elementwise clamp; gradient passes only where the input lies inside the bounds.
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.data(x.0).iter().map(|&v| v.max(lo).min(hi)).collect();
        self.push(self.shape_of(x.0).to_vec(), out, Op::Clip { x: x.0, lo, hi }, &[x.0])
    }

    /// Layer normalization over the last dimension with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let width = self.nodes[x.0].value.width();
        if self.nodes[gain.0].value.len() != width || self.nodes[shift.0].value.len() != width {
            return Err(mismatch("layer_norm", format!("width {width} vs gain {:?}", self.shape_of(gain.0))));
        }
        let (xd, gd, bd) = (self.data(x.0), self.data(gain.0), self.data(shift.0));
        let n = T::of(width as f64);
        let mut out = Vec::with_capacity(xd.len());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(xd.len() / width);
        for row in xd.chunks_exact(width) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gd[i] + bd[i]);
            }
        }
        Ok(self.push(
            self.shape_of(x.0).to_vec(),
            out,
            Op::LayerNorm { x: x.0, gain: gain.0, shift: shift.0, width, xhat, rstd },
            &[x.0, gain.0, shift.0],
        ))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a.0).to_vec(), self.shape_of(b.0).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (ad, bd) = (self.data(a.0), self.data(b.0));
        let out = ad.chunks_exact(wa).zip(bd.chunks_exact(wb)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        Ok(self.push(shape, out, Op::Concat { a: a.0, b: b.0, wa, wb }, &[a.0, b.0]))
    }

    /// Picks sequence position `index` from a `[batch, seq, width]` tensor.
    pub fn select_seq(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape_of(x.0).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(mismatch("select_seq", format!("{s:?} at {index}")));
        }
        let (batch, seq, width) = (s[0], s[1], s[2]);
        let xd = self.data(x.0);
        let mut out = Vec::with_capacity(batch * width);
        for b in 0..batch {
            let start = (b * seq + index) * width;
            out.extend_from_slice(&xd[start..start + width]);
        }
        Ok(self.push(vec![batch, width], out, Op::SelectSeq { x: x.0, seq, width, index }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.is_empty() || shape.len() > 3 {
            return Err(mismatch("reshape", format!("{:?} to {shape:?}", self.shape_of(x.0))));
        }
        let needs_grad = self.nodes[x.0].needs_grad;
        let data = self.nodes[x.0].value.shared();
        self.nodes.push(Node { value: Tensor::from_shared(shape.to_vec(), data), op: Op::Reshape(x.0), needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Scaled dot-product attention split over `heads`. `q` is
    /// `[batch, sq, width]`, `k` and `v` are `[batch, sk, width]`; every query
    /// attends to every key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq_, sk_, sv_) = (self.shape_of(q.0).to_vec(), self.shape_of(k.0).to_vec(), self.shape_of(v.0).to_vec());
        if sq_.len() != 3 || sk_ != sv_ || sk_.len() != 3 || sq_[0] != sk_[0] || sq_[2] != sk_[2] {
            return Err(mismatch("attention", format!("q {sq_:?} k {sk_:?} v {sv_:?}")));
        }
        let (batch, sq, width, sk) = (sq_[0], sq_[1], sq_[2], sk_[1]);
        if heads == 0 || width % heads != 0 {
            return Err(mismatch("attention", format!("{heads} heads do not divide width {width}")));
        }
        let dh = width / heads;
        let inv = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        let mut out = vec![T::zero(); batch * sq * width];
        let mut probs = vec![T::zero(); batch * heads * sq * sk];
        let mut scores = vec![T::zero(); sk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..sq {
                    let qrow = &qd[(b * sq + i) * width + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(b * sk + j) * width + off..][..dh];
                        *s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * inv;
                    }
                    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let p = &mut probs[((b * heads + h) * sq + i) * sk..][..sk];
                    let mut z = T::zero();
                    for (pj, &s) in p.iter_mut().zip(&scores) {
                        *pj = (s - max).exp();
                        z = z + *pj;
                    }
                    let orow = &mut out[(b * sq + i) * width + off..][..dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = *pj / z;
                        let vrow = &vd[(b * sk + j) * width + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + *pj * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![batch, sq, width],
            out,
            Op::Attention { q: q.0, k: k.0, v: v.0, batch, sq, sk, width, heads, probs },
            &[q.0, k.0, v.0],
        ))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let width = self.nodes[x.0].value.width();
        let xd = self.data(x.0);
        let mut out = vec![T::zero(); xd.len()];
        for (o, row) in out.chunks_exact_mut(width).zip(xd.chunks_exact(width)) {
            log_softmax_row(row, o);
        }
        self.push(self.shape_of(x.0).to_vec(), out, Op::LogSoftmax { x: x.0, width }, &[x.0])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let width = self.nodes[x.0].value.width();
        let xd = self.data(x.0);
        let mut out = vec![T::zero(); xd.len()];
        for (o, row) in out.chunks_exact_mut(width).zip(xd.chunks_exact(width)) {
            log_softmax_row(row, o);
            o.iter_mut().for_each(|v| *v = v.exp());
        }
        self.push(self.shape_of(x.0).to_vec(), out, Op::Softmax { x: x.0, width }, &[x.0])
    }

    /// Selects one column per row: `out[r] = x[r, index[r]]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let width = self.nodes[x.0].value.width();
        let rows = self.nodes[x.0].value.len() / width;
        if index.len() != rows || index.iter().any(|&i| i >= width) {
            return Err(mismatch("pick", format!("{rows} rows x {width} with {} indices", index.len())));
        }
        let xd = self.data(x.0);
        let out = index.iter().enumerate().map(|(r, &i)| xd[r * width + i]).collect();
        Ok(self.push(vec![rows], out, Op::Pick { x: x.0, width, index: index.to_vec() }, &[x.0]))
    }

    /// Weighted mean over rows of the squared error per row. The per-row error
    /// is averaged over the row when `mean_over_row`, summed otherwise. Rows
    /// with zero weight are excluded; an all-zero weight vector yields 0.
    pub fn row_mse(&mut self, pred: Var, target: &[T], weights: Option<&[T]>, mean_over_row: bool) -> Result<Var> {
        let width = self.nodes[pred.0].value.width();
        let pd = self.data(pred.0);
        let rows = pd.len() / width;
        if target.len() != pd.len() || weights.is_some_and(|w| w.len() != rows) {
            return Err(mismatch("row_mse", format!("pred {:?} target {} weights {:?}", self.shape_of(pred.0), target.len(), weights.map(<[T]>::len))));
        }
        let per_row = if mean_over_row { T::one() / T::of(width as f64) } else { T::one() };
        let wsum = weights.map_or(T::of(rows as f64), |w| w.iter().copied().sum());
        let mut loss = T::zero();
        if wsum > T::zero() {
            for r in 0..rows {
                let w = weights.map_or(T::one(), |w| w[r]);
                if w.is_zero() {
                    continue;
                }
                let e: T = pd[r * width..(r + 1) * width].iter().zip(&target[r * width..(r + 1) * width]).map(|(&p, &t)| (p - t) * (p - t)).sum();
                loss = loss + w * e * per_row;
            }
            loss = loss / wsum;
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::RowMse { pred: pred.0, target: target.to_vec(), weights: weights.map(<[T]>::to_vec), width, mean_over_row },
            &[pred.0],
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, prob: Var, target: &[T]) -> Result<Var> {
        let pd = self.data(prob.0);
        if pd.len() != target.len() {
            return Err(mismatch("bce", format!("{} probs vs {} targets", pd.len(), target.len())));
        }
        let n = T::of(pd.len() as f64);
        let loss = -pd.iter().zip(target).map(|(&p, &t)| t * p.ln() + (T::one() - t) * (T::one() - p).ln()).sum::<T>() / n;
        Ok(self.push(vec![1], vec![loss], Op::Bce { prob: prob.0, target: target.to_vec() }, &[prob.0]))
    }

    /// Clipped surrogate objective, negated: `-mean(min(r A, clip(r, 1-eps, 1+eps) A))`
    /// with `r = exp(logp - old_logp)`.
    pub fn ppo_surrogate(&mut self, logp: Var, old_logp: &[T], adv: &[T], eps: T) -> Result<Var> {
        let ld = self.data(logp.0);
        if ld.len() != old_logp.len() || ld.len() != adv.len() {
            return Err(mismatch("ppo_surrogate", format!("{} vs {} vs {}", ld.len(), old_logp.len(), adv.len())));
        }
        let ratio: Vec<T> = ld.iter().zip(old_logp).map(|(&l, &o)| (l - o).exp()).collect();
        let (lo, hi) = (T::one() - eps, T::one() + eps);
        let total: T = ratio.iter().zip(adv).map(|(&r, &a)| (r * a).min(r.max(lo).min(hi) * a)).sum();
        let loss = -total / T::of(ld.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::PpoSurrogate { logp: logp.0, ratio, adv: adv.to_vec(), eps }, &[logp.0]))
    }

    /// Mean categorical entropy given row-wise log-probabilities.
    pub fn entropy_mean(&mut self, logp: Var) -> Var {
        let width = self.nodes[logp.0].value.width();
        let ld = self.data(logp.0);
        let rows = ld.len() / width;
        let total: T = ld.iter().map(|&l| -(l.exp() * l)).sum();
        let out = total / T::of(rows as f64);
        self.push(vec![1], vec![out], Op::EntropyMean { logp: logp.0, width }, &[logp.0])
    }

    /// `0.5 * mean(max((v - R)^2, (v_clip - R)^2))` with
    /// `v_clip = old + clip(v - old, -eps, eps)`.
    pub fn clipped_value_loss(&mut self, value: Var, old: &[T], returns: &[T], eps: T) -> Result<Var> {
        let vd = self.data(value.0);
        if vd.len() != old.len() || vd.len() != returns.len() {
            return Err(mismatch("clipped_value_loss", format!("{} vs {} vs {}", vd.len(), old.len(), returns.len())));
        }
        let half = T::of(0.5);
        let total: T = vd
            .iter()
            .zip(old)
            .zip(returns)
            .map(|((&v, &o), &r)| {
                let vc = o + (v - o).max(-eps).min(eps);
                ((v - r) * (v - r)).max((vc - r) * (vc - r))
            })
            .sum();
        let loss = half * total / T::of(vd.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::ClippedValueLoss { value: value.0, old: old.to_vec(), returns: returns.to_vec(), eps }, &[value.0]))
    }

    /// `mean_r w_r * KL(p_ref,r || q_r)` where `q` is given as row-wise
    /// log-probabilities and the reference distribution is a constant.
    pub fn weighted_kl(&mut self, logq: Var, ref_logp: &[T], weights: &[T]) -> Result<Var> {
        let width = self.nodes[logq.0].value.width();
        let qd = self.data(logq.0);
        let rows = qd.len() / width;
        if ref_logp.len() != qd.len() || weights.len() != rows {
            return Err(mismatch("weighted_kl", format!("{:?} vs ref {} weights {}", self.shape_of(logq.0), ref_logp.len(), weights.len())));
        }
        let mut total = T::zero();
        for r in 0..rows {
            let kl: T = (0..width)
                .map(|a| {
                    let lp = ref_logp[r * width + a];
                    lp.exp() * (lp - qd[r * width + a])
                })
                .sum();
            total = total + weights[r] * kl;
        }
        let loss = total / T::of(rows as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::WeightedKl { logq: logq.0, ref_logp: ref_logp.to_vec(), weights: weights.to_vec(), width },
            &[logq.0],
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0].value;
        if ln.len() != 1 {
            return Err(mismatch("backward", format!("loss must be scalar, got {:?}", ln.shape())));
        }
        if !ln.all_finite() {
            return Err(TensorError::NonFiniteValue("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need = |p: usize| self.nodes[p].needs_grad;
            let len = |p: usize| self.nodes[p].value.len();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b, rows, fan_in, fan_out, sparse } => {
                    let (rows, fan_in, fan_out) = (*rows, *fan_in, *fan_out);
                    if let Some(b) = *b {
                        if need(b) {
                            let db = slot(&mut grads, b, fan_out);
                            for row in g.chunks_exact(fan_out) {
                                for (d, &v) in db.iter_mut().zip(row) {
                                    *d = *d + v;
                                }
                            }
                        }
                    }
                    if need(*w) {
                        let dw = slot(&mut grads, *w, fan_in * fan_out);
                        match sparse {
                            Some(sp) => {
                                for (r, grow) in g.chunks_exact(fan_out).enumerate() {
                                    for i in sp.offsets[r]..sp.offsets[r + 1] {
                                        let (c, v) = (sp.cols[i], sp.vals[i]);
                                        for (d, &gv) in dw[c * fan_out..(c + 1) * fan_out].iter_mut().zip(grow) {
                                            *d = *d + v * gv;
                                        }
                                    }
                                }
                            }
                            None => unsafe {
                                let xd = self.data(*x);
                                T::gemm(fan_in, rows, fan_out, T::one(), xd.as_ptr(), 1, fan_in as isize, g.as_ptr(), fan_out as isize, 1, T::one(), dw.as_mut_ptr(), fan_out as isize, 1);
                            },
                        }
                    }
                    if need(*x) {
                        let wd = self.data(*w);
                        let dx = slot(&mut grads, *x, rows * fan_in);
                        unsafe {
                            T::gemm(rows, fan_out, fan_in, T::one(), g.as_ptr(), fan_out as isize, 1, wd.as_ptr(), 1, fan_out as isize, T::one(), dx.as_mut_ptr(), fan_in as isize, 1);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &p in [a, b] {
                        if need(p) {
                            let d = slot(&mut grads, p, g.len());
                            d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if need(*a) {
                        let d = slot(&mut grads, *a, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                    }
                    if need(*b) {
                        let n = len(*b);
                        let d = slot(&mut grads, *b, n);
                        for chunk in g.chunks_exact(n) {
                            d.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    if need(*a) {
                        let d = slot(&mut grads, *a, g.len());
                        for ((d, &gv), &o) in d.iter_mut().zip(&g).zip(bd) {
                            *d = *d + gv * o;
                        }
                    }
                    if need(*b) {
                        let d = slot(&mut grads, *b, g.len());
                        for ((d, &gv), &o) in d.iter_mut().zip(&g).zip(ad) {
                            *d = *d + gv * o;
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    let d = slot(&mut grads, *x, g.len());
                    d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + *scale * v);
                }
                Op::ScaleRows { x, weights, width } => {
                    let d = slot(&mut grads, *x, g.len());
                    for ((drow, grow), &w) in d.chunks_exact_mut(*width).zip(g.chunks_exact(*width)).zip(weights) {
                        drow.iter_mut().zip(grow).for_each(|(d, &v)| *d = *d + w * v);
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let d = slot(&mut grads, *x, g.len());
                    for ((d, &gv), &yv) in d.iter_mut().zip(&g).zip(y) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let d = slot(&mut grads, *x, g.len());
                    for ((d, &gv), &yv) in d.iter_mut().zip(&g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                }
                Op::Clip { x, lo, hi } => {
                    let xd = self.data(*x);
                    let d = slot(&mut grads, *x, g.len());
                    for ((d, &gv), &xv) in d.iter_mut().zip(&g).zip(xd) {
                        if xv >= *lo && xv <= *hi {
                            *d = *d + gv;
                        }
                    }
                }
                Op::LayerNorm { x, gain, shift, width, xhat, rstd } => {
                    let width = *width;
                    let gd = self.data(*gain);
                    if need(*shift) {
                        let d = slot(&mut grads, *shift, width);
                        for row in g.chunks_exact(width) {
                            d.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    if need(*gain) {
                        let d = slot(&mut grads, *gain, width);
                        for (row, hrow) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                            for ((d, &v), &h) in d.iter_mut().zip(row).zip(hrow) {
                                *d = *d + v * h;
                            }
                        }
                    }
                    if need(*x) {
                        let n = T::of(width as f64);
                        let dx = slot(&mut grads, *x, g.len());
                        let mut dh = vec![T::zero(); width];
                        for (r, ((grow, hrow), dxrow)) in g.chunks_exact(width).zip(xhat.chunks_exact(width)).zip(dx.chunks_exact_mut(width)).enumerate() {
                            for i in 0..width {
                                dh[i] = grow[i] * gd[i];
                            }
                            let mean_dh = dh.iter().copied().sum::<T>() / n;
                            let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                            for i in 0..width {
                                dxrow[i] = dxrow[i] + rstd[r] * (dh[i] - mean_dh - hrow[i] * mean_dhh);
                            }
                        }
                    }
                }
                Op::Concat { a, b, wa, wb } => {
                    let w = wa + wb;
                    if need(*a) {
                        let d = slot(&mut grads, *a, len(*a));
                        for (drow, grow) in d.chunks_exact_mut(*wa).zip(g.chunks_exact(w)) {
                            drow.iter_mut().zip(&grow[..*wa]).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    if need(*b) {
                        let d = slot(&mut grads, *b, len(*b));
                        for (drow, grow) in d.chunks_exact_mut(*wb).zip(g.chunks_exact(w)) {
                            drow.iter_mut().zip(&grow[*wa..]).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
                Op::SelectSeq { x, seq, width, index } => {
                    let d = slot(&mut grads, *x, len(*x));
                    for (b, grow) in g.chunks_exact(*width).enumerate() {
                        let start = (b * seq + index) * width;
                        d[start..start + width].iter_mut().zip(grow).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                Op::Reshape(x) => {
                    let d = slot(&mut grads, *x, g.len());
                    d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                }
                Op::Attention { q, k, v, batch, sq, sk, width, heads, probs } => {
                    let (batch, sq, sk, width, heads) = (*batch, *sq, *sk, *width, *heads);
                    let dh = width / heads;
                    let inv = T::one() / T::of(dh as f64).sqrt();
                    let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                    let mut dq = vec![T::zero(); qd.len()];
                    let mut dk = vec![T::zero(); kd.len()];
                    let mut dv = vec![T::zero(); vd.len()];
                    let mut dp = vec![T::zero(); sk];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = h * dh;
                            for i in 0..sq {
                                let p = &probs[((b * heads + h) * sq + i) * sk..][..sk];
                                let grow = &g[(b * sq + i) * width + off..][..dh];
                                for j in 0..sk {
                                    let vrow = &vd[(b * sk + j) * width + off..][..dh];
                                    dp[j] = grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                                    let dvrow = &mut dv[(b * sk + j) * width + off..][..dh];
                                    dvrow.iter_mut().zip(grow).for_each(|(d, &gv)| *d = *d + p[j] * gv);
                                }
                                let dot: T = p.iter().zip(&dp).map(|(&a, &c)| a * c).sum();
                                let qrow = &qd[(b * sq + i) * width + off..][..dh];
                                for j in 0..sk {
                                    let ds = p[j] * (dp[j] - dot) * inv;
                                    if ds.is_zero() {
                                        continue;
                                    }
                                    let krow = &kd[(b * sk + j) * width + off..][..dh];
                                    let dqrow = &mut dq[(b * sq + i) * width + off..][..dh];
                                    dqrow.iter_mut().zip(krow).for_each(|(d, &kv)| *d = *d + ds * kv);
                                    let dkrow = &mut dk[(b * sk + j) * width + off..][..dh];
                                    dkrow.iter_mut().zip(qrow).for_each(|(d, &qv)| *d = *d + ds * qv);
                                }
                            }
                        }
                    }
                    for (p, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if need(p) {
                            let d = slot(&mut grads, p, buf.len());
                            d.iter_mut().zip(&buf).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
                Op::LogSoftmax { x, width } => {
                    let y = node.value.data();
                    let d = slot(&mut grads, *x, g.len());
                    for ((drow, grow), yrow) in d.chunks_exact_mut(*width).zip(g.chunks_exact(*width)).zip(y.chunks_exact(*width)) {
                        let s: T = grow.iter().copied().sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + gv - yv.exp() * s;
                        }
                    }
                }
                Op::Softmax { x, width } => {
                    let y = node.value.data();
                    let d = slot(&mut grads, *x, g.len());
                    for ((drow, grow), yrow) in d.chunks_exact_mut(*width).zip(g.chunks_exact(*width)).zip(y.chunks_exact(*width)) {
                        let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + yv * (gv - s);
                        }
                    }
                }
                Op::Pick { x, width, index } => {
                    let d = slot(&mut grads, *x, len(*x));
                    for (r, (&i, &gv)) in index.iter().zip(&g).enumerate() {
                        d[r * width + i] = d[r * width + i] + gv;
                    }
                }
                Op::RowMse { pred, target, weights, width, mean_over_row } => {
                    let pd = self.data(*pred);
                    let rows = pd.len() / width;
                    let wsum = weights.as_ref().map_or(T::of(rows as f64), |w| w.iter().copied().sum());
                    if wsum > T::zero() {
                        let per_row = if *mean_over_row { T::one() / T::of(*width as f64) } else { T::one() };
                        let two = T::of(2.0);
                        let d = slot(&mut grads, *pred, pd.len());
                        for r in 0..rows {
                            let w = weights.as_ref().map_or(T::one(), |w| w[r]);
                            if w.is_zero() {
                                continue;
                            }
                            let c = g[0] * w * per_row * two / wsum;
                            for i in r * width..(r + 1) * width {
                                d[i] = d[i] + c * (pd[i] - target[i]);
                            }
                        }
                    }
                }
                Op::Bce { prob, target } => {
                    let pd = self.data(*prob);
                    let n = T::of(pd.len() as f64);
                    let d = slot(&mut grads, *prob, pd.len());
                    for ((d, &p), &t) in d.iter_mut().zip(pd).zip(target) {
                        *d = *d + g[0] * (-t / p + (T::one() - t) / (T::one() - p)) / n;
                    }
                }
                Op::PpoSurrogate { logp, ratio, adv, eps } => {
                    let n = T::of(ratio.len() as f64);
                    let (lo, hi) = (T::one() - *eps, T::one() + *eps);
                    let d = slot(&mut grads, *logp, ratio.len());
                    for ((d, &r), &a) in d.iter_mut().zip(ratio).zip(adv) {
                        let unclipped = r * a;
                        let clipped = r.max(lo).min(hi) * a;
                        let active = unclipped <= clipped || (r > lo && r < hi);
                        if active {
                            *d = *d - g[0] * a * r / n;
                        }
                    }
                }
                Op::EntropyMean { logp, width } => {
                    let ld = self.data(*logp);
                    let n = T::of((ld.len() / width) as f64);
                    let d = slot(&mut grads, *logp, ld.len());
                    for (d, &l) in d.iter_mut().zip(ld) {
                        *d = *d - g[0] * l.exp() * (l + T::one()) / n;
                    }
                }
                Op::ClippedValueLoss { value, old, returns, eps } => {
                    let vd = self.data(*value);
                    let n = T::of(vd.len() as f64);
                    let d = slot(&mut grads, *value, vd.len());
                    for (i, d) in d.iter_mut().enumerate() {
                        let (v, o, r) = (vd[i], old[i], returns[i]);
                        let delta = v - o;
                        let vc = o + delta.max(-*eps).min(*eps);
                        let (l1, l2) = ((v - r) * (v - r), (vc - r) * (vc - r));
                        let grad = if l1 >= l2 {
                            v - r
                        } else if delta > -*eps && delta < *eps {
                            vc - r
                        } else {
                            T::zero()
                        };
                        *d = *d + g[0] * grad / n;
                    }
                }
                Op::WeightedKl { logq, ref_logp, weights, width } => {
                    let n = T::of(weights.len() as f64);
                    let d = slot(&mut grads, *logq, ref_logp.len());
                    for (r, &w) in weights.iter().enumerate() {
                        for a in 0..*width {
                            let i = r * width + a;
                            d[i] = d[i] - g[0] * w * ref_logp[i].exp() / n;
                        }
                    }
                }
            }
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFiniteValue(format!("gradient of node {id}")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: &[f64], grad: bool) -> Var {
        g.leaf(Tensor::new(shape, data.to_vec()).unwrap(), grad)
    }

    #[test]
    fn tanh_at_zero_has_unit_slope() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1], &[0.0], true);
        let y = g.tanh(x);
        assert_eq!(g.scalar(y), 0.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 7], &[0.3; 7], false);
        let p = g.softmax(x);
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_attention_returns_value_rows() {
        let mut g = Graph::<f64>::new();
        let q = leaf(&mut g, &[2, 1, 4], &[1.0, -2.0, 0.5, 3.0, 0.1, 0.2, 0.3, 0.4], false);
        let k = leaf(&mut g, &[2, 1, 4], &[0.7, 0.1, -0.3, 2.0, 1.0, 1.0, 1.0, 1.0], false);
        let vdata = [5.0, 6.0, 7.0, 8.0, -1.0, -2.0, -3.0, -4.0];
        let v = leaf(&mut g, &[2, 1, 4], &vdata, false);
        let out = g.attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(out).data(), &vdata);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let q = leaf(&mut g, &[1, 1, 6], &[0.0; 6], false);
        assert!(matches!(g.attention(q, q, q, 4), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn linear_rejects_mismatched_input() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 3], &[0.0; 6], false);
        let w = leaf(&mut g, &[4, 2], &[0.0; 8], true);
        assert!(matches!(g.linear(x, w, None), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sparse_and_dense_linear_agree() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let run = |x_grad: bool| {
            let mut g = Graph::<f64>::new();
            let xv = leaf(&mut g, &[4, 4], &x, x_grad);
            let wv = leaf(&mut g, &[4, 3], &w, true);
            let y = g.linear(xv, wv, None).unwrap();
            let t = g.tanh(y);
            let loss = g.row_mse(t, &[0.25; 12], None, true).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(y).data().to_vec(), grads.get(wv).unwrap().to_vec())
        };
        let (ys, gs) = run(false);
        let (yd, gd) = run(true);
        for (a, b) in ys.iter().zip(&yd).chain(gs.iter().zip(&gd)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 5], &[1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.5, 0.5, 7.0, 2.0], false);
        let gain = leaf(&mut g, &[5], &[1.0; 5], false);
        let shift = leaf(&mut g, &[5], &[0.0; 5], false);
        let y = g.layer_norm(x, gain, shift, 1e-5).unwrap();
        for row in g.value(y).data().chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_stays_finite() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 4], &[3.0; 4], true);
        let gain = leaf(&mut g, &[4], &[1.0, 2.0, 3.0, 4.0], true);
        let shift = leaf(&mut g, &[4], &[0.0; 4], true);
        let y = g.layer_norm(x, gain, shift, 1e-5).unwrap();
        let loss = g.row_mse(y, &[1.0, 0.0, -1.0, 2.0], None, true).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::<f64>::new();
        let p = leaf(&mut g, &[4], &[0.5; 4], true);
        let l = g.bce(p, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn row_mse_with_empty_mask_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0], true);
        let l = g.row_mse(p, &[0.0; 4], Some(&[0.0, 0.0]), true).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).map_or(true, |d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn clipped_surrogate_plateau_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        // ratio = e^0.5 > 1.2 with positive advantage: clipped branch is active.
        let logp = leaf(&mut g, &[2], &[0.5, 0.0], true);
        let l = g.ppo_surrogate(logp, &[0.0, 0.0], &[1.0, 1.0], 0.2).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get(logp).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = leaf(&mut g, &[1], &[0.0], true);
        let l = g.bce(p, &[1.0]).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::NonFiniteValue(_))));
    }
}
