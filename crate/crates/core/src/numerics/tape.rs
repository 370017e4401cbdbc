use std::sync::Arc;

use super::tensor::numel;
use super::{NumericsError, Real, Tensor};
use crate::model::AttentionMask;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive stand-in for −∞ at masked attention logits.
pub const MASK_SURROGATE: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: T },
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { src: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Combine(Vec<(Var, T)>),
    CrossEntropy { logits: Var, targets: Vec<usize>, active: Vec<bool>, probs: Vec<T>, count: usize },
    MaskedMse { pred: Var, target: Vec<T>, rows: Vec<bool>, denom: T },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations in evaluation order so that a reverse sweep
/// can propagate adjoints. Nodes are appended only, so every node's inputs
/// precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (numel(shape) / cols, cols)
        }
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + three * k * x * x);
    (y, dy)
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        if n.shape.is_empty() {
            Tensor::scalar(n.value[0])
        } else {
            Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well formed")
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NumericsError::dim(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, NumericsError> {
        if numel(&shape) != data.len() {
            return Err(NumericsError::dim("constant", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` given as `N×K`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(NumericsError::dim(
                "matmul",
                format!("inner extents differ: {m}x{k} by {}x{}", kb, n),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::dim(
                op,
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var, NumericsError> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`N` vector to every trailing-dimension row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, cols) = rows_cols(self.shape(x));
        if numel(self.shape(row)) != cols || self.shape(x).is_empty() {
            return Err(NumericsError::dim(
                "add_row",
                format!("row of {:?} against {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.value(row);
        let out = self.value(x).chunks(cols).flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b)).collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax. Entries with `mask.allow(i, j) == false` are replaced
    /// by a large negative surrogate before normalization and come out as 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Arc<AttentionMask>>) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        if let Some(mk) = mask {
            if mk.rows() != m || mk.cols() != n {
                return Err(NumericsError::dim(
                    "softmax_rows",
                    format!("{}x{} mask for {m}x{n} input", mk.rows(), mk.cols()),
                ));
            }
        }
        let surrogate = T::from_f64_lossy(MASK_SURROGATE);
        let mut out = Vec::with_capacity(m * n);
        let xv = self.value(x);
        let mut row = vec![T::zero(); n];
        for i in 0..m {
            let src = &xv[i * n..(i + 1) * n];
            match mask {
                Some(mk) => {
                    let allow = mk.row(i);
                    if !allow.iter().any(|&a| a) {
                        return Err(NumericsError::Contract(format!("softmax row {i} is fully masked")));
                    }
                    for j in 0..n {
                        row[j] = if allow[j] { src[j] } else { surrogate };
                    }
                }
                None => row.copy_from_slice(src),
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            out.extend(row.iter().map(|&v| v * inv));
            if let Some(mk) = mask {
                debug_assert!(mk.row(i).iter().zip(&out[i * n..]).all(|(&a, &p)| a || p == T::zero()));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(x), rg))
    }

    /// Per-vector normalization over the trailing dimension followed by an
    /// affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if shape.is_empty() || numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(NumericsError::dim(
                "layer_norm",
                format!("input {shape:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let src = &xv[r * d..(r + 1) * d];
            let mean = src.iter().copied().sum::<T>() / dn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (src[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row gather from a matrix (embedding lookup, position selection).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("gather_rows", src)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::dim("gather_rows", format!("row {bad} out of {r}")));
        }
        if rows.is_empty() {
            return Err(NumericsError::dim("gather_rows", "empty row selection".into()));
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows { src, rows: rows.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::dim("concat_rows", "nothing to concatenate".into()));
        }
        let (_, c) = self.dims2("concat_rows", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (r, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(NumericsError::dim("concat_rows", format!("column extents {pc} vs {c}")));
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![total, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::dim("concat_cols", "nothing to concatenate".into()));
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(NumericsError::dim("concat_cols", format!("row extents {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(NumericsError::dim("slice_cols", format!("[{start}, {}) of {c} columns", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.value(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    /// `Σ cᵢ·xᵢ` over same-shape inputs.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var, NumericsError> {
        let Some(&(first, _)) = terms.first() else {
            return Err(NumericsError::dim("combine", "no terms".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); numel(&shape)];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(NumericsError::dim("combine", format!("{:?} vs {shape:?}", self.shape(v))));
            }
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(shape, out, Op::Combine(terms.to_vec()), rg))
    }

    /// Mean token negative log-likelihood over rows not listed in `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[usize]) -> Result<Var, NumericsError> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(NumericsError::dim("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::Contract(format!("target {t} outside vocabulary of {v}")));
        }
        if let Some(&i) = ignore.iter().find(|&&i| i >= n) {
            return Err(NumericsError::Contract(format!("ignored position {i} outside {n} rows")));
        }
        let mut active = vec![true; n];
        for &i in ignore {
            active[i] = false;
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(NumericsError::Contract("cross_entropy: every position is ignored".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp();
                s += *p;
            }
            let inv = T::one() / s;
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p *= inv);
            if active[i] {
                total += mx + s.ln() - row[targets[i]];
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), active, probs, count },
            rg,
        ))
    }

    /// Squared error averaged over the entries of rows where `rows[i]` is set;
    /// other rows contribute neither loss nor gradient.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], rows: &[bool]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("masked_mse", pred)?;
        if target.len() != r * c || rows.len() != r {
            return Err(NumericsError::dim(
                "masked_mse",
                format!("{r}x{c} prediction, {} target values, {} row flags", target.len(), rows.len()),
            ));
        }
        let active = rows.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(NumericsError::Contract("masked_mse: mask selects no rows".into()));
        }
        let denom = T::from_usize(active * c).unwrap();
        let pv = self.value(pred);
        let mut s = T::zero();
        for i in (0..r).filter(|&i| rows[i]) {
            for j in 0..c {
                let d = pv[i * c + j] - target[i * c + j];
                s += d * d;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Vec::new(),
            vec![s / denom],
            Op::MaskedMse { pred, target: target.to_vec(), rows: rows.to_vec(), denom },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Returns adjoints for every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                if self.rg(a) {
                    let ga = acc(grads, a, m * k);
                    // dA = dC · op(B)ᵀ
                    T::gemm(m, n, k, g, false, val(b), !trans_b, ga, true);
                }
                if self.rg(b) {
                    let gb = acc(grads, b, k * n);
                    if trans_b {
                        // B is N×K: dB = dCᵀ · A
                        T::gemm(n, m, k, g, true, val(a), false, gb, true);
                    } else {
                        // dB = Aᵀ · dC
                        T::gemm(k, m, n, val(a), true, g, false, gb, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, T::one()), (b, T::one())] {
                    if self.rg(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(o, &d)| *o += sign * d);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, T::one()), (b, -T::one())] {
                    if self.rg(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(o, &d)| *o += sign * d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = val(b);
                    acc(grads, a, g.len()).iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (&d, &y))| *o += d * y);
                }
                if self.rg(b) {
                    let av = val(a);
                    acc(grads, b, g.len()).iter_mut().zip(g.iter().zip(av)).for_each(|(o, (&d, &x))| *o += d * x);
                }
            }
            &Op::AddRow { x, row } => {
                if self.rg(x) {
                    acc(grads, x, g.len()).iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if self.rg(row) {
                    let c = len(row);
                    let gr = acc(grads, row, c);
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if self.rg(x) {
                    acc(grads, x, g.len()).iter_mut().zip(g).for_each(|(o, &d)| *o += d * factor);
                }
            }
            &Op::Gelu(x) => {
                if self.rg(x) {
                    let xv = val(x);
                    let gx = acc(grads, x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if self.rg(x) {
                    let n = node.shape[1];
                    let y = &node.value;
                    let gx = acc(grads, x, y.len());
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let out = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gain);
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (h, dy) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * h[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, d);
                    for dy in g.chunks(d) {
                        gb.iter_mut().zip(dy).for_each(|(o, &v)| *o += v);
                    }
                }
                if self.rg(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let gx = acc(grads, *x, g.len());
                    let mut gh = vec![T::zero(); d];
                    for (r, (h, dy)) in xhat.chunks(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            gh[j] = dy[j] * gv[j];
                        }
                        let m1 = gh.iter().copied().sum::<T>() / dn;
                        let m2 = gh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (gh[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                if self.rg(*src) {
                    let c = node.shape[1];
                    let gs = acc(grads, *src, len(*src));
                    for (k, &i) in rows.iter().enumerate() {
                        gs[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if self.rg(p) {
                        acc(grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(o, &d)| *o += d);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.rg(p) {
                        let gp = acc(grads, p, r * w);
                        for i in 0..r {
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + col..i * total + col + w])
                                .for_each(|(o, &d)| *o += d);
                        }
                    }
                    col += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if self.rg(x) {
                    let (r, w) = (node.shape[0], node.shape[1]);
                    let c = self.nodes[x.0].shape[1];
                    let gx = acc(grads, x, r * c);
                    for i in 0..r {
                        gx[i * c + start..i * c + start + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(o, &d)| *o += d);
                    }
                }
            }
            &Op::Sum(x) => {
                if self.rg(x) {
                    acc(grads, x, len(x)).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(x) => {
                if self.rg(x) {
                    let s = g[0] / T::from_usize(len(x)).unwrap();
                    acc(grads, x, len(x)).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    if self.rg(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(o, &d)| *o += c * d);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, active, probs, count } => {
                if self.rg(*logits) {
                    let v = self.nodes[logits.0].shape[1];
                    let s = g[0] / T::from_usize(*count).unwrap();
                    let gl = acc(grads, *logits, probs.len());
                    for (i, &t) in targets.iter().enumerate() {
                        if !active[i] {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += s * probs[i * v + j];
                        }
                        gl[i * v + t] -= s;
                    }
                }
            }
            Op::MaskedMse { pred, target, rows, denom } => {
                if self.rg(*pred) {
                    let c = self.nodes[pred.0].shape[1];
                    let pv = val(*pred);
                    let two = T::from_f64_lossy(2.0);
                    let s = two * g[0] / *denom;
                    let gp = acc(grads, *pred, pv.len());
                    for (i, _) in rows.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..c {
                            gp[i * c + j] += s * (pv[i * c + j] - target[i * c + j]);
                        }
                    }
                }
            }
        }
    }
}
