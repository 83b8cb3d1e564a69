use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows of `x` scaled by a coefficient, multiplied by one kernel matrix of a
/// stacked weight tensor and summed into output rows:
/// `out[target] += coef · x[source] · W[kernel]`.
///
/// Entries are grouped by kernel so each group is one dense product.
#[derive(Debug, Clone)]
pub struct KernelScatterPlan<T> {
    pub n_out: usize,
    pub groups: Vec<KernelGroup<T>>,
}

#[derive(Debug, Clone)]
pub struct KernelGroup<T> {
    pub kernel: usize,
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub coefs: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Concat(Vec<Var>),
    Mean { input: Var, axis: usize },
    SumAll(Var),
    ScatterSum { input: Var, index: Arc<[usize]> },
    GatherRows { input: Var, index: Arc<[usize]> },
    LogSoftmax(Var),
    Pick { input: Var, index: Arc<[usize]> },
    KernelScatter { x: Var, weight: Var, plan: Arc<KernelScatterPlan<T>> },
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` has the shape of `a` without its leading axis.
    Leading,
    /// `b` is `[rows, 1]` against `a` `[rows, cols]`.
    Column,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Some(Broadcast::Leading)
    } else if a.len() == 2 && b == [a[0], 1] {
        Some(Broadcast::Column)
    } else {
        None
    }
}

#[inline]
fn bcast_index(kind: Broadcast, i: usize, cols: usize, b_len: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Leading => i % b_len,
        Broadcast::Column => i / cols,
    }
}

/// Dynamically recorded computation for reverse-mode differentiation.
///
/// Values are appended as operations run; [`Tape::backward`] walks the
/// record in reverse. A tape belongs to one thread of execution; separate
/// samples can be processed on separate tapes and their gradients summed.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a named parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Repeated calls with the same
    /// name return the same variable, so gradients from every use add up.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter '{name}'")))?;
        let v = self.push(t.clone(), Op::Leaf, true);
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// `[n,k]·[k,m] → [n,m]`; a rank-1 left operand is a row vector and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (n, k) = match sa.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let m = match sb.as_slice() {
            [k2, m] if *k2 == k => *m,
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let shape = if sa.len() == 1 { vec![m] } else { vec![n, m] };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
        let cols = ta.shape().last().copied().unwrap_or(1);
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bcast_index(kind, i, cols, bd.len())]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, self.ng(&[a, b])))
    }

    /// Elementwise sum; `b` may broadcast over the leading axis of `a`
    /// (bias add) or be a `[rows, 1]` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect()).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )
        .expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    /// Concatenation along the last axis. Inputs must agree on all other
    /// axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(Error::shape("concat", "scalar input"));
        }
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            widths.push(*s.last().expect("non-scalar"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Mean over `axis` of a rank-1 or rank-2 tensor; the axis is removed.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (shape, data) = match (t.shape(), axis) {
            ([n], 0) if *n > 0 => (vec![], vec![t.data().iter().copied().sum::<T>() / T::from_f64(*n as f64)]),
            ([n, d], 0) if *n > 0 => {
                let mut out = vec![T::zero(); *d];
                for r in 0..*n {
                    for (o, &x) in out.iter_mut().zip(&t.data()[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                let inv = T::one() / T::from_f64(*n as f64);
                (vec![*d], out.into_iter().map(|x| x * inv).collect())
            }
            ([n, d], 1) if *d > 0 => {
                let inv = T::one() / T::from_f64(*d as f64);
                let out = (0..*n)
                    .map(|r| t.data()[r * d..(r + 1) * d].iter().copied().sum::<T>() * inv)
                    .collect();
                (vec![*n], out)
            }
            (s, _) => return Err(Error::shape("mean", format!("axis {axis} of {s:?}"))),
        };
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mean { input: a, axis }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Sums row `e` of `input` into output row `index[e]`; output has
    /// `rows` rows.
    pub fn scatter_sum(&mut self, input: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        let t = self.value(input);
        let (e, d) = match t.shape() {
            [e, d] => (*e, *d),
            s => return Err(Error::shape("scatter_sum", format!("input {s:?} must be rank 2"))),
        };
        if index.len() != e {
            return Err(Error::shape("scatter_sum", format!("{} indices for {e} rows", index.len())));
        }
        let mut out = vec![T::zero(); rows * d];
        for (r, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(Error::shape("scatter_sum", format!("index {dst} >= {rows}")));
            }
            for (o, &x) in out[dst * d..(dst + 1) * d].iter_mut().zip(&t.data()[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::ScatterSum { input, index }, ng))
    }

    /// Output row `e` is input row `index[e]`.
    pub fn gather_rows(&mut self, input: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(input);
        let (n, d) = match t.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("gather_rows", format!("input {s:?} must be rank 2"))),
        };
        let mut out = Vec::with_capacity(index.len() * d);
        for &src in index.iter() {
            if src >= n {
                return Err(Error::shape("gather_rows", format!("index {src} >= {n}")));
            }
            out.extend_from_slice(&t.data()[src * d..(src + 1) * d]);
        }
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::new(vec![index.len(), d], out)?, Op::GatherRows { input, index }, ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t
            .as_2d()
            .filter(|_| t.rank() >= 1)
            .ok_or_else(|| Error::shape("log_softmax", format!("{:?}", t.shape())))?;
        let mut out = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(t.shape().to_vec(), out)?, Op::LogSoftmax(a), ng))
    }

    /// `out[i] = input[i, index[i]]` for a `[rows, cols]` input; a rank-1
    /// input is one row.
    pub fn pick(&mut self, input: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(input);
        let (rows, cols) = match t.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => return Err(Error::shape("pick", format!("input {s:?} must be rank 1 or 2"))),
        };
        if index.len() != rows {
            return Err(Error::shape("pick", format!("{} indices for {rows} rows", index.len())));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in index.iter().enumerate() {
            if c >= cols {
                return Err(Error::Invalid(format!("class index {c} out of range for {cols} classes")));
            }
            out.push(t.data()[r * cols + c]);
        }
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::vector(out), Op::Pick { input, index }, ng))
    }

    /// See [`KernelScatterPlan`]. `x` is `[n, in]`, `weight` is
    /// `[kernels, in, out]`; the result is `[plan.n_out, out]`.
    pub fn kernel_scatter(&mut self, x: Var, weight: Var, plan: Arc<KernelScatterPlan<T>>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (n, din) = match tx.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("kernel_scatter", format!("x {s:?} must be rank 2"))),
        };
        let (nk, dout) = match tw.shape() {
            [k, i, o] if *i == din => (*k, *o),
            s => return Err(Error::shape("kernel_scatter", format!("weight {s:?} vs x {:?}", tx.shape()))),
        };
        let mut out = vec![T::zero(); plan.n_out * dout];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for g in &plan.groups {
            if g.kernel >= nk {
                return Err(Error::shape("kernel_scatter", format!("kernel {} >= {nk}", g.kernel)));
            }
            let m = g.sources.len();
            xs.clear();
            for (&s, &c) in g.sources.iter().zip(&g.coefs) {
                if s >= n {
                    return Err(Error::shape("kernel_scatter", format!("source {s} >= {n}")));
                }
                xs.extend(tx.data()[s * din..(s + 1) * din].iter().map(|&v| v * c));
            }
            ys.clear();
            ys.resize(m * dout, T::zero());
            let wk = &tw.data()[g.kernel * din * dout..(g.kernel + 1) * din * dout];
            T::gemm(m, din, dout, &xs, false, wk, false, T::zero(), &mut ys);
            for (r, &t) in g.targets.iter().enumerate() {
                for (o, &y) in out[t * dout..(t + 1) * dout].iter_mut().zip(&ys[r * dout..(r + 1) * dout]) {
                    *o += y;
                }
            }
        }
        let ng = self.ng(&[x, weight]);
        Ok(self.push(
            Tensor::new(vec![plan.n_out, dout], out)?,
            Op::KernelScatter { x, weight, plan },
            ng,
        ))
    }

    /// Sign pattern (`input > 0`) of every ReLU on the tape, plus whether any
    /// ReLU input sits exactly at zero.
    pub fn relu_pattern(&self) -> (Vec<bool>, bool) {
        let mut pattern = Vec::new();
        let mut at_kink = false;
        for op in &self.ops {
            if let Op::Relu(a) = op {
                for &x in self.values[a.0].data() {
                    pattern.push(x > T::zero());
                    at_kink |= x == T::zero();
                }
            }
        }
        (pattern, at_kink)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        let mut seed = Tensor::zeros(self.values[loss.0].shape());
        seed.data_mut()[0] = T::one();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces `g` (shaped like the left operand) to the right operand's
    /// shape under the given broadcast.
    fn reduce_bcast(&self, kind: Broadcast, g: &[T], a_shape: &[usize], b_shape: &[usize]) -> Tensor<T> {
        let mut out = Tensor::zeros(b_shape);
        let cols = a_shape.last().copied().unwrap_or(1);
        let bl = out.len();
        let od = out.data_mut();
        for (i, &x) in g.iter().enumerate() {
            od[bcast_index(kind, i, cols, bl)] += x;
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let (n, k) = ta.as_2d().expect("checked in forward");
                let m = tb.shape()[1];
                if self.needs_grad[a.0] {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gd, false, tb.data(), true, T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs_grad[b.0] {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(k, n, m, ta.data(), true, gd, false, T::zero(), &mut db);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(self.ops[i], Op::Sub(..));
                let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
                let kind = broadcast_kind(sa, sb).expect("checked in forward");
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad[b.0] {
                    let mut gb = self.reduce_bcast(kind, gd, sa, sb);
                    if negate {
                        for x in gb.data_mut() {
                            *x = -*x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let kind = broadcast_kind(ta.shape(), tb.shape()).expect("checked in forward");
                let cols = ta.shape().last().copied().unwrap_or(1);
                let bl = tb.len();
                if self.needs_grad[a.0] {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| x * tb.data()[bcast_index(kind, j, cols, bl)])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs_grad[b.0] {
                    let prod: Vec<T> = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    let gb = self.reduce_bcast(kind, &prod, ta.shape(), tb.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let da = gd.iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Relu(a) => {
                let ta = &self.values[a.0];
                let da = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
            }
            Op::Concat(parts) => {
                let total = *g.shape().last().expect("non-scalar");
                let rows = g.len() / total;
                let mut offset = 0;
                for p in parts {
                    let s = self.values[p.0].shape();
                    let w = *s.last().expect("non-scalar");
                    if self.needs_grad[p.0] {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(s.to_vec(), d)?);
                    }
                    offset += w;
                }
            }
            Op::Mean { input, axis } => {
                let ta = &self.values[input.0];
                let mut da = vec![T::zero(); ta.len()];
                match (ta.shape(), *axis) {
                    ([n], 0) => {
                        let v = gd[0] / T::from_f64(*n as f64);
                        da.iter_mut().for_each(|x| *x = v);
                    }
                    ([n, d], 0) => {
                        let inv = T::one() / T::from_f64(*n as f64);
                        for r in 0..*n {
                            for c in 0..*d {
                                da[r * d + c] = gd[c] * inv;
                            }
                        }
                    }
                    ([n, d], 1) => {
                        let inv = T::one() / T::from_f64(*d as f64);
                        for r in 0..*n {
                            for c in 0..*d {
                                da[r * d + c] = gd[r] * inv;
                            }
                        }
                    }
                    _ => unreachable!("checked in forward"),
                }
                self.accumulate(grads, *input, Tensor::new(ta.shape().to_vec(), da)?);
            }
            Op::SumAll(a) => {
                let ta = &self.values[a.0];
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), vec![gd[0]; ta.len()])?);
            }
            Op::ScatterSum { input, index } => {
                let ta = &self.values[input.0];
                let d = ta.shape()[1];
                let mut da = Vec::with_capacity(ta.len());
                for &dst in index.iter() {
                    da.extend_from_slice(&gd[dst * d..(dst + 1) * d]);
                }
                self.accumulate(grads, *input, Tensor::new(ta.shape().to_vec(), da)?);
            }
            Op::GatherRows { input, index } => {
                let ta = &self.values[input.0];
                let d = ta.shape()[1];
                let mut da = vec![T::zero(); ta.len()];
                for (r, &src) in index.iter().enumerate() {
                    for (o, &x) in da[src * d..(src + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *input, Tensor::new(ta.shape().to_vec(), da)?);
            }
            Op::LogSoftmax(a) => {
                let y = &self.values[i];
                let (rows, cols) = y.as_2d().expect("checked in forward");
                let mut da = Vec::with_capacity(y.len());
                for r in 0..rows {
                    let gs: T = gd[r * cols..(r + 1) * cols].iter().copied().sum();
                    for c in 0..cols {
                        let j = r * cols + c;
                        da.push(gd[j] - y.data()[j].exp() * gs);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), da)?);
            }
            Op::Pick { input, index } => {
                let ta = &self.values[input.0];
                let cols = *ta.shape().last().expect("checked in forward");
                let mut da = vec![T::zero(); ta.len()];
                for (r, &c) in index.iter().enumerate() {
                    da[r * cols + c] += gd[r];
                }
                self.accumulate(grads, *input, Tensor::new(ta.shape().to_vec(), da)?);
            }
            Op::KernelScatter { x, weight, plan } => {
                let (tx, tw) = (&self.values[x.0], &self.values[weight.0]);
                let din = tx.shape()[1];
                let dout = tw.shape()[2];
                let mut dx = self.needs_grad[x.0].then(|| vec![T::zero(); tx.len()]);
                let mut dw = self.needs_grad[weight.0].then(|| vec![T::zero(); tw.len()]);
                let mut xs = Vec::new();
                let mut gy = Vec::new();
                let mut gx = Vec::new();
                for grp in &plan.groups {
                    let m = grp.sources.len();
                    gy.clear();
                    for &t in &grp.targets {
                        gy.extend_from_slice(&gd[t * dout..(t + 1) * dout]);
                    }
                    let k0 = grp.kernel * din * dout;
                    if let Some(dw) = dw.as_mut() {
                        xs.clear();
                        for (&s, &c) in grp.sources.iter().zip(&grp.coefs) {
                            xs.extend(tx.data()[s * din..(s + 1) * din].iter().map(|&v| v * c));
                        }
                        T::gemm(din, m, dout, &xs, true, &gy, false, T::one(), &mut dw[k0..k0 + din * dout]);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gx.clear();
                        gx.resize(m * din, T::zero());
                        T::gemm(m, dout, din, &gy, false, &tw.data()[k0..k0 + din * dout], true, T::zero(), &mut gx);
                        for (r, (&s, &c)) in grp.sources.iter().zip(&grp.coefs).enumerate() {
                            for (o, &v) in dx[s * din..(s + 1) * din].iter_mut().zip(&gx[r * din..(r + 1) * din]) {
                                *o += v * c;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, Tensor::new(tw.shape().to_vec(), dw)?);
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter bound on the tape, keyed by name.
    /// Parameters the loss does not depend on get zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
