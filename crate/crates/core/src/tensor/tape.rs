use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// The closed set of differentiable operations a tape can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    GatherRows,
    Embedding,
    MeanAxis,
    LayerNorm,
    Gelu,
    Softmax,
    LogSoftmax,
    CrossEntropy,
    Dot,
    Transpose,
}

impl Primitive {
    pub const ALL: [Primitive; 16] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Concat,
        Primitive::GatherRows,
        Primitive::Embedding,
        Primitive::MeanAxis,
        Primitive::LayerNorm,
        Primitive::Gelu,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::CrossEntropy,
        Primitive::Dot,
        Primitive::Transpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Concat => "concat",
            Primitive::GatherRows => "gather_rows",
            Primitive::Embedding => "embedding",
            Primitive::MeanAxis => "mean_axis",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::Dot => "dot",
            Primitive::Transpose => "transpose",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize, scalar_rhs: bool },
    Scale { a: usize, factor: f64 },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    GatherRows { x: usize, rows: Vec<usize>, cols: usize },
    Embedding { table: usize, ids: Vec<usize>, cols: usize },
    MeanAxis { x: usize, over_rows: bool, rows: usize, cols: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64>, cols: usize },
    Gelu { x: usize },
    Softmax { x: usize, cols: usize },
    LogSoftmax { x: usize, cols: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64>, cols: usize },
    Dot { a: usize, b: usize },
    Transpose { x: usize, rows: usize, cols: usize },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Add { .. } => Primitive::Add,
            Op::Sub { .. } => Primitive::Sub,
            Op::Mul { .. } => Primitive::Mul,
            Op::Scale { .. } => Primitive::Scale,
            Op::Concat { .. } => Primitive::Concat,
            Op::GatherRows { .. } => Primitive::GatherRows,
            Op::Embedding { .. } => Primitive::Embedding,
            Op::MeanAxis { .. } => Primitive::MeanAxis,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Gelu { .. } => Primitive::Gelu,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::LogSoftmax { .. } => Primitive::LogSoftmax,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::Dot { .. } => Primitive::Dot,
            Op::Transpose { .. } => Primitive::Transpose,
        })
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` influenced it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

/// Record of the operations of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn row_log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    out.iter_mut().zip(row).for_each(|(o, x)| *o = x - lse);
}

fn row_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff("variable was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let index = self.nodes.len();
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var { tape: self.id, index }
    }

    fn grad_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn matrix_dims(&self, i: usize) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    /// Records a leaf; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.needs_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.requires_grad(false))
    }

    /// Places a stored parameter on the tape, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.idx(v).expect("foreign variable")].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("foreign variable")].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[self.idx(v).expect("foreign variable")];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("recorded node has a valid shape")
    }

    /// Which primitive produced `v` (`None` for leaves).
    pub fn primitive_of(&self, v: Var) -> Option<Primitive> {
        self.idx(v).ok().and_then(|i| self.nodes[i].op.primitive())
    }

    // ---- primitives -------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        let (m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape(format!("matmul needs rank-2 operands, got {sa:?} x {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (ad, bd) = (&self.nodes[ia].data, &self.nodes[ib].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
        let rg = self.grad_any(&[ia, ib]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ia, b: ib, m, k, n }, rg))
    }

    fn binary_shapes(&self, ia: usize, ib: usize, what: &str) -> Result<bool> {
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa == sb {
            return Ok(false);
        }
        let last = *sa.last().unwrap();
        let b_is_row = match sb.as_slice() {
            [c] => *c == last,
            [1, c] => *c == last,
            _ => false,
        };
        if sa.len() == 2 && b_is_row {
            Ok(true)
        } else {
            Err(Error::shape(format!("{what}: incompatible shapes {sa:?} and {sb:?}")))
        }
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let broadcast = self.binary_shapes(ia, ib, "add")?;
        let out = self.zip_broadcast(ia, ib, |x, y| x + y);
        let rg = self.grad_any(&[ia, ib]);
        Ok(self.push(self.nodes[ia].shape.clone(), out, Op::Add { a: ia, b: ib, broadcast }, rg))
    }

    /// Elementwise difference, with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let broadcast = self.binary_shapes(ia, ib, "sub")?;
        let out = self.zip_broadcast(ia, ib, |x, y| x - y);
        let rg = self.grad_any(&[ia, ib]);
        Ok(self.push(self.nodes[ia].shape.clone(), out, Op::Sub { a: ia, b: ib, broadcast }, rg))
    }

    fn zip_broadcast(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (ad, bd) = (&self.nodes[ia].data, &self.nodes[ib].data);
        let c = bd.len();
        ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
    }

    /// Elementwise product; `b` may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let scalar_rhs = if self.nodes[ia].shape == self.nodes[ib].shape {
            false
        } else if self.nodes[ib].data.len() == 1 {
            true
        } else {
            return Err(Error::shape(format!(
                "mul: incompatible shapes {:?} and {:?}",
                self.nodes[ia].shape, self.nodes[ib].shape
            )));
        };
        let out = self.zip_broadcast(ia, ib, |x, y| x * y);
        let rg = self.grad_any(&[ia, ib]);
        Ok(self.push(self.nodes[ia].shape.clone(), out, Op::Mul { a: ia, b: ib, scalar_rhs }, rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].data.iter().map(|x| x * factor).collect();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(self.nodes[ia].shape.clone(), out, Op::Scale { a: ia, factor }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let lead = &self.nodes[ids[0]].shape[..self.nodes[ids[0]].shape.len() - 1];
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = &self.nodes[i].shape;
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape(format!(
                    "concat: leading dimensions differ ({:?} vs {s:?})",
                    self.nodes[ids[0]].shape
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in ids.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.grad_any(&ids);
        let parts = ids.into_iter().zip(widths).collect();
        Ok(self.push(shape, out, Op::Concat { parts, rows }, rg))
    }

    fn gather(&self, ix: usize, rows: &[usize], what: &str) -> Result<(usize, Vec<f64>)> {
        let (r, c) = match self.nodes[ix].shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("{what} needs a rank-2 tensor, got {s:?}"))),
        };
        if rows.is_empty() {
            return Err(Error::shape(format!("{what}: empty row list")));
        }
        let d = &self.nodes[ix].data;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(Error::shape(format!("{what}: row {row} out of range for {r} rows")));
            }
            out.extend_from_slice(&d[row * c..(row + 1) * c]);
        }
        Ok((c, out))
    }

    /// Selects rows of a rank-2 tensor (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (cols, out) = self.gather(ix, rows, "gather_rows")?;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(vec![rows.len(), cols], out, Op::GatherRows { x: ix, rows: rows.to_vec(), cols }, rg))
    }

    /// Contiguous rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    /// Looks up embedding rows for a token id sequence.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (cols, out) = self.gather(it, ids, "embedding")?;
        let rg = self.nodes[it].requires_grad;
        Ok(self.push(vec![ids.len(), cols], out, Op::Embedding { table: it, ids: ids.to_vec(), cols }, rg))
    }

    /// Mean along `axis`, keeping rank for matrices. A vector reduces to `[1]`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.nodes[ix].shape.clone();
        let (rows, cols, over_rows, out_shape) = match (shape.as_slice(), axis) {
            ([n], 0) => (1, *n, false, vec![1]),
            ([r, c], 0) => (*r, *c, true, vec![1, *c]),
            ([r, c], 1) => (*r, *c, false, vec![*r, 1]),
            _ => return Err(Error::shape(format!("mean_axis: axis {axis} invalid for {shape:?}"))),
        };
        let d = &self.nodes[ix].data;
        let out = if over_rows {
            (0..cols).map(|j| (0..rows).map(|i| d[i * cols + j]).sum::<f64>() / rows as f64).collect()
        } else {
            d.chunks(cols).map(|row| row.iter().sum::<f64>() / cols as f64).collect()
        };
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(out_shape, out, Op::MeanAxis { x: ix, over_rows, rows, cols }, rg))
    }

    /// Normalizes each row to zero mean / unit variance, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (_, cols) = self.matrix_dims(ix)?;
        if self.nodes[ig].data.len() != cols || self.nodes[ib].data.len() != cols {
            return Err(Error::shape(format!(
                "layer_norm: gain/bias must have {cols} values, got {}/{}",
                self.nodes[ig].data.len(),
                self.nodes[ib].data.len()
            )));
        }
        let d = &self.nodes[ix].data;
        let (g, b) = (&self.nodes[ig].data, &self.nodes[ib].data);
        let mut xhat = Vec::with_capacity(d.len());
        let mut inv_std = Vec::with_capacity(d.len() / cols);
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.grad_any(&[ix, ig, ib]);
        let shape = self.nodes[ix].shape.clone();
        Ok(self.push(shape, out, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std, cols }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out =
            self.nodes[ix].data.iter().map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh())).collect();
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(self.nodes[ix].shape.clone(), out, Op::Gelu { x: ix }, rg))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (_, cols) = self.matrix_dims(ix)?;
        let d = &self.nodes[ix].data;
        let mut out = vec![0.0; d.len()];
        for (row, o) in d.chunks(cols).zip(out.chunks_mut(cols)) {
            row_softmax(row, o);
        }
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(self.nodes[ix].shape.clone(), out, Op::Softmax { x: ix, cols }, rg))
    }

    /// Log-softmax over the last axis (log-sum-exp stabilized).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (_, cols) = self.matrix_dims(ix)?;
        let d = &self.nodes[ix].data;
        let mut out = vec![0.0; d.len()];
        for (row, o) in d.chunks(cols).zip(out.chunks_mut(cols)) {
            row_log_softmax(row, o);
        }
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(self.nodes[ix].shape.clone(), out, Op::LogSoftmax { x: ix, cols }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (rows, cols) = self.matrix_dims(il)?;
        if targets.len() != rows {
            return Err(Error::shape(format!("cross_entropy: {rows} logit rows but {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape(format!("cross_entropy: target {t} out of range for {cols} classes")));
        }
        let d = &self.nodes[il].data;
        let mut logp = vec![0.0; d.len()];
        for (row, o) in d.chunks(cols).zip(logp.chunks_mut(cols)) {
            row_log_softmax(row, o);
        }
        let loss = -targets.iter().enumerate().map(|(r, &t)| logp[r * cols + t]).sum::<f64>() / rows as f64;
        let probs = logp.iter().map(|l| l.exp()).collect();
        let rg = self.nodes[il].requires_grad;
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs, cols }, rg))
    }

    /// Inner product of two same-sized tensors, flattened. Output `[1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].data.len() != self.nodes[ib].data.len() {
            return Err(Error::shape(format!(
                "dot: {:?} and {:?} differ in size",
                self.nodes[ia].shape, self.nodes[ib].shape
            )));
        }
        let v = self.nodes[ia].data.iter().zip(&self.nodes[ib].data).map(|(x, y)| x * y).sum();
        let rg = self.grad_any(&[ia, ib]);
        Ok(self.push(vec![1], vec![v], Op::Dot { a: ia, b: ib }, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = match self.nodes[ix].shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("transpose needs rank 2, got {s:?}"))),
        };
        let d = &self.nodes[ix].data;
        let mut out = vec![0.0; d.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = d[i * cols + j];
            }
        }
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x: ix, rows, cols }, rg))
    }

    // ---- composites (built only from primitives) -------------------------

    /// Sum of all elements, as mean followed by scaling.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let m = match shape.len() {
            1 => self.mean_axis(x, 0)?,
            2 => {
                let r = self.mean_axis(x, 1)?;
                self.mean_axis(r, 0)?
            }
            _ => return Err(Error::shape(format!("sum: unsupported rank {}", shape.len()))),
        };
        self.scale(m, n as f64)
    }

    /// Stacks equal-width rows (each `[1, c]` or `[c]`) into a `[n, c]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.len() == 1 {
            let c = *self.shape(rows[0]).last().unwrap();
            let t = self.as_row(rows[0], c)?;
            return Ok(t);
        }
        let mut cols = Vec::with_capacity(rows.len());
        for &r in rows {
            let c = *self.shape(r).last().unwrap();
            let row = self.as_row(r, c)?;
            cols.push(self.transpose(row)?);
        }
        let wide = self.concat(&cols)?;
        self.transpose(wide)
    }

    fn as_row(&mut self, v: Var, c: usize) -> Result<Var> {
        match self.shape(v) {
            [_] => {
                // A rank-1 vector becomes a 1-row matrix via a one-row gather.
                let t = self.concat(&[v])?;
                let i = self.idx(t)?;
                self.nodes[i].shape = vec![1, c];
                Ok(t)
            }
            [1, _] => Ok(v),
            s => Err(Error::shape(format!("stack_rows: expected a row, got {s:?}"))),
        }
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root)?;
        if self.nodes[r].data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[r].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backward_node(node, g, lower);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let n = &self.nodes;
        let wants = |i: usize| n[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n: cols } => {
                let (ad, bd) = (&n[a].data, &n[b].data);
                if wants(a) {
                    add_into(&mut grads[a], m * k, |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bd[p * cols..(p + 1) * cols];
                                let grow = &g[i * cols..(i + 1) * cols];
                                da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(b) {
                    add_into(&mut grads[b], k * cols, |db| {
                        for i in 0..m {
                            let grow = &g[i * cols..(i + 1) * cols];
                            for p in 0..k {
                                let x = ad[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                db[p * cols..(p + 1) * cols].iter_mut().zip(grow).for_each(|(d, y)| *d += x * y);
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b, broadcast } | &Op::Sub { a, b, broadcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(a) {
                    add_into(&mut grads[a], g.len(), |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                }
                if wants(b) {
                    let c = n[b].data.len();
                    add_into(&mut grads[b], c, |db| {
                        if broadcast {
                            for row in g.chunks(c) {
                                db.iter_mut().zip(row).for_each(|(d, x)| *d += sign * x);
                            }
                        } else {
                            db.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                        }
                    });
                }
            }
            &Op::Mul { a, b, scalar_rhs } => {
                let (ad, bd) = (&n[a].data, &n[b].data);
                if wants(a) {
                    add_into(&mut grads[a], g.len(), |da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * if scalar_rhs { bd[0] } else { bd[i] };
                        }
                    });
                }
                if wants(b) {
                    add_into(&mut grads[b], bd.len(), |db| {
                        if scalar_rhs {
                            db[0] += g.iter().zip(ad).map(|(x, y)| x * y).sum::<f64>();
                        } else {
                            db.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * ad[i]);
                        }
                    });
                }
            }
            &Op::Scale { a, factor } => {
                add_into(&mut grads[a], g.len(), |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x));
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if wants(p) {
                        add_into(&mut grads[p], rows * w, |dp| {
                            for r in 0..*rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x: src, rows: idx, cols } | Op::Embedding { table: src, ids: idx, cols } => {
                let len = n[*src].data.len();
                add_into(&mut grads[*src], len, |dx| {
                    for (i, &row) in idx.iter().enumerate() {
                        dx[row * cols..(row + 1) * cols]
                            .iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(d, x)| *d += x);
                    }
                });
            }
            &Op::MeanAxis { x, over_rows, rows, cols } => {
                add_into(&mut grads[x], rows * cols, |dx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] += if over_rows { g[j] / rows as f64 } else { g[i] / cols as f64 };
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std, cols } => {
                let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
                let gd = &n[gain].data;
                if wants(x) {
                    add_into(&mut grads[x], xhat.len(), |dx| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let base = r * cols;
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..cols {
                                let dh = g[base + j] * gd[j];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[base + j];
                            }
                            mean_dh /= cols as f64;
                            mean_dh_h /= cols as f64;
                            for j in 0..cols {
                                let dh = g[base + j] * gd[j];
                                dx[base + j] += is * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                            }
                        }
                    });
                }
                if wants(gain) {
                    add_into(&mut grads[gain], cols, |dg| {
                        for (i, (gv, h)) in g.iter().zip(xhat).enumerate() {
                            dg[i % cols] += gv * h;
                        }
                    });
                }
                if wants(bias) {
                    add_into(&mut grads[bias], cols, |db| {
                        for (i, gv) in g.iter().enumerate() {
                            db[i % cols] += gv;
                        }
                    });
                }
            }
            &Op::Gelu { x } => {
                let xd = &n[x].data;
                add_into(&mut grads[x], g.len(), |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let v = xd[i];
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let dydx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        *d += g[i] * dydx;
                    }
                });
            }
            &Op::Softmax { x, cols } => {
                let y = &node.data;
                add_into(&mut grads[x], g.len(), |dx| {
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, cols } => {
                let y = &node.data;
                add_into(&mut grads[x], g.len(), |dx| {
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, cols } => {
                let rows = targets.len() as f64;
                let g0 = g[0];
                add_into(&mut grads[*logits], probs.len(), |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..*cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * cols + j] += g0 * (probs[r * cols + j] - onehot) / rows;
                        }
                    }
                });
            }
            &Op::Dot { a, b } => {
                let g0 = g[0];
                let (ad, bd) = (&n[a].data, &n[b].data);
                if wants(a) {
                    add_into(&mut grads[a], ad.len(), |da| da.iter_mut().zip(bd).for_each(|(d, y)| *d += g0 * y));
                }
                if wants(b) {
                    add_into(&mut grads[b], bd.len(), |db| db.iter_mut().zip(ad).for_each(|(d, y)| *d += g0 * y));
                }
            }
            &Op::Transpose { x, rows, cols } => {
                add_into(&mut grads[x], g.len(), |dx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
        }
    }
}
