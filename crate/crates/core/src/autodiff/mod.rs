//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Values live in an arena owned by a [`Graph`]; every operation records
//! its provenance so a single reverse sweep over the tape computes
//! gradients. Execution is eager, single-threaded and deterministic:
//! running the same graph twice produces bit-identical results.
//!
//! The op set is exactly what the segmentation network needs: dense and
//! batched matrix products, broadcasting elementwise arithmetic, axis
//! reductions, sigmoid / leaky-ReLU, row gathering with a shadow index,
//! concatenation, a fused kernel-weighted neighbor sum, a masked row
//! maximum for pooling shortcuts, and a weighted softmax cross-entropy.

mod gradcheck;

pub use gradcheck::grad_check;

use std::rc::Rc;

use crate::{Error, Result};

/// Dense row-major array of f64 with an explicit shape.
///
/// Rank 0 (empty shape) is a scalar with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 or single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Sigmoid,
    /// Slope applies to negative inputs; slope 0 is a plain ReLU.
    LeakyRelu(f64),
}

/// How the smaller operand of an elementwise op maps onto the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    /// Shapes equal.
    None,
    /// `b.shape` is a suffix of `a.shape`; b repeats along leading axes.
    Leading,
    /// `b.shape` is a prefix of `a.shape`; b repeats along trailing axes.
    Trailing,
}

/// Shared index table for gather / masked-max ops. Row-major `rows x width`,
/// entries equal to `shadow` mark padding.
#[derive(Clone, Debug)]
pub struct IndexTable {
    pub indices: Rc<Vec<u32>>,
    pub rows: usize,
    pub width: usize,
    /// Shadow index, equal to the support row count.
    pub shadow: u32,
}

impl IndexTable {
    pub fn new(indices: Rc<Vec<u32>>, rows: usize, width: usize, shadow: u32) -> Self {
        assert_eq!(indices.len(), rows * width);
        IndexTable { indices, rows, width, shadow }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Value,
        b: Value,
    },
    BatchedMatMul {
        a: Value,
        b: Value,
    },
    Elementwise {
        kind: EwKind,
        a: Value,
        b: Value,
        bcast: Bcast,
    },
    Reduce {
        kind: ReduceKind,
        x: Value,
        axis: usize,
        /// Flat input offset of the winning element, for max only.
        argmax: Vec<u32>,
    },
    Activation {
        kind: ActKind,
        x: Value,
    },
    GatherRows {
        x: Value,
        table: IndexTable,
    },
    Concat {
        inputs: Vec<Value>,
        axis: usize,
    },
    Reshape {
        x: Value,
    },
    KernelWeightedSum {
        gathered: Value,
        /// Correlation weights, `rows x width x kernels`, not differentiated.
        corr: Rc<Array>,
    },
    MaskedRowMax {
        x: Value,
        /// Flat index into x per output element, u32::MAX for empty rows.
        argmax: Vec<u32>,
    },
    RsqrtShift {
        x: Value,
        eps: f64,
    },
    SoftmaxCrossEntropy {
        logits: Value,
        labels: Rc<Vec<usize>>,
        /// Per-point softmax weight w_i / sum(w), zero for ignored points.
        coeff: Vec<f64>,
    },
}

struct Node {
    value: Array,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of recorded operations. One graph instance belongs to one logical
/// thread; create a fresh graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Value(self.nodes.len() - 1)
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Value {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array) -> Value {
        self.push(value, false, Op::Leaf)
    }

    pub fn array(&self, v: Value) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Value) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated during the last backward pass, if any flowed.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- linear algebra ------------------------------------------------

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(vec![m, n], out), rg, Op::MatMul { a, b }))
    }

    /// Slice-wise matrix product `[s,m,k] x [s,k,n] -> [s,m,n]`.
    pub fn batched_matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dim(format!("batched_matmul {:?} x {:?}", sa, sb)));
        }
        let (s, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; s * m * n];
        for i in 0..s {
            matmul_into(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(vec![s, m, n], out), rg, Op::BatchedMatMul { a, b }))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn elementwise(&mut self, kind: EwKind, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = if sa == sb {
            Bcast::None
        } else if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            Bcast::Leading
        } else if sb.len() < sa.len() && sa[..sb.len()] == sb[..] {
            Bcast::Trailing
        } else {
            return Err(Error::Dim(format!("elementwise {:?} vs {:?}", sa, sb)));
        };
        let an = self.array(a).numel();
        let bn = self.array(b).numel();
        // With Leading broadcast the b index is flat % bn; with Trailing it
        // is flat / block where block is the product of the trailing dims.
        let block = if bcast == Bcast::Trailing { an / bn } else { 1 };
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; an];
        for (i, o) in out.iter_mut().enumerate() {
            let bi = match bcast {
                Bcast::None => i,
                Bcast::Leading => i % bn,
                Bcast::Trailing => i / block,
            };
            *o = match kind {
                EwKind::Add => ad[i] + bd[bi],
                EwKind::Sub => ad[i] - bd[bi],
                EwKind::Mul => ad[i] * bd[bi],
            };
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(sa, out), rg, Op::Elementwise { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise(EwKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise(EwKind::Mul, a, b)
    }

    // ---- reductions ------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: Value, axis: usize) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dim(format!("reduce axis {} on shape {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for a in 0..alen {
                        let base = (o * alen + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += xd[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / alen as f64;
                    for v in &mut out {
                        *v *= inv;
                    }
                }
            }
            ReduceKind::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0u32;
                        for a in 0..alen {
                            let flat = (o * alen + a) * inner + i;
                            // Strict comparison keeps the first occurrence on ties.
                            if xd[flat] > best {
                                best = xd[flat];
                                best_at = flat as u32;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_at;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::from_vec(out_shape, out),
            rg,
            Op::Reduce { kind, x, axis, argmax },
        ))
    }

    pub fn sum(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn max(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    pub fn mean(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    /// Sum every element down to a scalar.
    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let mut v = x;
        while !self.shape(v).is_empty() {
            v = self.sum(v, 0)?;
        }
        Ok(v)
    }

    // ---- activations -----------------------------------------------------

    pub fn activation(&mut self, kind: ActKind, x: Value) -> Value {
        let xd = self.data(x);
        let out: Vec<f64> = match kind {
            ActKind::Sigmoid => xd.iter().map(|&t| stable_sigmoid(t)).collect(),
            ActKind::LeakyRelu(alpha) => {
                xd.iter().map(|&t| if t >= 0.0 { t } else { alpha * t }).collect()
            }
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Array::from_vec(shape, out), rg, Op::Activation { kind, x })
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.activation(ActKind::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Value, alpha: f64) -> Value {
        self.activation(ActKind::LeakyRelu(alpha), x)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.activation(ActKind::LeakyRelu(0.0), x)
    }

    // ---- indexing / structure ---------------------------------------------

    /// Copy rows of `x: [N,D]` into `[rows, width, D]`. Entries equal to the
    /// shadow index produce an all-zero row; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Value, table: &IndexTable) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dim(format!("gather_rows input must be rank 2, got {:?}", shape)));
        }
        let (n, d) = (shape[0], shape[1]);
        if table.shadow as usize != n {
            return Err(Error::Index(format!(
                "shadow index {} does not match support rows {}",
                table.shadow, n
            )));
        }
        if let Some(&bad) = table.indices.iter().find(|&&i| i > table.shadow) {
            return Err(Error::Index(format!("gather index {} exceeds shadow {}", bad, table.shadow)));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; table.rows * table.width * d];
        for (slot, &idx) in table.indices.iter().enumerate() {
            if idx != table.shadow {
                let src = idx as usize * d;
                out[slot * d..(slot + 1) * d].copy_from_slice(&xd[src..src + d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::from_vec(vec![table.rows, table.width, d], out),
            rg,
            Op::GatherRows { x, table: table.clone() },
        ))
    }

    pub fn concat(&mut self, inputs: &[Value], axis: usize) -> Result<Value> {
        if inputs.is_empty() {
            return Err(Error::Dim("concat of zero values".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dim(format!("concat axis {} on shape {:?}", axis, first)));
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(Error::Dim(format!("concat rank mismatch {:?} vs {:?}", first, s)));
            }
            for (i, (&x, &y)) in first.iter().zip(s.iter()).enumerate() {
                if i != axis && x != y {
                    return Err(Error::Dim(format!(
                        "concat side shapes differ at axis {}: {:?} vs {:?}",
                        i, first, s
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_stride = axis_total * inner;
        let mut out = vec![0.0; outer * out_stride];
        let mut offset = 0usize;
        for &v in inputs {
            let alen = self.shape(v)[axis];
            let d = self.data(v);
            for o in 0..outer {
                let src = o * alen * inner;
                let dst = o * out_stride + offset * inner;
                out[dst..dst + alen * inner].copy_from_slice(&d[src..src + alen * inner]);
            }
            offset += alen;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Array::from_vec(out_shape, out),
            rg,
            Op::Concat { inputs: inputs.to_vec(), axis },
        ))
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.array(x).numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Array::from_vec(shape, data), rg, Op::Reshape { x }))
    }

    /// Fused correlation-weighted sum over neighborhoods:
    /// `out[k,m,d] = sum_h corr[m,h,k] * gathered[m,h,d]`.
    ///
    /// The correlations are geometry, not parameters; they carry no gradient.
    pub fn kernel_weighted_sum(&mut self, gathered: Value, corr: Rc<Array>) -> Result<Value> {
        let gs = self.shape(gathered).to_vec();
        let cs = corr.shape().to_vec();
        if gs.len() != 3 || cs.len() != 3 || gs[0] != cs[0] || gs[1] != cs[1] {
            return Err(Error::Dim(format!("kernel_weighted_sum {:?} with corr {:?}", gs, cs)));
        }
        let (m, h, d, k) = (gs[0], gs[1], gs[2], cs[2]);
        let gd = self.data(gathered);
        let cd = corr.data();
        let mut out = vec![0.0; k * m * d];
        for mi in 0..m {
            for hi in 0..h {
                let g = &gd[(mi * h + hi) * d..(mi * h + hi + 1) * d];
                let c = &cd[(mi * h + hi) * k..(mi * h + hi + 1) * k];
                for (ki, &w) in c.iter().enumerate() {
                    if w != 0.0 {
                        let o = &mut out[(ki * m + mi) * d..(ki * m + mi + 1) * d];
                        for (ov, &gv) in o.iter_mut().zip(g.iter()) {
                            *ov += w * gv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(gathered);
        Ok(self.push(
            Array::from_vec(vec![k, m, d], out),
            rg,
            Op::KernelWeightedSum { gathered, corr },
        ))
    }

    /// Per-row maximum of `x` over the non-shadow entries of `table`;
    /// rows with no neighbors yield zero. Gradient routes to the first
    /// occurrence of each maximum.
    pub fn masked_row_max(&mut self, x: Value, table: &IndexTable) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dim(format!("masked_row_max input must be rank 2, got {:?}", shape)));
        }
        let (n, d) = (shape[0], shape[1]);
        if table.shadow as usize != n {
            return Err(Error::Index(format!(
                "shadow index {} does not match support rows {}",
                table.shadow, n
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; table.rows * d];
        let mut argmax = vec![u32::MAX; table.rows * d];
        for r in 0..table.rows {
            let row = &table.indices[r * table.width..(r + 1) * table.width];
            for di in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = u32::MAX;
                for &idx in row {
                    if idx == table.shadow {
                        continue;
                    }
                    let flat = idx as usize * d + di;
                    if xd[flat] > best {
                        best = xd[flat];
                        best_at = flat as u32;
                    }
                }
                if best_at != u32::MAX {
                    out[r * d + di] = best;
                    argmax[r * d + di] = best_at;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::from_vec(vec![table.rows, d], out),
            rg,
            Op::MaskedRowMax { x, argmax },
        ))
    }

    /// `1 / sqrt(x + eps)` elementwise; used by batch normalization.
    pub fn rsqrt_shift(&mut self, x: Value, eps: f64) -> Value {
        let out: Vec<f64> = self.data(x).iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Array::from_vec(shape, out), rg, Op::RsqrtShift { x, eps })
    }

    // ---- loss --------------------------------------------------------------

    /// Mean weighted negative log softmax over non-ignored points,
    /// stabilized by max subtraction. Returns a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Value,
        labels: Rc<Vec<usize>>,
        class_weights: Option<Rc<Vec<f64>>>,
        ignore_index: Option<usize>,
    ) -> Result<Value> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dim(format!("cross entropy logits must be rank 2, got {:?}", shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Dim(format!("{} labels for {} logit rows", labels.len(), n)));
        }
        if let Some(w) = &class_weights {
            if w.len() != c {
                return Err(Error::Dim(format!("{} class weights for {} classes", w.len(), c)));
            }
        }
        let ld = self.data(logits);
        let mut weight_sum = 0.0;
        let mut weighted_nll = 0.0;
        let mut point_weight = vec![0.0; n];
        for i in 0..n {
            let y = labels[i];
            if Some(y) == ignore_index {
                continue;
            }
            if y >= c {
                return Err(Error::Label(format!("label {} out of range for {} classes", y, c)));
            }
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            let w = class_weights.as_ref().map_or(1.0, |cw| cw[y]);
            weighted_nll += w * (lse - row[y]);
            weight_sum += w;
            point_weight[i] = w;
        }
        let loss = if weight_sum > 0.0 { weighted_nll / weight_sum } else { 0.0 };
        let coeff: Vec<f64> = if weight_sum > 0.0 {
            point_weight.iter().map(|w| w / weight_sum).collect()
        } else {
            point_weight
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Array::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy { logits, labels, coeff },
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar output. Each node is visited exactly once,
    /// in reverse tape order (creation order is a topological order).
    pub fn backward(&mut self, output: Value) -> Result<()> {
        if self.array(output).numel() != 1 {
            return Err(Error::Dim(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        if !self.rg(output) {
            return Err(Error::Numeric("backward on a value with no differentiable inputs".into()));
        }
        self.nodes[output.0].grad = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id)?;
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Value) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn backward_node(&mut self, id: usize) -> Result<()> {
        // The output gradient is moved out to sidestep aliasing with the
        // input gradient buffers; node grads are never read again after
        // their own backward step, except for leaves.
        let g = match &self.nodes[id].op {
            Op::Leaf => return Ok(()),
            _ => self.nodes[id].grad.clone().expect("grad present"),
        };
        // Temporarily take the op to appease the borrow checker.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dOut @ B^T
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let da = self.grad_buf(*a);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                for t in 0..k {
                                    da[i * k + t] += gv * bd[t * n + j];
                                }
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = A^T @ dOut
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let db = self.grad_buf(*b);
                    for i in 0..m {
                        for t in 0..k {
                            let av = ad[i * k + t];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[t * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchedMatMul { a, b } => {
                let (s, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(*b)[2];
                if self.rg(*a) {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let da = self.grad_buf(*a);
                    for si in 0..s {
                        let (go, bo, ao) = (si * m * n, si * k * n, si * m * k);
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[go + i * n + j];
                                if gv != 0.0 {
                                    for t in 0..k {
                                        da[ao + i * k + t] += gv * bd[bo + t * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let db = self.grad_buf(*b);
                    for si in 0..s {
                        let (go, bo, ao) = (si * m * n, si * k * n, si * m * k);
                        for i in 0..m {
                            for t in 0..k {
                                let av = ad[ao + i * k + t];
                                if av != 0.0 {
                                    for j in 0..n {
                                        db[bo + t * n + j] += av * g[go + i * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Elementwise { kind, a, b, bcast } => {
                let an = self.nodes[a.0].value.numel();
                let bn = self.nodes[b.0].value.numel();
                let block = if *bcast == Bcast::Trailing { an / bn } else { 1 };
                let bindex = |i: usize| match bcast {
                    Bcast::None => i,
                    Bcast::Leading => i % bn,
                    Bcast::Trailing => i / block,
                };
                if self.rg(*a) {
                    match kind {
                        EwKind::Add | EwKind::Sub => {
                            let da = self.grad_buf(*a);
                            for i in 0..an {
                                da[i] += g[i];
                            }
                        }
                        EwKind::Mul => {
                            let bd = self.nodes[b.0].value.data().to_vec();
                            let da = self.grad_buf(*a);
                            for i in 0..an {
                                da[i] += g[i] * bd[bindex(i)];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    match kind {
                        EwKind::Add => {
                            let db = self.grad_buf(*b);
                            for i in 0..an {
                                db[bindex(i)] += g[i];
                            }
                        }
                        EwKind::Sub => {
                            let db = self.grad_buf(*b);
                            for i in 0..an {
                                db[bindex(i)] -= g[i];
                            }
                        }
                        EwKind::Mul => {
                            let ad = self.nodes[a.0].value.data().to_vec();
                            let db = self.grad_buf(*b);
                            for i in 0..an {
                                db[bindex(i)] += g[i] * ad[i];
                            }
                        }
                    }
                }
            }
            Op::Reduce { kind, x, axis, argmax } => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let alen = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let scale = if *kind == ReduceKind::Mean { 1.0 / alen as f64 } else { 1.0 };
                            let dx = self.grad_buf(*x);
                            for o in 0..outer {
                                for a in 0..alen {
                                    let base = (o * alen + a) * inner;
                                    for i in 0..inner {
                                        dx[base + i] += g[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                        ReduceKind::Max => {
                            let dx = self.grad_buf(*x);
                            for (oi, &flat) in argmax.iter().enumerate() {
                                dx[flat as usize] += g[oi];
                            }
                        }
                    }
                }
            }
            Op::Activation { kind, x } => {
                if self.rg(*x) {
                    match kind {
                        ActKind::Sigmoid => {
                            let out = self.nodes[id].value.data().to_vec();
                            let dx = self.grad_buf(*x);
                            for i in 0..out.len() {
                                dx[i] += g[i] * out[i] * (1.0 - out[i]);
                            }
                        }
                        ActKind::LeakyRelu(alpha) => {
                            let alpha = *alpha;
                            let xd = self.nodes[x.0].value.data().to_vec();
                            let dx = self.grad_buf(*x);
                            for i in 0..xd.len() {
                                dx[i] += g[i] * if xd[i] >= 0.0 { 1.0 } else { alpha };
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, table } => {
                if self.rg(*x) {
                    let d = self.shape(*x)[1];
                    let indices = table.indices.clone();
                    let shadow = table.shadow;
                    let dx = self.grad_buf(*x);
                    for (slot, &idx) in indices.iter().enumerate() {
                        if idx != shadow {
                            let dst = idx as usize * d;
                            for t in 0..d {
                                dx[dst + t] += g[slot * d + t];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &v in inputs {
                    let alen = self.shape(v)[*axis];
                    if self.rg(v) {
                        let dv = self.grad_buf(v);
                        for o in 0..outer {
                            let src = o * out_stride + offset * inner;
                            let dst = o * alen * inner;
                            for t in 0..alen * inner {
                                dv[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += alen;
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let dx = self.grad_buf(*x);
                    for i in 0..g.len() {
                        dx[i] += g[i];
                    }
                }
            }
            Op::KernelWeightedSum { gathered, corr } => {
                if self.rg(*gathered) {
                    let gs = self.shape(*gathered).to_vec();
                    let (m, h, d) = (gs[0], gs[1], gs[2]);
                    let k = corr.shape()[2];
                    let cd = corr.data().to_vec();
                    let dg = self.grad_buf(*gathered);
                    for mi in 0..m {
                        for hi in 0..h {
                            let c = &cd[(mi * h + hi) * k..(mi * h + hi + 1) * k];
                            let dst = &mut dg[(mi * h + hi) * d..(mi * h + hi + 1) * d];
                            for (ki, &w) in c.iter().enumerate() {
                                if w != 0.0 {
                                    let src = &g[(ki * m + mi) * d..(ki * m + mi + 1) * d];
                                    for (dv, &gv) in dst.iter_mut().zip(src.iter()) {
                                        *dv += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedRowMax { x, argmax, .. } => {
                if self.rg(*x) {
                    let dx = self.grad_buf(*x);
                    for (oi, &flat) in argmax.iter().enumerate() {
                        if flat != u32::MAX {
                            dx[flat as usize] += g[oi];
                        }
                    }
                }
            }
            Op::RsqrtShift { x, eps } => {
                if self.rg(*x) {
                    let eps = *eps;
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let dx = self.grad_buf(*x);
                    for i in 0..xd.len() {
                        let y = 1.0 / (xd[i] + eps).sqrt();
                        dx[i] += g[i] * (-0.5 * y * y * y);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, coeff, .. } => {
                if self.rg(*logits) {
                    let shape = self.shape(*logits).to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let ld = self.nodes[logits.0].value.data().to_vec();
                    let gs = g[0];
                    let labels = labels.clone();
                    let coeff = coeff.clone();
                    let dl = self.grad_buf(*logits);
                    for i in 0..n {
                        if coeff[i] == 0.0 {
                            continue;
                        }
                        let row = &ld[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for t in 0..c {
                            let p = (row[t] - m).exp() / denom;
                            let delta = if labels[i] == t { 1.0 } else { 0.0 };
                            dl[i * c + t] += gs * coeff[i] * (p - delta);
                        }
                    }
                }
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}

/// Numerically stable sigmoid, clamped into the open interval (0,1) so the
/// bound holds even where exp underflows.
fn stable_sigmoid(t: f64) -> f64 {
    let s = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[t * n..(t + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *ov += av * bv;
                }
            }
        }
    }
}
