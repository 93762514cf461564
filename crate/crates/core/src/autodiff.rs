//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are computed eagerly as nodes are recorded; `backward` replays the
//! tape in reverse and accumulates adjoints with `+=` so fan-out is summed,
//! never overwritten. One tape per training step; tapes are not shared.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Error, Debug)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("{op}: invalid range {lo}..{hi} for size {size}")]
    BadRange { op: &'static str, lo: usize, hi: usize, size: usize },
    #[error("{op}: expected {want} entries, got {got}")]
    BatchLength { op: &'static str, want: usize, got: usize },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("softmax cross entropy: total target weight is zero")]
    ZeroWeight,
}

enum Op<F: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    /// matrix + row vector, broadcast down the rows
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Matmul(NodeId, NodeId),
    /// a * b^T without materializing the transpose
    MatmulTB(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Embed { table: NodeId, ids: Vec<usize> },
    Sum(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Option<Vec<F>>, probs: Tensor<F> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Copies a value off the tape, cutting the gradient path (BPTT boundary).
    pub fn detach(&self, id: NodeId) -> Tensor<F> {
        self.nodes[id.0].value.clone()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    /// Moves a gradient out of the tape (for the optimizer step).
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable input: receives a gradient in backward().
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input (masks, fixed data): no gradient is accumulated.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TapeError::ShapeMismatch { op: "add", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TapeError> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(TapeError::ShapeMismatch { op: "add_row", lhs: va.shape(), rhs: vr.shape() });
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row_slice = out.row_mut(i);
            for (c, d) in row_slice.iter_mut().enumerate() {
                *d = *d + self.nodes[row.0].value.data()[c];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TapeError::ShapeMismatch { op: "mul", lhs: va.shape(), rhs: vb.shape() });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let out = self.nodes[a.0].value.map(|x| one / (one + (-x).exp()));
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(TapeError::ShapeMismatch { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        Tensor::gemm_into(&mut out, F::one(), va, false, vb, false, F::zero());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), needs))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(TapeError::ShapeMismatch { op: "matmul_tb", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        Tensor::gemm_into(&mut out, F::one(), va, false, vb, true, F::zero());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatmulTB(a, b), needs))
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, TapeError> {
        let va = &self.nodes[a.0].value;
        if lo >= hi || hi > va.rows() {
            return Err(TapeError::BadRange { op: "slice_rows", lo, hi, size: va.rows() });
        }
        let cols = va.cols();
        let data = va.data()[lo * cols..hi * cols].to_vec();
        let out = Tensor::from_vec(hi - lo, cols, data);
        let needs = self.needs(a);
        Ok(self.push(out, Op::SliceRows(a, lo, hi), needs))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, TapeError> {
        let va = &self.nodes[a.0].value;
        if lo >= hi || hi > va.cols() {
            return Err(TapeError::BadRange { op: "slice_cols", lo, hi, size: va.cols() });
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(va.rows() * w);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[lo..hi]);
        }
        let out = Tensor::from_vec(va.rows(), w, data);
        let needs = self.needs(a);
        Ok(self.push(out, Op::SliceCols(a, lo, hi), needs))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: [rows, cols],
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::from_vec(rows, cols, data);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: [rows, cols],
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Gathers table rows by id; backward scatter-adds into the table.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TapeError> {
        let vt = &self.nodes[table.0].value;
        let (rows, cols) = (vt.rows(), vt.cols());
        for &id in ids {
            if id >= rows {
                return Err(TapeError::IdOutOfRange { id, rows });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::from_vec(ids.len(), cols, data);
        let needs = self.needs(table);
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }, needs))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].value.data().iter().fold(F::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(Tensor::from_vec(1, 1, vec![total]), Op::Sum(a), needs)
    }

    /// Weighted mean negative log-likelihood over rows; weights default to 1.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: Option<&[F]>,
    ) -> Result<NodeId, TapeError> {
        let vl = &self.nodes[logits.0].value;
        let (rows, classes) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(TapeError::BatchLength {
                op: "softmax_cross_entropy",
                want: rows,
                got: targets.len(),
            });
        }
        if let Some(w) = weights {
            if w.len() != rows {
                return Err(TapeError::BatchLength {
                    op: "softmax_cross_entropy",
                    want: rows,
                    got: w.len(),
                });
            }
        }
        for &t in targets {
            if t >= classes {
                return Err(TapeError::TargetOutOfRange { index: t, classes });
            }
        }
        let total_w = match weights {
            Some(w) => w.iter().fold(F::zero(), |acc, &v| acc + v),
            None => F::from_f64(rows as f64),
        };
        if total_w <= F::zero() {
            return Err(TapeError::ZeroWeight);
        }
        let mut probs = Tensor::zeros(rows, classes);
        let mut loss = F::zero();
        for r in 0..rows {
            let row = vl.row(r);
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut z = F::zero();
            let prow = probs.row_mut(r);
            for (p, &x) in prow.iter_mut().zip(row) {
                let e = (x - m).exp();
                *p = e;
                z = z + e;
            }
            for p in prow.iter_mut() {
                *p = *p / z;
            }
            let nll = z.ln() + m - row[targets[r]];
            let w = weights.map_or(F::one(), |w| w[r]);
            loss = loss + w * nll;
        }
        loss = loss / total_w;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. May be called more than once per
    /// tape; adjoints keep accumulating.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1, 1] {
            return Err(TapeError::NonScalarLoss { shape });
        }
        let Tape { nodes, grads } = self;
        {
            let g = grads[loss.0].get_or_insert_with(|| Tensor::zeros(1, 1));
            let v = g.data_mut();
            v[0] = v[0] + F::one();
        }
        for i in (0..nodes.len()).rev() {
            if !nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("grad present");
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn grad_buf<'a, F: Scalar>(
    grads: &'a mut [Option<Tensor<F>>],
    nodes: &[Node<F>],
    id: NodeId,
) -> &'a mut Tensor<F> {
    let shape = nodes[id.0].value.shape();
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
}

fn propagate<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Tensor<F>>], i: usize, g: &Tensor<F>) {
    let needs = |id: NodeId| nodes[id.0].needs_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if needs(a) {
                grad_buf(grads, nodes, a).add_assign(g);
            }
            if needs(b) {
                grad_buf(grads, nodes, b).add_assign(g);
            }
        }
        &Op::AddRow(a, row) => {
            if needs(a) {
                grad_buf(grads, nodes, a).add_assign(g);
            }
            if needs(row) {
                let cols = g.cols();
                let gr = grad_buf(grads, nodes, row);
                let dst = gr.row_mut(0);
                for r in 0..g.rows() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let vb = &nodes[b.0].value;
                let ga = grad_buf(grads, nodes, a);
                for ((d, s), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *d = *d + *s * v;
                }
            }
            if needs(b) {
                let va = &nodes[a.0].value;
                let gb = grad_buf(grads, nodes, b);
                for ((d, s), &v) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *d = *d + *s * v;
                }
            }
        }
        &Op::Sigmoid(a) => {
            if needs(a) {
                let s = &nodes[i].value;
                let one = F::one();
                let ga = grad_buf(grads, nodes, a);
                for ((d, gu), &sv) in ga.data_mut().iter_mut().zip(g.data()).zip(s.data()) {
                    *d = *d + *gu * sv * (one - sv);
                }
            }
        }
        &Op::Tanh(a) => {
            if needs(a) {
                let t = &nodes[i].value;
                let one = F::one();
                let ga = grad_buf(grads, nodes, a);
                for ((d, gu), &tv) in ga.data_mut().iter_mut().zip(g.data()).zip(t.data()) {
                    *d = *d + *gu * (one - tv * tv);
                }
            }
        }
        &Op::Matmul(a, b) => {
            if needs(a) {
                let vb = &nodes[b.0].value;
                let ga = grad_buf(grads, nodes, a);
                Tensor::gemm_into(ga, F::one(), g, false, vb, true, F::one());
            }
            if needs(b) {
                let va = &nodes[a.0].value;
                let gb = grad_buf(grads, nodes, b);
                Tensor::gemm_into(gb, F::one(), va, true, g, false, F::one());
            }
        }
        &Op::MatmulTB(a, b) => {
            if needs(a) {
                let vb = &nodes[b.0].value;
                let ga = grad_buf(grads, nodes, a);
                Tensor::gemm_into(ga, F::one(), g, false, vb, false, F::one());
            }
            if needs(b) {
                let va = &nodes[a.0].value;
                let gb = grad_buf(grads, nodes, b);
                Tensor::gemm_into(gb, F::one(), g, true, va, false, F::one());
            }
        }
        &Op::SliceRows(a, lo, _hi) => {
            if needs(a) {
                let cols = g.cols();
                let ga = grad_buf(grads, nodes, a);
                let dst = &mut ga.data_mut()[lo * cols..];
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d = *d + *s;
                }
            }
        }
        &Op::SliceCols(a, lo, hi) => {
            if needs(a) {
                let w = hi - lo;
                let ga = grad_buf(grads, nodes, a);
                for r in 0..g.rows() {
                    let dst = &mut ga.row_mut(r)[lo..hi];
                    let src = &g.data()[r * w..(r + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut lo = 0;
            for &p in parts {
                let rows = nodes[p.0].value.rows();
                let cols = g.cols();
                if needs(p) {
                    let src = &g.data()[lo * cols..(lo + rows) * cols];
                    let gp = grad_buf(grads, nodes, p);
                    for (d, s) in gp.data_mut().iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
                lo += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut lo = 0;
            for &p in parts {
                let cols = nodes[p.0].value.cols();
                if needs(p) {
                    let gcols = g.cols();
                    let gp = grad_buf(grads, nodes, p);
                    for r in 0..g.rows() {
                        let src = &g.data()[r * gcols + lo..r * gcols + lo + cols];
                        for (d, s) in gp.row_mut(r).iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                lo += cols;
            }
        }
        Op::Embed { table, ids } => {
            if needs(*table) {
                let cols = g.cols();
                let gt = grad_buf(grads, nodes, *table);
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &g.data()[pos * cols..(pos + 1) * cols];
                    for (d, s) in gt.row_mut(id).iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
        &Op::Sum(a) => {
            if needs(a) {
                let gu = g.scalar();
                let ga = grad_buf(grads, nodes, a);
                for d in ga.data_mut().iter_mut() {
                    *d = *d + gu;
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, targets, weights, probs } => {
            if needs(*logits) {
                let total_w = match weights {
                    Some(w) => w.iter().fold(F::zero(), |acc, &v| acc + v),
                    None => F::from_f64(targets.len() as f64),
                };
                let gu = g.scalar();
                let gl = grad_buf(grads, nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(F::one(), |w| w[r]);
                    let coef = gu * w / total_w;
                    let dst = gl.row_mut(r);
                    for (d, &p) in dst.iter_mut().zip(probs.row(r)) {
                        *d = *d + coef * p;
                    }
                    dst[t] = dst[t] - coef;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tape64 = Tape<f64>;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape64::new();
        let eye = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = tape.leaf(Tensor::from_rows(&[vec![3.0, -1.0], vec![2.0, 5.0]]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_rejected() {
        let mut tape = Tape64::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(TapeError::ShapeMismatch { .. })));
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0]]));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert_eq!(tape.value(s).scalar(), 0.5);
        assert_eq!(tape.value(t).scalar(), 0.0);
    }

    #[test]
    fn sum_gradient_is_ones_and_square_is_2x() {
        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates_never_overwrites() {
        // loss = sum(x*x) + sum(x) has grad 2x + 1
        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.5, -1.5]]));
        let f = tape.mul(x, x).unwrap();
        let f = tape.sum(f);
        let g = tape.sum(x);
        let loss = tape.add(f, g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape64::new();
        let logits = tape.leaf(Tensor::zeros(2, 7));
        let loss = tape.softmax_cross_entropy(logits, &[3, 0], None).unwrap();
        assert!((tape.value(loss).scalar() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_case() {
        let mut tape = Tape64::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![10.0, -10.0]]));
        let loss = tape.softmax_cross_entropy(logits, &[0], None).unwrap();
        assert!(tape.value(loss).scalar() <= 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape64::new();
        let logits = tape.leaf(Tensor::zeros(1, 3));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3], None),
            Err(TapeError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(TapeError::NonScalarLoss { .. })));
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let mut tape = Tape64::new();
        let table = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let e = tape.embed(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(e).row(0), &[3.0, 4.0]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        // row 1 used twice, row 0 once
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![2.0, 2.0]]));
        let mask = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let y = tape.mul(x, mask).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(mask).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn weighted_cross_entropy_ignores_zero_weight_rows() {
        // reference: the surviving row alone
        let mut tape = Tape64::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![0.0, 5.0]]));
        let alone = tape.softmax_cross_entropy(logits, &[1], None).unwrap();
        let l_alone = tape.value(alone).scalar();

        let mut tape2 = Tape64::new();
        let logits2 = tape2.leaf(Tensor::from_rows(&[vec![0.0, 5.0], vec![123.0, -4.0]]));
        let half = tape2.softmax_cross_entropy(logits2, &[1, 0], Some(&[1.0, 0.0])).unwrap();
        let l_half = tape2.value(half).scalar();
        assert!((l_half - l_alone).abs() < 1e-12);
        tape2.backward(half).unwrap();
        let gl = tape2.grad(logits2).unwrap();
        assert_eq!(gl.row(1), &[0.0, 0.0]);
        assert!(gl.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let mut tape = Tape64::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let left = tape.slice_cols(x, 0, 1).unwrap();
        let right = tape.slice_cols(x, 1, 3).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let top = tape.slice_rows(back, 0, 1).unwrap();
        let loss = tape.sum(top);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
