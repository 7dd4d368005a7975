use crate::error::{Error, Result};
use crate::numkernel::{KernelRegistry, Mat};

pub type ValueId = usize;

/// One node on the tape: forward value, gradient accumulator, and the op that
/// produced the value (with whatever context its backward rule needs).
struct Node {
    data: Mat,
    grad: Mat,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    /// (n×d) + (1×d), bias broadcast over rows.
    AddBias(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// (n×d) ⊙ (n×1), column broadcast over columns.
    MulCol(ValueId, ValueId),
    Scale(ValueId, f64),
    AddConst(ValueId),
    PowConst(ValueId, f64),
    Ln(ValueId),
    Recip(ValueId),
    ClampMin(ValueId, f64),
    Relu(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    /// Row-wise softmax.
    Softmax(ValueId),
    Transpose(ValueId),
    /// n×d -> n×1.
    RowSum(ValueId),
    /// n×d -> 1×d.
    MeanRows(ValueId),
    /// n×d -> 1×(n·d), row-major.
    Flatten(ValueId),
    GatherRows(ValueId, Vec<usize>),
    /// Rows of the source placed (accumulating) at the given indices of an
    /// otherwise-zero target with `usize` rows.
    ScatterRows(ValueId, Vec<usize>),
    /// One column per row -> n×1.
    PickPerRow(ValueId, Vec<usize>),
    /// (start, len) column window.
    ColsSlice(ValueId, usize),
    HConcat(ValueId, ValueId),
    VStack(Vec<ValueId>),
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        xhat: Mat,
        inv_std: Vec<f64>,
        /// True when normalized with batch statistics (train path); false when
        /// running statistics were used and backward treats them as constants.
        batch_stats: bool,
    },
    /// Saved mask already carries the 1/(1-rate) inverted scaling.
    Dropout(ValueId, Mat),
    /// Forward identity, backward barrier.
    StopGrad,
}

/// Append-only computation tape. Node indices are topologically ordered by
/// construction (an op's inputs always precede it), so backward is a single
/// reverse sweep that visits each node exactly once. Gradients accumulate and
/// are never overwritten; `zero_grads` resets them between uses.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Mat, op: Op) -> ValueId {
        let grad = Mat::zeros(data.rows(), data.cols());
        self.nodes.push(Node { data, grad, op });
        self.nodes.len() - 1
    }

    /// Leaf node: constants and parameters. Differentiable — its gradient is
    /// readable after backward.
    pub fn leaf(&mut self, data: Mat) -> ValueId {
        self.push(data, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Mat {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: ValueId) -> &Mat {
        &self.nodes[id].grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn shape(&self, id: ValueId) -> (usize, usize) {
        self.nodes[id].data.shape()
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ---- binary ops ----

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.nodes[a].data.matmul(&self.nodes[b].data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.nodes[a].data.clone();
        out.add_assign(&self.nodes[b].data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if self.shape(bias) != (1, d) {
            return Err(Self::shape_err(
                "add_bias",
                format!("input {}x{} with bias {:?}", n, d, self.shape(bias)),
            ));
        }
        let mut out = self.nodes[a].data.clone();
        let b = &self.nodes[bias].data;
        for r in 0..n {
            for (o, bv) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.nodes[a].data.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b].data.data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn mul_col(&mut self, a: ValueId, col: ValueId) -> Result<ValueId> {
        let (n, _d) = self.shape(a);
        if self.shape(col) != (n, 1) {
            return Err(Self::shape_err(
                "mul_col",
                format!("input {:?} with column {:?}", self.shape(a), self.shape(col)),
            ));
        }
        let mut out = self.nodes[a].data.clone();
        for r in 0..n {
            let c = self.nodes[col].data.get(r, 0);
            for o in out.row_slice_mut(r) {
                *o *= c;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn hconcat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Self::shape_err("hconcat", format!("{ra}x{ca} vs {rb}x{cb}")));
        }
        let mut out = Mat::zeros(ra, ca + cb);
        for r in 0..ra {
            out.row_slice_mut(r)[..ca].copy_from_slice(self.nodes[a].data.row_slice(r));
            out.row_slice_mut(r)[ca..].copy_from_slice(self.nodes[b].data.row_slice(r));
        }
        Ok(self.push(out, Op::HConcat(a, b)))
    }

    pub fn vstack(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Domain("vstack of zero matrices".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Self::shape_err("vstack", format!("column mismatch: {cols} vs {c}")));
            }
            rows += r;
        }
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let m = &self.nodes[p].data;
            for r in 0..m.rows() {
                out.row_slice_mut(at + r).copy_from_slice(m.row_slice(r));
            }
            at += m.rows();
        }
        Ok(self.push(out, Op::VStack(parts.to_vec())))
    }

    // ---- unary elementwise ----

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v += c;
        }
        self.push(out, Op::AddConst(a))
    }

    pub fn pow_const(&mut self, a: ValueId, exp: f64) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = v.powf(exp);
        }
        self.push(out, Op::PowConst(a, exp))
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = v.ln();
        }
        self.push(out, Op::Ln(a))
    }

    pub fn recip(&mut self, a: ValueId) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = 1.0 / *v;
        }
        self.push(out, Op::Recip(a))
    }

    pub fn clamp_min(&mut self, a: ValueId, min: f64) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = v.max(min);
        }
        self.push(out, Op::ClampMin(a, min))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let mut out = self.nodes[a].data.clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax with max subtraction, so constant shifts of a row are
    /// bitwise no-ops. Rows must be non-empty.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if d == 0 || n == 0 {
            return Err(Error::Domain("softmax of an empty matrix".into()));
        }
        let mut out = self.nodes[a].data.clone();
        for r in 0..n {
            let row = out.row_slice_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    // ---- structural ----

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let out = self.nodes[a].data.transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn row_sum(&mut self, a: ValueId) -> ValueId {
        let (n, _) = self.shape(a);
        let mut out = Mat::zeros(n, 1);
        for r in 0..n {
            out.set(r, 0, self.nodes[a].data.row_slice(r).iter().sum());
        }
        self.push(out, Op::RowSum(a))
    }

    pub fn mean_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if n == 0 {
            return Err(Error::Domain("mean over zero rows".into()));
        }
        let mut out = Mat::zeros(1, d);
        for r in 0..n {
            for (o, v) in out.row_slice_mut(0).iter_mut().zip(self.nodes[a].data.row_slice(r)) {
                *o += v;
            }
        }
        for v in out.data_mut() {
            *v /= n as f64;
        }
        Ok(self.push(out, Op::MeanRows(a)))
    }

    pub fn flatten(&mut self, a: ValueId) -> ValueId {
        let m = &self.nodes[a].data;
        let out = Mat::from_vec(1, m.len(), m.data().to_vec()).expect("row-major reshape");
        self.push(out, Op::Flatten(a))
    }

    pub fn gather_rows(&mut self, a: ValueId, indices: &[usize]) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Domain(format!("gather_rows index {bad} out of range for {n} rows")));
        }
        let mut out = Mat::zeros(indices.len(), d);
        for (r, &i) in indices.iter().enumerate() {
            out.row_slice_mut(r).copy_from_slice(self.nodes[a].data.row_slice(i));
        }
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    /// Place row r of the source at row `indices[r]` of an n_rows-tall zero
    /// matrix; duplicate targets accumulate.
    pub fn scatter_rows(&mut self, a: ValueId, indices: &[usize], n_rows: usize) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if indices.len() != n {
            return Err(Self::shape_err(
                "scatter_rows",
                format!("{} indices for {} rows", indices.len(), n),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Domain(format!("scatter_rows index {bad} out of range for {n_rows} rows")));
        }
        let mut out = Mat::zeros(n_rows, d);
        for (r, &i) in indices.iter().enumerate() {
            for (o, v) in out.row_slice_mut(i).iter_mut().zip(self.nodes[a].data.row_slice(r)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterRows(a, indices.to_vec())))
    }

    /// out[r, 0] = a[r, cols[r]].
    pub fn pick_per_row(&mut self, a: ValueId, cols: &[usize]) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if cols.len() != n {
            return Err(Self::shape_err(
                "pick_per_row",
                format!("{} picks for {} rows", cols.len(), n),
            ));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::Domain(format!("pick_per_row column {bad} out of range for {d} columns")));
        }
        let mut out = Mat::zeros(n, 1);
        for (r, &c) in cols.iter().enumerate() {
            out.set(r, 0, self.nodes[a].data.get(r, c));
        }
        Ok(self.push(out, Op::PickPerRow(a, cols.to_vec())))
    }

    pub fn cols_slice(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (n, d) = self.shape(a);
        if start + len > d {
            return Err(Self::shape_err(
                "cols_slice",
                format!("window {start}..{} of {d} columns", start + len),
            ));
        }
        let mut out = Mat::zeros(n, len);
        for r in 0..n {
            out.row_slice_mut(r).copy_from_slice(&self.nodes[a].data.row_slice(r)[start..start + len]);
        }
        Ok(self.push(out, Op::ColsSlice(a, start)))
    }

    pub fn stop_grad(&mut self, a: ValueId) -> ValueId {
        let out = self.nodes[a].data.clone();
        self.push(out, Op::StopGrad)
    }

    // ---- normalization ----

    /// Row-wise layer norm: each row is standardized with its own mean and
    /// population variance (eps inside the square root), then scaled by `gain`
    /// and shifted by `bias` (both 1×d).
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Self::shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for input {}x{}", self.shape(gain), self.shape(bias), n, d),
            ));
        }
        if d == 0 {
            return Err(Error::Domain("layer_norm over zero columns".into()));
        }
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        let mut out = Mat::zeros(n, d);
        for r in 0..n {
            let row = self.nodes[x].data.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat.set(r, c, xh);
                out.set(r, c, self.nodes[gain].data.get(0, c) * xh + self.nodes[bias].data.get(0, c));
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Column-wise batch norm over the rows of `x`. In training mode each
    /// column is standardized with batch mean and population variance and the
    /// running statistics (rows 0 and 1 of `running`) are updated in place
    /// with the given momentum; a single-row training batch falls back to the
    /// running statistics, as does inference mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        running: &mut Mat,
        momentum: f64,
        eps: f64,
        registry: &KernelRegistry,
    ) -> Result<ValueId> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Self::shape_err(
                "batch_norm",
                format!("gain {:?} / bias {:?} for input {}x{}", self.shape(gain), self.shape(bias), n, d),
            ));
        }
        if running.shape() != (2, d) {
            return Err(Self::shape_err(
                "batch_norm",
                format!("running stats {:?}, expected 2x{d}", running.shape()),
            ));
        }
        if n == 0 {
            return Err(Error::Domain("batch_norm over zero rows".into()));
        }
        let batch_stats = registry.is_training() && n > 1;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(self.nodes[x].data.row_slice(r)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            for r in 0..n {
                for c in 0..d {
                    let dv = self.nodes[x].data.get(r, c) - mean[c];
                    var[c] += dv * dv;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            for c in 0..d {
                let rm = running.get(0, c);
                let rv = running.get(1, c);
                running.set(0, c, (1.0 - momentum) * rm + momentum * mean[c]);
                running.set(1, c, (1.0 - momentum) * rv + momentum * var[c]);
            }
            (mean, var)
        } else {
            (running.row_slice(0).to_vec(), running.row_slice(1).to_vec())
        };

        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        for r in 0..n {
            for c in 0..d {
                let xh = (self.nodes[x].data.get(r, c) - mean[c]) * inv_std[c];
                xhat.set(r, c, xh);
                out.set(r, c, self.nodes[gain].data.get(0, c) * xh + self.nodes[bias].data.get(0, c));
            }
        }
        Ok(self.push(out, Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats }))
    }

    /// Inverted-scaling dropout. Identity (returns the input id, adds no node)
    /// in inference mode or at rate 0; in training the mask is drawn from the
    /// registry stream.
    pub fn dropout(&mut self, a: ValueId, rate: f64, registry: &mut KernelRegistry) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !registry.is_training() || rate == 0.0 {
            return Ok(a);
        }
        let (n, d) = self.shape(a);
        let mask = registry.dropout_mask(n, d, rate)?;
        let mut out = self.nodes[a].data.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Each call propagates a fresh
    /// unit adjoint from `loss` through scratch buffers, then adds the result
    /// into the persistent per-node gradients — so repeated calls accumulate
    /// and never overwrite.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Self::shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Mat> = (0..=loss)
            .map(|i| Mat::zeros(self.nodes[i].data.rows(), self.nodes[i].data.cols()))
            .collect();
        adj[loss].add_at(0, 0, 1.0);
        for i in (0..=loss).rev() {
            // Nodes after `loss` cannot be its ancestors; nodes before it are
            // visited once each, in reverse topological (= creation) order.
            // An op's inputs always precede it, so they live in `head`.
            let (head, tail) = adj.split_at_mut(i);
            self.step_backward(i, &tail[0], head);
        }
        for (i, a) in adj.iter().enumerate() {
            self.nodes[i].grad.add_assign(a);
        }
        Ok(())
    }

    fn step_backward(&self, id: ValueId, g: &Mat, adj: &mut [Mat]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.matmul(&self.nodes[b].data.transpose()).expect("matmul backward");
                let db = self.nodes[a].data.transpose().matmul(g).expect("matmul backward");
                adj[a].add_assign(&da);
                adj[b].add_assign(&db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                adj[a].add_assign(g);
                adj[b].add_assign(g);
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                adj[a].add_assign(g);
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        adj[bias].add_at(0, c, g.get(r, c));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let gv = g.get(r, c);
                        let av = self.nodes[a].data.get(r, c);
                        let bv = self.nodes[b].data.get(r, c);
                        adj[a].add_at(r, c, gv * bv);
                        adj[b].add_at(r, c, gv * av);
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (a, col) = (*a, *col);
                let (n, d) = g.shape();
                for r in 0..n {
                    let cv = self.nodes[col].data.get(r, 0);
                    let mut acc = 0.0;
                    for c in 0..d {
                        let gv = g.get(r, c);
                        adj[a].add_at(r, c, gv * cv);
                        acc += gv * self.nodes[a].data.get(r, c);
                    }
                    adj[col].add_at(r, 0, acc);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let (n, d) = g.shape();
                for r in 0..n {
                    for cc in 0..d {
                        adj[a].add_at(r, cc, g.get(r, cc) * c);
                    }
                }
            }
            Op::AddConst(a) => {
                let a = *a;
                adj[a].add_assign(g);
            }
            Op::PowConst(a, exp) => {
                let (a, exp) = (*a, *exp);
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let x = self.nodes[a].data.get(r, c);
                        adj[a].add_at(r, c, g.get(r, c) * exp * x.powf(exp - 1.0));
                    }
                }
            }
            Op::Ln(a) => {
                let a = *a;
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let x = self.nodes[a].data.get(r, c);
                        adj[a].add_at(r, c, g.get(r, c) / x);
                    }
                }
            }
            Op::Recip(a) => {
                let a = *a;
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let y = self.nodes[id].data.get(r, c);
                        adj[a].add_at(r, c, -g.get(r, c) * y * y);
                    }
                }
            }
            Op::ClampMin(a, min) => {
                let (a, min) = (*a, *min);
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        if self.nodes[a].data.get(r, c) > min {
                            adj[a].add_at(r, c, g.get(r, c));
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        if self.nodes[a].data.get(r, c) > 0.0 {
                            adj[a].add_at(r, c, g.get(r, c));
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let y = self.nodes[id].data.get(r, c);
                        adj[a].add_at(r, c, g.get(r, c) * (1.0 - y * y));
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let y = self.nodes[id].data.get(r, c);
                        adj[a].add_at(r, c, g.get(r, c) * y * (1.0 - y));
                    }
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                let (n, d) = g.shape();
                for r in 0..n {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += g.get(r, c) * self.nodes[id].data.get(r, c);
                    }
                    for c in 0..d {
                        let y = self.nodes[id].data.get(r, c);
                        adj[a].add_at(r, c, (g.get(r, c) - dot) * y);
                    }
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let gt = g.transpose();
                adj[a].add_assign(&gt);
            }
            Op::RowSum(a) => {
                let a = *a;
                let (n, d) = self.nodes[a].data.shape();
                for r in 0..n {
                    let gv = g.get(r, 0);
                    for c in 0..d {
                        adj[a].add_at(r, c, gv);
                    }
                }
            }
            Op::MeanRows(a) => {
                let a = *a;
                let (n, d) = self.nodes[a].data.shape();
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for c in 0..d {
                        adj[a].add_at(r, c, g.get(0, c) * inv);
                    }
                }
            }
            Op::Flatten(a) => {
                let a = *a;
                for (i, gv) in g.data().iter().enumerate() {
                    let d = self.nodes[a].data.cols();
                    adj[a].add_at(i / d, i % d, *gv);
                }
            }
            Op::GatherRows(a, indices) => {
                let a = *a;
                let indices = indices.clone();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..g.cols() {
                        adj[a].add_at(i, c, g.get(r, c));
                    }
                }
            }
            Op::ScatterRows(a, indices) => {
                let a = *a;
                let indices = indices.clone();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..g.cols() {
                        adj[a].add_at(r, c, g.get(i, c));
                    }
                }
            }
            Op::PickPerRow(a, cols) => {
                let a = *a;
                let cols = cols.clone();
                for (r, &c) in cols.iter().enumerate() {
                    adj[a].add_at(r, c, g.get(r, 0));
                }
            }
            Op::ColsSlice(a, start) => {
                let (a, start) = (*a, *start);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        adj[a].add_at(r, start + c, g.get(r, c));
                    }
                }
            }
            Op::HConcat(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a].data.cols();
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        if c < ca {
                            adj[a].add_at(r, c, g.get(r, c));
                        } else {
                            adj[b].add_at(r, c - ca, g.get(r, c));
                        }
                    }
                }
            }
            Op::VStack(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let rows = self.nodes[p].data.rows();
                    for r in 0..rows {
                        for c in 0..g.cols() {
                            adj[p].add_at(r, c, g.get(at + r, c));
                        }
                    }
                    at += rows;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let (n, d) = g.shape();
                for r in 0..n {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..d {
                        let dxh = g.get(r, c) * self.nodes[gain].data.get(0, c);
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat.get(r, c);
                        adj[gain].add_at(0, c, g.get(r, c) * xhat.get(r, c));
                        adj[bias].add_at(0, c, g.get(r, c));
                    }
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        let dxh = g.get(r, c) * self.nodes[gain].data.get(0, c);
                        let dx = inv_std[r] * (dxh - inv_d * sum_dxh - xhat.get(r, c) * inv_d * sum_dxh_xh);
                        adj[x].add_at(r, c, dx);
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats } => {
                let (x, gain, bias, batch_stats) = (*x, *gain, *bias, *batch_stats);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let (n, d) = g.shape();
                for c in 0..d {
                    let gn = self.nodes[gain].data.get(0, c);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for r in 0..n {
                        let dxh = g.get(r, c) * gn;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat.get(r, c);
                        adj[gain].add_at(0, c, g.get(r, c) * xhat.get(r, c));
                        adj[bias].add_at(0, c, g.get(r, c));
                    }
                    let inv_n = 1.0 / n as f64;
                    for r in 0..n {
                        let dxh = g.get(r, c) * gn;
                        let dx = if batch_stats {
                            inv_std[c] * (dxh - inv_n * sum_dxh - xhat.get(r, c) * inv_n * sum_dxh_xh)
                        } else {
                            // Running statistics are constants w.r.t. x.
                            inv_std[c] * dxh
                        };
                        adj[x].add_at(r, c, dx);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let mask = mask.clone();
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        adj[a].add_at(r, c, g.get(r, c) * mask.get(r, c));
                    }
                }
            }
        }
    }
}
