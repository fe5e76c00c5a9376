use std::collections::HashMap;
use std::sync::Arc;

use crate::store::{ParamId, ParamStore};
use crate::tensor::{softmax_rows, Tensor};

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // constants kept on variants for Debug output
enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    MeanRows(NodeId),
    RowSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, end: usize },
    SliceRows { x: NodeId, start: usize, end: usize },
    GateGt(NodeId, f64),
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    LayerNorm { xhat: Tensor, inv: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    aux: Aux,
}

/// Define-by-run reverse-mode graph over [`Tensor`] values. Each op computes
/// its value eagerly at insertion; `backward` walks nodes in reverse
/// insertion order, which is a valid topological order by construction, so a
/// backward pass is only possible after the forward pass that recorded it.
/// Parameter values are shared with the [`ParamStore`] the graph borrows.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Result of a backward pass: gradients per graph node (for input
/// sensitivities) and per parameter, both owned so they outlive the graph.
pub struct Backprop {
    node_grads: Vec<Option<Tensor>>,
    param_grads: Vec<(ParamId, Tensor)>,
}

impl Backprop {
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.node_grads[id.0].as_ref()
    }

    pub fn param_grads(&self) -> &[(ParamId, Tensor)] {
        &self.param_grads
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t)
    }

    pub fn param_grad_map(&self) -> HashMap<ParamId, Tensor> {
        self.param_grads
            .iter()
            .map(|(p, t)| (*p, t.clone()))
            .collect()
    }
}

impl ParamStore {
    /// Accumulate a backward pass into the store's gradient buffers.
    /// Repeated calls add up until `zero_grads` or an Adam step.
    pub fn accumulate(&mut self, bp: &Backprop) {
        for (id, g) in bp.param_grads() {
            self.accumulate_grad(*id, g);
        }
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.shape(), (1, 1), "scalar_value on non-scalar node");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Aux) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const, false, Aux::None)
    }

    /// Input leaf; gradients w.r.t. it are exposed by `Backprop::node_grad`.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const, true, Aux::None)
    }

    /// Parameter leaf. Multiple calls with the same id share one node, so the
    /// backward pass naturally sums all uses.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let value = self.store.value_arc(id);
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
            aux: Aux::None,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("matmul: {e}"));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng, Aux::None)
    }

    /// a @ b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .matmul_nt(self.value(b))
            .unwrap_or_else(|e| panic!("matmul_nt: {e}"));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulNT(a, b), ng, Aux::None)
    }

    /// x + b with b a 1 x m row broadcast over the rows of x.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "add_bias: bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "add_bias: width mismatch");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let nv = v.get(r, c) + bv.get(0, c);
                v.set(r, c, nv);
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(v, Op::AddBias(x, b), ng, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .unwrap_or_else(|e| panic!("add: {e}"));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng, Aux::None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .unwrap_or_else(|e| panic!("sub: {e}"));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng, Aux::None)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .unwrap_or_else(|e| panic!("mul_elem: {e}"));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulElem(a, b), ng, Aux::None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, c), ng, Aux::None)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(v, Op::AddScalar(x, c), ng, Aux::None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng, Aux::None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng, Aux::None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        let ng = self.needs(x);
        self.push(v, Op::Exp(x), ng, Aux::None)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(stable_softplus);
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng, Aux::None)
    }

    /// Hard clip; gradient passes only strictly inside (lo, hi).
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(v, Op::Clamp(x, lo, hi), ng, Aux::None)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::SoftmaxRows(x), ng, Aux::None)
    }

    /// Per-row normalization to zero mean / unit variance (1/cols variance,
    /// epsilon 1e-5) followed by the per-feature affine gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let xv = self.value(x).clone();
        let g = self.value(gain);
        let b = self.value(bias);
        let (n, m) = xv.shape();
        assert!(m >= 2, "layer_norm: need at least 2 features");
        assert_eq!(g.shape(), (1, m), "layer_norm: gain shape");
        assert_eq!(b.shape(), (1, m), "layer_norm: bias shape");
        let mut xhat = Tensor::zeros(n, m);
        let mut inv = vec![0.0; n];
        let mut out = Tensor::zeros(n, m);
        for r in 0..n {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let i = 1.0 / (var + EPS).sqrt();
            inv[r] = i;
            for c in 0..m {
                let xh = (row[c] - mean) * i;
                xhat.set(r, c, xh);
                out.set(r, c, g.get(0, c) * xh + b.get(0, c));
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm { x, gain, bias },
            ng,
            Aux::LayerNorm { xhat, inv },
        )
    }

    /// Column means over rows: n x m -> 1 x m.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut out = Tensor::zeros(1, m);
        for c in 0..m {
            let mut s = 0.0;
            for r in 0..n {
                s += xv.get(r, c);
            }
            out.set(0, c, s / n as f64);
        }
        let ng = self.needs(x);
        self.push(out, Op::MeanRows(x), ng, Aux::None)
    }

    /// Row sums: n x m -> n x 1.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut out = Tensor::zeros(n, 1);
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..m {
                s += xv.get(r, c);
            }
            out.set(r, 0, s);
        }
        let ng = self.needs(x);
        self.push(out, Op::RowSum(x), ng, Aux::None)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, Aux::None)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng, Aux::None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols: row mismatch");
            for r in 0..n {
                for c in 0..pv.cols() {
                    out.set(r, off + c, pv.get(r, c));
                }
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, Aux::None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, m);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), m, "concat_rows: col mismatch");
            for r in 0..pv.rows() {
                for c in 0..m {
                    out.set(off + r, c, pv.get(r, c));
                }
            }
            off += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng, Aux::None)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols(), "slice_cols out of range");
        let (n, w) = (xv.rows(), end - start);
        let mut out = Tensor::zeros(n, w);
        for r in 0..n {
            for c in 0..w {
                out.set(r, c, xv.get(r, start + c));
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start, end }, ng, Aux::None)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start < end && end <= xv.rows(), "slice_rows out of range");
        let (h, m) = (end - start, xv.cols());
        let mut out = Tensor::zeros(h, m);
        for r in 0..h {
            for c in 0..m {
                out.set(r, c, xv.get(start + r, c));
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SliceRows { x, start, end }, ng, Aux::None)
    }

    /// y = x * [x > threshold]; the indicator is treated as locally constant
    /// in the backward pass.
    pub fn gate_gt(&mut self, x: NodeId, threshold: f64) -> NodeId {
        let v = self
            .value(x)
            .map(|v| if v > threshold { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(v, Op::GateGt(x, threshold), ng, Aux::None)
    }

    /// Checked affine layer y = x W (+ b); shape errors surface as `Err`
    /// rather than panics since callers may assemble dims from config.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> crate::error::Result<NodeId> {
        let (xr, xc) = self.value(x).shape();
        let (wr, wc) = self.value(w).shape();
        if xc != wr {
            return Err(crate::error::Error::shape(format!(
                "linear: {xr}x{xc} by {wr}x{wc}"
            )));
        }
        if let Some(bias) = b {
            let (br, bc) = self.value(bias).shape();
            if br != 1 || bc != wc {
                return Err(crate::error::Error::shape(format!(
                    "linear bias: expected 1x{wc}, got {br}x{bc}"
                )));
            }
        }
        let y = self.matmul(x, w);
        Ok(match b {
            Some(bias) => self.add_bias(y, bias),
            None => y,
        })
    }

    /// Reverse-mode pass from a scalar root. Gradients of every node that
    /// (transitively) requires them are produced; parameter gradients are
    /// copied out so they survive the graph.
    pub fn backward(&self, root: NodeId) -> Backprop {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        let mut param_grads = Vec::new();
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = &grads[node.0] {
                param_grads.push((pid, g.clone()));
            }
        }
        // Deterministic order for downstream accumulation.
        param_grads.sort_by_key(|(p, _)| p.0);

        Backprop {
            node_grads: grads,
            param_grads,
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign_scaled(delta, 1.0),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = gy.matmul_nt(self.value(*b)).unwrap();
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = self.value(*a).matmul_tn(gy).unwrap();
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    let da = gy.matmul(self.value(*b)).unwrap();
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = gy.matmul_tn(self.value(*a)).unwrap();
                    self.accum(grads, *b, &db);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    self.accum(grads, *x, gy);
                }
                if self.needs(*b) {
                    let (n, m) = gy.shape();
                    let mut db = Tensor::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            let v = db.get(0, c) + gy.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gy);
                self.accum(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy);
                if self.needs(*b) {
                    let neg = gy.map(|v| -v);
                    self.accum(grads, *b, &neg);
                }
            }
            Op::MulElem(a, b) => {
                if self.needs(*a) {
                    let da = gy.zip_map(self.value(*b), |g, v| g * v).unwrap();
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = gy.zip_map(self.value(*a), |g, v| g * v).unwrap();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx = gy.map(|v| v * c);
                self.accum(grads, *x, &dx);
            }
            Op::AddScalar(x, _) => self.accum(grads, *x, gy),
            Op::Relu(x) => {
                let dx = gy
                    .zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })
                    .unwrap();
                self.accum(grads, *x, &dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let dx = gy.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap();
                self.accum(grads, *x, &dx);
            }
            Op::Exp(x) => {
                let y = &self.nodes[idx].value;
                let dx = gy.zip_map(y, |g, e| g * e).unwrap();
                self.accum(grads, *x, &dx);
            }
            Op::Softplus(x) => {
                let dx = gy
                    .zip_map(self.value(*x), |g, v| g * sigmoid(v))
                    .unwrap();
                self.accum(grads, *x, &dx);
            }
            Op::Clamp(x, lo, hi) => {
                let dx = gy
                    .zip_map(self.value(*x), |g, v| if v > *lo && v < *hi { g } else { 0.0 })
                    .unwrap();
                self.accum(grads, *x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (n, m) = y.shape();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    let mut dot = 0.0;
                    for c in 0..m {
                        dot += gy.get(r, c) * y.get(r, c);
                    }
                    for c in 0..m {
                        dx.set(r, c, y.get(r, c) * (gy.get(r, c) - dot));
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let Aux::LayerNorm { xhat, inv } = &node.aux else {
                    unreachable!("layer_norm node without aux")
                };
                let (n, m) = xhat.shape();
                let g = self.value(*gain);
                if self.needs(*gain) {
                    let mut dg = Tensor::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            let v = dg.get(0, c) + gy.get(r, c) * xhat.get(r, c);
                            dg.set(0, c, v);
                        }
                    }
                    self.accum(grads, *gain, &dg);
                }
                if self.needs(*bias) {
                    let mut db = Tensor::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            let v = db.get(0, c) + gy.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    self.accum(grads, *bias, &db);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(n, m);
                    for r in 0..n {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..m {
                            let dxh = gy.get(r, c) * g.get(0, c);
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat.get(r, c);
                        }
                        mean_dxhat /= m as f64;
                        mean_dxhat_xhat /= m as f64;
                        for c in 0..m {
                            let dxh = gy.get(r, c) * g.get(0, c);
                            dx.set(
                                r,
                                c,
                                inv[r] * (dxh - mean_dxhat - xhat.get(r, c) * mean_dxhat_xhat),
                            );
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let m = gy.cols();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    for c in 0..m {
                        dx.set(r, c, gy.get(0, c) / n as f64);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::RowSum(x) => {
                let (n, m) = self.value(*x).shape();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    for c in 0..m {
                        dx.set(r, c, gy.get(r, 0));
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                let dx = Tensor::filled(xv.rows(), xv.cols(), gy.data()[0]);
                self.accum(grads, *x, &dx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let dx = Tensor::filled(xv.rows(), xv.cols(), gy.data()[0] / xv.len() as f64);
                self.accum(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (n, w) = pv.shape();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(n, w);
                        for r in 0..n {
                            for c in 0..w {
                                dp.set(r, c, gy.get(r, off + c));
                            }
                        }
                        self.accum(grads, p, &dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (h, m) = pv.shape();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(h, m);
                        for r in 0..h {
                            for c in 0..m {
                                dp.set(r, c, gy.get(off + r, c));
                            }
                        }
                        self.accum(grads, p, &dp);
                    }
                    off += h;
                }
            }
            Op::SliceCols { x, start, end } => {
                let (n, m) = self.value(*x).shape();
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    for c in *start..*end {
                        dx.set(r, c, gy.get(r, c - start));
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::SliceRows { x, start, end } => {
                let (n, m) = self.value(*x).shape();
                let mut dx = Tensor::zeros(n, m);
                for r in *start..*end {
                    for c in 0..m {
                        dx.set(r, c, gy.get(r - start, c));
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::GateGt(x, threshold) => {
                let dx = gy
                    .zip_map(self.value(*x), |g, v| if v > *threshold { g } else { 0.0 })
                    .unwrap();
                self.accum(grads, *x, &dx);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
