//! Minimal reverse-mode automatic differentiation on a tensor tape.
//!
//! Nodes hold row-major f64 matrices; operations record enough to replay
//! gradients in reverse insertion order (the tape is already topologically
//! sorted). Parameters are views into one flat buffer, so a backward pass
//! produces a flat gradient aligned with it.

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(1, 1, vec![x])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() needs a 1x1 tensor");
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Const,
    /// View into the flat parameter buffer at `offset`.
    Param { offset: usize },
    Add(NodeId, NodeId),
    /// m x n plus a broadcast 1 x n bias.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a: m x k, b: k x n.
    MatMul(NodeId, NodeId),
    /// a: m x k, b: n x k; result m x n of row-dot-products.
    MatMulTransB(NodeId, NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    /// Row softmax over positions where `mask` is true; masked entries are
    /// exactly zero and excluded from max/sum.
    SoftmaxRows { x: NodeId, mask: Vec<bool> },
    /// Fused log-softmax + gather: value[i] = logit[i][target_i] - lse(row i).
    PickLogProbs { logits: NodeId, targets: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Mean over rows where `valid` is true -> 1 x n.
    MeanPoolRows { x: NodeId, valid: Vec<bool> },
    Sum(NodeId),
    /// Elementwise min; gradient follows the smaller branch (ties -> first).
    Min2(NodeId, NodeId),
    /// Clamp to [lo, hi]; zero gradient outside the open interval.
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Embedding rows for `ids`, with optional constant row overrides
    /// (summary pseudo-tokens). Overridden rows get no table gradient.
    Gather {
        table: NodeId,
        ids: Vec<u32>,
        overrides: Vec<(usize, Vec<f64>)>,
    },
    /// Column-wise concatenation of same-height nodes.
    ConcatCols(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Flat gradient produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grad: Vec<f64>,
    /// False when the loss had no parameter ancestors (gradients all zero).
    pub connected: bool,
}

const LN_EPS: f64 = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    /// `n_params` is the length of the flat parameter buffer that `param`
    /// offsets refer to.
    pub fn new(n_params: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            n_params,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// Parameter block `buffer[offset .. offset + rows*cols]` as a node.
    pub fn param(&mut self, buffer: &[f64], offset: usize, rows: usize, cols: usize) -> NodeId {
        let data = buffer[offset..offset + rows * cols].to_vec();
        self.push(Tensor::from_vec(rows, cols, data), Op::Param { offset })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(tb.rows, 1, "bias must be 1 x n");
        assert_eq!(ta.cols, tb.cols, "bias width");
        let mut data = ta.data.clone();
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                data[r * ta.cols + c] += tb.data[c];
            }
        }
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::AddRow(a, bias))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "sub shape");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x * c).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.rows, "matmul inner dim");
        let t = matmul(ta, tb);
        self.push(t, Op::MatMul(a, b))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.cols, "matmul_transb inner dim");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        for i in 0..ta.rows {
            let arow = ta.row(i);
            for j in 0..tb.rows {
                out.data[i * tb.rows + j] = dot(arow, tb.row(j));
            }
        }
        self.push(out, Op::MatMulTransB(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x.tanh()).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x.exp()).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Exp(a))
    }

    /// Row softmax restricted to masked-in positions. `mask` is row-major
    /// `rows x cols`; masked-out entries are exactly 0 in the output.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Vec<bool>) -> NodeId {
        let tx = &self.nodes[x.0].value;
        assert_eq!(mask.len(), tx.rows * tx.cols, "softmax mask shape");
        let mut out = Tensor::zeros(tx.rows, tx.cols);
        for i in 0..tx.rows {
            let row = tx.row(i);
            let mrow = &mask[i * tx.cols..(i + 1) * tx.cols];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mrow[j] && v > max {
                    max = v;
                }
            }
            assert!(max.is_finite(), "softmax row fully masked");
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mrow[j] {
                    let e = (v - max).exp();
                    out.data[i * tx.cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..tx.cols {
                if mrow[j] {
                    out.data[i * tx.cols + j] /= sum;
                }
            }
        }
        self.push(out, Op::SoftmaxRows { x, mask })
    }

    /// value[i] = log softmax(logits[i])[targets[i]], as an m x 1 node.
    pub fn pick_log_probs(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let tl = &self.nodes[logits.0].value;
        assert_eq!(targets.len(), tl.rows, "one target per row");
        let mut out = Tensor::zeros(tl.rows, 1);
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            out.data[i] = row[t] - lse;
        }
        self.push(out, Op::PickLogProbs { logits, targets })
    }

    /// Per-row layer normalization with learned gain/bias (1 x n each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        assert_eq!(tg.rows, 1);
        assert_eq!(tb.rows, 1);
        assert_eq!(tg.cols, tx.cols);
        assert_eq!(tb.cols, tx.cols);
        let n = tx.cols as f64;
        let mut out = Tensor::zeros(tx.rows, tx.cols);
        for i in 0..tx.rows {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..tx.cols {
                let xhat = (row[j] - mean) * inv;
                out.data[i * tx.cols + j] = xhat * tg.data[j] + tb.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    /// Mean over valid rows -> 1 x n.
    pub fn mean_pool_rows(&mut self, x: NodeId, valid: Vec<bool>) -> NodeId {
        let tx = &self.nodes[x.0].value;
        assert_eq!(valid.len(), tx.rows, "one flag per row");
        let count = valid.iter().filter(|&&v| v).count();
        assert!(count > 0, "mean pool needs at least one valid row");
        let mut out = Tensor::zeros(1, tx.cols);
        for i in 0..tx.rows {
            if valid[i] {
                for (o, &v) in out.data.iter_mut().zip(tx.row(i)) {
                    *o += v;
                }
            }
        }
        for o in &mut out.data {
            *o /= count as f64;
        }
        self.push(out, Op::MeanPoolRows { x, valid })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.data.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn min2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "min shape");
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Min2(a, b))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        let t = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(t, Op::Clamp { x, lo, hi })
    }

    pub fn gather(
        &mut self,
        table: NodeId,
        ids: Vec<u32>,
        overrides: Vec<(usize, Vec<f64>)>,
    ) -> NodeId {
        let tt = &self.nodes[table.0].value;
        let cols = tt.cols;
        let mut out = Tensor::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            let src = tt.row(id as usize);
            out.data[i * cols..(i + 1) * cols].copy_from_slice(src);
        }
        for (i, vec) in &overrides {
            assert_eq!(vec.len(), cols, "override width");
            out.data[i * cols..(i + 1) * cols].copy_from_slice(vec);
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids,
                overrides,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut col = 0;
        for &p in &parts {
            let tp = &self.nodes[p.0].value;
            assert_eq!(tp.rows, rows, "concat height");
            for i in 0..rows {
                out.data[i * total + col..i * total + col + tp.cols]
                    .copy_from_slice(tp.row(i));
            }
            col += tp.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Reverse-mode gradients of a scalar loss with respect to the flat
    /// parameter buffer. Repeated calls on the same tape are identical.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.data.len(),
            1,
            "loss must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut param_grad = vec![0.0; self.n_params];
        let mut connected = false;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param { offset } => {
                    connected = true;
                    for (p, gv) in param_grad[*offset..*offset + g.data.len()]
                        .iter_mut()
                        .zip(&g.data)
                    {
                        *p += gv;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g.data, g.rows, g.cols);
                    accumulate(&mut grads, *b, &g.data, g.rows, g.cols);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *a, &g.data, g.rows, g.cols);
                    let mut bg = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            bg[c] += g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *bias, &bg, 1, g.cols);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g.data, g.rows, g.cols);
                    let neg: Vec<f64> = g.data.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, &neg, g.rows, g.cols);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut grads, *a, &da, g.rows, g.cols);
                    accumulate(&mut grads, *b, &db, g.rows, g.cols);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data.iter().map(|gv| gv * c).collect();
                    accumulate(&mut grads, *a, &da, g.rows, g.cols);
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    // da[i][l] = dot(g row i, b row l)  (i.e. g . b^T)
                    let mut da = vec![0.0; ta.rows * ta.cols];
                    for i in 0..g.rows {
                        let grow = &g.data[i * g.cols..(i + 1) * g.cols];
                        let darow = &mut da[i * ta.cols..(i + 1) * ta.cols];
                        for (l, dv) in darow.iter_mut().enumerate() {
                            *dv = dot(grow, tb.row(l));
                        }
                    }
                    // db = a^T . g
                    let mut db = vec![0.0; tb.rows * tb.cols];
                    for i in 0..ta.rows {
                        let arow = ta.row(i);
                        let grow = &g.data[i * g.cols..(i + 1) * g.cols];
                        for (l, &av) in arow.iter().enumerate() {
                            if av != 0.0 {
                                let dbrow = &mut db[l * tb.cols..(l + 1) * tb.cols];
                                for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &da, ta.rows, ta.cols);
                    accumulate(&mut grads, *b, &db, tb.rows, tb.cols);
                }
                Op::MatMulTransB(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    // c = a b^T; da = g . b ; db = g^T . a
                    let mut da = vec![0.0; ta.rows * ta.cols];
                    for i in 0..g.rows {
                        let grow = &g.data[i * g.cols..(i + 1) * g.cols];
                        let darow = &mut da[i * ta.cols..(i + 1) * ta.cols];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv != 0.0 {
                                for (dv, &bv) in darow.iter_mut().zip(tb.row(j)) {
                                    *dv += gv * bv;
                                }
                            }
                        }
                    }
                    let mut db = vec![0.0; tb.rows * tb.cols];
                    for i in 0..g.rows {
                        let grow = &g.data[i * g.cols..(i + 1) * g.cols];
                        let arow = ta.row(i);
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv != 0.0 {
                                let dbrow = &mut db[j * tb.cols..(j + 1) * tb.cols];
                                for (dv, &av) in dbrow.iter_mut().zip(arow) {
                                    *dv += gv * av;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &da, ta.rows, ta.cols);
                    accumulate(&mut grads, *b, &db, tb.rows, tb.cols);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, *a, &da, g.rows, g.cols);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv)
                        .collect();
                    accumulate(&mut grads, *a, &da, g.rows, g.cols);
                }
                Op::SoftmaxRows { x, mask } => {
                    let y = &self.nodes[idx].value;
                    let mut dx = vec![0.0; y.data.len()];
                    for i in 0..y.rows {
                        let yrow = y.row(i);
                        let grow = &g.data[i * y.cols..(i + 1) * y.cols];
                        let mrow = &mask[i * y.cols..(i + 1) * y.cols];
                        let dot: f64 = yrow
                            .iter()
                            .zip(grow)
                            .zip(mrow)
                            .filter(|(_, &m)| m)
                            .map(|((yv, gv), _)| yv * gv)
                            .sum();
                        for j in 0..y.cols {
                            if mrow[j] {
                                dx[i * y.cols + j] = yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx, y.rows, y.cols);
                }
                Op::PickLogProbs { logits, targets } => {
                    let tl = &self.nodes[logits.0].value;
                    let mut dl = vec![0.0; tl.data.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        let gv = g.data[i];
                        if gv == 0.0 {
                            continue;
                        }
                        let row = tl.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..tl.cols {
                            let p = (row[j] - max).exp() / sum;
                            let delta = if j == t { 1.0 } else { 0.0 };
                            dl[i * tl.cols + j] += gv * (delta - p);
                        }
                    }
                    accumulate(&mut grads, *logits, &dl, tl.rows, tl.cols);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let tx = &self.nodes[x.0].value;
                    let tg = &self.nodes[gain.0].value;
                    let n = tx.cols as f64;
                    let mut dx = vec![0.0; tx.data.len()];
                    let mut dgain = vec![0.0; tx.cols];
                    let mut dbias = vec![0.0; tx.cols];
                    for i in 0..tx.rows {
                        let row = tx.row(i);
                        let grow = &g.data[i * tx.cols..(i + 1) * tx.cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = grow
                            .iter()
                            .zip(&tg.data)
                            .map(|(gv, gamma)| gv * gamma)
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n;
                        for j in 0..tx.cols {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dx[i * tx.cols + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, &dx, tx.rows, tx.cols);
                    accumulate(&mut grads, *gain, &dgain, 1, tx.cols);
                    accumulate(&mut grads, *bias, &dbias, 1, tx.cols);
                }
                Op::MeanPoolRows { x, valid } => {
                    let tx = &self.nodes[x.0].value;
                    let count = valid.iter().filter(|&&v| v).count() as f64;
                    let mut dx = vec![0.0; tx.data.len()];
                    for i in 0..tx.rows {
                        if valid[i] {
                            for j in 0..tx.cols {
                                dx[i * tx.cols + j] = g.data[j] / count;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx, tx.rows, tx.cols);
                }
                Op::Sum(a) => {
                    let ta = &self.nodes[a.0].value;
                    let da = vec![g.data[0]; ta.data.len()];
                    accumulate(&mut grads, *a, &da, ta.rows, ta.cols);
                }
                Op::Min2(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let mut da = vec![0.0; ta.data.len()];
                    let mut db = vec![0.0; tb.data.len()];
                    for (k, gv) in g.data.iter().enumerate() {
                        if ta.data[k] <= tb.data[k] {
                            da[k] = *gv;
                        } else {
                            db[k] = *gv;
                        }
                    }
                    accumulate(&mut grads, *a, &da, ta.rows, ta.cols);
                    accumulate(&mut grads, *b, &db, tb.rows, tb.cols);
                }
                Op::Clamp { x, lo, hi } => {
                    let tx = &self.nodes[x.0].value;
                    let da: Vec<f64> = tx
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| if v > *lo && v < *hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &da, tx.rows, tx.cols);
                }
                Op::Gather {
                    table,
                    ids,
                    overrides,
                } => {
                    let tt = &self.nodes[table.0].value;
                    let mut dt = vec![0.0; tt.data.len()];
                    let overridden: Vec<usize> = overrides.iter().map(|(i, _)| *i).collect();
                    for (i, &id) in ids.iter().enumerate() {
                        if overridden.contains(&i) {
                            continue;
                        }
                        let grow = &g.data[i * tt.cols..(i + 1) * tt.cols];
                        let drow = &mut dt[id as usize * tt.cols..(id as usize + 1) * tt.cols];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                    accumulate(&mut grads, *table, &dt, tt.rows, tt.cols);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    let total = g.cols;
                    for &p in parts {
                        let tp = &self.nodes[p.0].value;
                        let mut dp = vec![0.0; tp.data.len()];
                        for i in 0..tp.rows {
                            dp[i * tp.cols..(i + 1) * tp.cols].copy_from_slice(
                                &g.data[i * total + col..i * total + col + tp.cols],
                            );
                        }
                        accumulate(&mut grads, p, &dp, tp.rows, tp.cols);
                        col += tp.cols;
                    }
                }
            }
        }

        Gradients {
            grad: param_grad,
            connected,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, data: &[f64], rows: usize, cols: usize) {
    match &mut grads[id.0] {
        Some(t) => {
            for (acc, &d) in t.data.iter_mut().zip(data) {
                *acc += d;
            }
        }
        slot => {
            *slot = Some(Tensor::from_vec(rows, cols, data.to_vec()));
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b.data[l * n..(l + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}
