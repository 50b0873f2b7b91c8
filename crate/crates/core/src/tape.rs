//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each training step builds a fresh graph; `backward` walks it once in
//! reverse and accumulates gradients into leaf nodes. All reductions run
//! in a fixed order, so a fixed seed reproduces results bit for bit.

use crate::nn::ParamStore;
use crate::tensor::{matmul, matmul_ta, matmul_tb, Tensor};

pub type NodeId = usize;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// How a focal/cross-entropy reduction divides its summed terms.
#[derive(Debug, Clone, Copy)]
pub enum LossNorm {
    /// Divide by the number of positive targets (at least 1).
    PositiveCount,
    /// Divide by total element count.
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Abs(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    LnClamped(NodeId, f64),
    SqrtClamped(NodeId, f64),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    /// A @ B^T with B stored [n, k].
    MatMulTB(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    RowBroadcastAdd(NodeId, NodeId),
    RowBroadcastMul(NodeId, NodeId),
    ColBroadcastMul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    WeightedPoolRows(NodeId, NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    L2NormalizeRows {
        x: NodeId,
        eps: f64,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
        eps: f64,
    },
    ConvDw3 {
        x: NodeId,
        kernel: NodeId,
    },
    Conv1x1 {
        x: NodeId,
        weight: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
    },
    FocalBce {
        logits: NodeId,
        positives: Vec<bool>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    BceLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward/backward graph. Parameter nodes are deduplicated so that a
/// parameter used at several sites accumulates a single gradient.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    param_of_node: Vec<Option<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            param_of_node: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Tape without parameter tracking, for pure-input graphs in tests.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            param_of_node: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.param_of_node.push(None);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf node for a stored parameter; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, pid: usize) -> NodeId {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(id) = self.param_nodes[pid] {
            return id;
        }
        let id = self.push(store.value(pid).clone(), Op::Leaf);
        self.param_nodes[pid] = Some(id);
        self.param_of_node[id] = Some(pid);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, f64::min);
        self.push(v, Op::Min(a, b))
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, f64::max);
        self.push(v, Op::Max(a, b))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(gelu_val);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(eps).ln());
        self.push(v, Op::LnClamped(a, eps))
    }

    pub fn sqrt_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(eps).sqrt());
        self.push(v, Op::SqrtClamped(a, eps))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// a @ b^T with b stored [n, k].
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_tb(&self.nodes[a].value, &self.nodes[b].value);
        self.push(v, Op::MatMulTB(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transposed();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old = self.nodes[a].value.shape().to_vec();
        let v = self.nodes[a].value.reshaped(shape);
        self.push(v, Op::Reshape(a, old))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            r += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::new(vec![r, c], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0]].value.rows();
        let total_c: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut data = vec![0.0; r * total_c];
        let mut c0 = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            assert_eq!(t.rows(), r, "concat_cols row mismatch");
            let c = t.cols();
            for i in 0..r {
                data[i * total_c + c0..i * total_c + c0 + c].copy_from_slice(t.row(i));
            }
            c0 += c;
        }
        self.push(Tensor::new(vec![r, total_c], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let t = &self.nodes[a].value;
        let c = t.cols();
        let data = t.data()[r0 * c..r1 * c].to_vec();
        self.push(Tensor::new(vec![r1 - r0, c], data), Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let t = &self.nodes[a].value;
        let (r, c) = (t.rows(), t.cols());
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + c0..i * c + c1]);
        }
        self.push(Tensor::new(vec![r, w], data), Op::SliceCols(a, c0, c1))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let t = &self.nodes[a].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), c], data),
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll(a))
    }

    /// Per-row sum of a rank-2 tensor, shape [r, 1].
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::new(vec![t.rows(), 1], data), Op::RowSum(a))
    }

    /// Per-column sum of a rank-2 tensor, shape [1, c].
    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (acc, &x) in data.iter_mut().zip(t.row(i)) {
                *acc += x;
            }
        }
        self.push(Tensor::new(vec![1, c], data), Op::ColSum(a))
    }

    /// x[r,c] + b[1,c] broadcast over rows.
    pub fn row_broadcast_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(tb.rows(), 1);
        assert_eq!(ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len());
        for i in 0..ta.rows() {
            for (x, y) in ta.row(i).iter().zip(tb.row(0)) {
                data.push(x + y);
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::RowBroadcastAdd(a, b))
    }

    /// x[r,c] * b[1,c] broadcast over rows.
    pub fn row_broadcast_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(tb.rows(), 1);
        assert_eq!(ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len());
        for i in 0..ta.rows() {
            for (x, y) in ta.row(i).iter().zip(tb.row(0)) {
                data.push(x * y);
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::RowBroadcastMul(a, b))
    }

    /// x[r,c] * s[r,1] broadcast over columns.
    pub fn col_broadcast_mul(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (ta, ts) = (&self.nodes[a].value, &self.nodes[s].value);
        assert_eq!(ts.cols(), 1);
        assert_eq!(ta.rows(), ts.rows());
        let mut data = Vec::with_capacity(ta.len());
        for i in 0..ta.rows() {
            let f = ts.at2(i, 0);
            for &x in ta.row(i) {
                data.push(x * f);
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::ColBroadcastMul(a, s))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            // order-invariant normalizer, so reordering the inputs permutes
            // the outputs bit for bit
            let z = sorted_sum(&exps);
            data.extend(exps.iter().map(|e| e / z));
        }
        self.push(Tensor::new(vec![r, c], data), Op::SoftmaxRows(a))
    }

    /// weights [1, L] x values [L, D] -> [1, D], accumulating each output in
    /// ascending-addend order. Used where a pooled reduction must be exactly
    /// invariant to input token order.
    pub fn weighted_pool_rows(&mut self, weights: NodeId, values: NodeId) -> NodeId {
        let tw = &self.nodes[weights].value;
        let tv = &self.nodes[values].value;
        assert_eq!(tw.rows(), 1);
        assert_eq!(tw.cols(), tv.rows());
        let (l, d) = (tv.rows(), tv.cols());
        let mut out = vec![0.0; d];
        let mut addends = vec![0.0; l];
        for j in 0..d {
            for p in 0..l {
                addends[p] = tw.data()[p] * tv.at2(p, j);
            }
            out[j] = sorted_sum(&addends);
        }
        self.push(
            Tensor::new(vec![1, d], out),
            Op::WeightedPoolRows(weights, values),
        )
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (tx, tg, tb) = (
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        );
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.len(), c);
        assert_eq!(tb.len(), c);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * tg.data()[j] + tb.data()[j]);
            }
        }
        self.push(
            Tensor::new(vec![r, c], data),
            Op::LayerNormRows { x, gamma, beta, eps },
        )
    }

    /// Rows scaled to unit L2 norm; rows with norm below `eps` become zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let t = &self.nodes[x].value;
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if n < eps {
                data.extend(std::iter::repeat(0.0).take(c));
            } else {
                data.extend(row.iter().map(|&v| v / n));
            }
        }
        self.push(Tensor::new(vec![r, c], data), Op::L2NormalizeRows { x, eps })
    }

    /// Batch norm over (batch, height, width) per channel on a [B,C,H,W]
    /// tensor. In training mode stats come from the batch; in eval mode the
    /// caller passes running stats. Returns (node, batch_mean, batch_var).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let tx = &self.nodes[x].value;
        let shape = tx.shape().to_vec();
        assert_eq!(shape.len(), 4, "batch_norm expects [B,C,H,W]");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = (b * plane) as f64;
        let train = running.is_none();
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for &v in &tx.data()[base..base + plane] {
                            mean[ci] += v;
                        }
                    }
                }
                for mv in mean.iter_mut() {
                    *mv /= m;
                }
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for &v in &tx.data()[base..base + plane] {
                            let d = v - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for vv in var.iter_mut() {
                    *vv /= m;
                }
                (mean, var)
            }
        };
        let tg = self.nodes[gamma].value.data().to_vec();
        let tb = self.nodes[beta].value.data().to_vec();
        assert_eq!(tg.len(), c);
        let mut data = vec![0.0; tx.len()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let base = (bi * c + ci) * plane;
                for k in 0..plane {
                    let v = tx.data()[base + k];
                    data[base + k] = (v - mean[ci]) * inv * tg[ci] + tb[ci];
                }
            }
        }
        let node = self.push(
            Tensor::new(shape, data),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                train,
                eps,
            },
        );
        (node, mean, var)
    }

    /// Depth-wise 3x3 convolution, stride 1, zero padding 1, on [B,C,H,W]
    /// with kernel [C,3,3].
    pub fn conv_dw3(&mut self, x: NodeId, kernel: NodeId) -> NodeId {
        let tx = &self.nodes[x].value;
        let tk = &self.nodes[kernel].value;
        let s = tx.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(tk.shape(), &[c, 3, 3], "depth-wise kernel must be [C,3,3]");
        let mut out = vec![0.0; tx.len()];
        let xd = tx.data();
        let kd = tk.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let kb = ci * 9;
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for u in 0..3usize {
                            let ii = i as isize + u as isize - 1;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for v in 0..3usize {
                                let jj = j as isize + v as isize - 1;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += xd[base + ii as usize * w + jj as usize] * kd[kb + u * 3 + v];
                            }
                        }
                        out[base + i * w + j] = acc;
                    }
                }
            }
        }
        self.push(Tensor::new(s.to_vec(), out), Op::ConvDw3 { x, kernel })
    }

    /// Point-wise convolution on [B,Cin,H,W] with weight [Cout,Cin].
    pub fn conv1x1(&mut self, x: NodeId, weight: NodeId) -> NodeId {
        let tx = &self.nodes[x].value;
        let tw = &self.nodes[weight].value;
        let s = tx.shape();
        assert_eq!(s.len(), 4);
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (cout, cin2) = (tw.rows(), tw.cols());
        assert_eq!(cin, cin2, "conv1x1 channel mismatch");
        let plane = h * w;
        let mut out = vec![0.0; b * cout * plane];
        let xd = tx.data();
        let wd = tw.data();
        for bi in 0..b {
            let xb = bi * cin * plane;
            let ob = bi * cout * plane;
            for o in 0..cout {
                let orow = &mut out[ob + o * plane..ob + (o + 1) * plane];
                for ci in 0..cin {
                    let wv = wd[o * cin + ci];
                    if wv == 0.0 {
                        continue;
                    }
                    let xrow = &xd[xb + ci * plane..xb + (ci + 1) * plane];
                    for (ov, &xv) in orow.iter_mut().zip(xrow) {
                        *ov += wv * xv;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![b, cout, h, w], out),
            Op::Conv1x1 { x, weight },
        )
    }

    /// Weighted-mean softmax cross entropy over rows of `logits`, with one
    /// integer target per row.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        row_weights: &[f64],
    ) -> NodeId {
        let t = &self.nodes[logits].value;
        let (r, c) = (t.rows(), t.cols());
        assert_eq!(targets.len(), r);
        assert_eq!(row_weights.len(), r);
        let wsum: f64 = row_weights.iter().sum();
        let mut total = 0.0;
        for i in 0..r {
            assert!(targets[i] < c, "target out of range");
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            total += row_weights[i] * (z.ln() + m - row[targets[i]]);
        }
        self.push(
            Tensor::scalar(total / wsum),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
            },
        )
    }

    /// Binary focal loss on logits with a boolean positive mask, summed and
    /// divided per `norm`.
    pub fn focal_bce(
        &mut self,
        logits: NodeId,
        positives: &[bool],
        alpha: f64,
        gamma: f64,
        norm: LossNorm,
    ) -> NodeId {
        let t = &self.nodes[logits].value;
        assert_eq!(t.len(), positives.len());
        let n_pos = positives.iter().filter(|&&p| p).count();
        let denom = match norm {
            LossNorm::PositiveCount => n_pos.max(1) as f64,
            LossNorm::Mean => t.len() as f64,
        };
        let mut total = 0.0;
        for (&x, &pos) in t.data().iter().zip(positives) {
            let p = sigmoid(x);
            if pos {
                // -alpha (1-p)^gamma ln p
                total += alpha * (1.0 - p).powf(gamma) * softplus(-x);
            } else {
                total += (1.0 - alpha) * p.powf(gamma) * softplus(x);
            }
        }
        self.push(
            Tensor::scalar(total / denom),
            Op::FocalBce {
                logits,
                positives: positives.to_vec(),
                alpha,
                gamma,
                norm: denom,
            },
        )
    }

    /// Mean binary cross entropy on logits against soft targets.
    pub fn bce_logits(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let t = &self.nodes[logits].value;
        assert_eq!(t.len(), targets.len());
        let mut total = 0.0;
        for (&x, &y) in t.data().iter().zip(targets) {
            total += softplus(x) - y * x;
        }
        self.push(
            Tensor::scalar(total / t.len() as f64),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Run reverse-mode accumulation from a scalar node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward needs a scalar loss");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss] = Some(Tensor::scalar(1.0));
        for i in (0..=loss).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
    }

    /// Gradient of the last `backward` with respect to a leaf node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Collect (param id, gradient) pairs for all parameter leaves touched
    /// by this tape, in parameter-store order.
    pub fn param_grads(&self) -> Vec<(usize, Tensor)> {
        let mut out = Vec::new();
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(nid) = node {
                if let Some(g) = self.grads.get(*nid).and_then(|g| g.as_ref()) {
                    out.push((pid, g.clone()));
                }
            }
        }
        out
    }

    fn accum(&mut self, id: NodeId, t: Tensor) {
        match &mut self.grads[id] {
            Some(g) => {
                assert_eq!(g.shape(), t.shape(), "gradient shape mismatch");
                for (a, b) in g.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&mut self, i: NodeId, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = tensor_zip(g, &self.nodes[b].value, |x, y| x * y);
                let gb = tensor_zip(g, &self.nodes[a].value, |x, y| x * y);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Div(a, b) => {
                let tb = &self.nodes[b].value;
                let out = &self.nodes[i].value;
                let ga = tensor_zip(g, tb, |x, y| x / y);
                let gb_data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data().iter().zip(tb.data()))
                    .map(|(&gv, (&ov, &bv))| -gv * ov / bv)
                    .collect();
                let gb = Tensor::new(tb.shape().to_vec(), gb_data);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Min(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let ga = tensor_zip3(g, ta, tb, |gv, x, y| if x <= y { gv } else { 0.0 });
                let gb = tensor_zip3(g, ta, tb, |gv, x, y| if x <= y { 0.0 } else { gv });
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Max(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let ga = tensor_zip3(g, ta, tb, |gv, x, y| if x >= y { gv } else { 0.0 });
                let gb = tensor_zip3(g, ta, tb, |gv, x, y| if x >= y { 0.0 } else { gv });
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::AddScalar(a, _) => self.accum(a, g.clone()),
            Op::MulScalar(a, c) => self.accum(a, g.map(|x| x * c)),
            Op::Abs(a) => {
                let ga = tensor_zip(g, &self.nodes[a].value, |gv, x| gv * signum0(x));
                self.accum(a, ga);
            }
            Op::Relu(a) => {
                let ga = tensor_zip(g, &self.nodes[a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accum(a, ga);
            }
            Op::Gelu(a) => {
                let ga = tensor_zip(g, &self.nodes[a].value, |gv, x| gv * gelu_grad(x));
                self.accum(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = tensor_zip(g, &self.nodes[i].value, |gv, y| gv * y * (1.0 - y));
                self.accum(a, ga);
            }
            Op::Tanh(a) => {
                let ga = tensor_zip(g, &self.nodes[i].value, |gv, y| gv * (1.0 - y * y));
                self.accum(a, ga);
            }
            Op::Exp(a) => {
                let ga = tensor_zip(g, &self.nodes[i].value, |gv, y| gv * y);
                self.accum(a, ga);
            }
            Op::LnClamped(a, eps) => {
                let ga = tensor_zip(g, &self.nodes[a].value, |gv, x| {
                    if x > eps {
                        gv / x
                    } else {
                        0.0
                    }
                });
                self.accum(a, ga);
            }
            Op::SqrtClamped(a, eps) => {
                let out = self.nodes[i].value.clone();
                let ga = tensor_zip3(g, &self.nodes[a].value, &out, |gv, x, y| {
                    if x > eps {
                        gv / (2.0 * y)
                    } else {
                        0.0
                    }
                });
                self.accum(a, ga);
            }
            Op::Softplus(a) => {
                let ga = tensor_zip(g, &self.nodes[a].value, |gv, x| gv * sigmoid(x));
                self.accum(a, ga);
            }
            Op::MatMul(a, b) => {
                let ga = matmul_tb(g, &self.nodes[b].value);
                let gb = matmul_ta(&self.nodes[a].value, g);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::MatMulTB(a, b) => {
                let ga = matmul(g, &self.nodes[b].value);
                let gb = matmul_ta(g, &self.nodes[a].value);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Transpose(a) => self.accum(a, g.transposed()),
            Op::Reshape(a, ref old) => self.accum(a, g.reshaped(old)),
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let r = self.nodes[p].value.rows();
                    let c = self.nodes[p].value.cols();
                    let data = g.data()[r0 * c..(r0 + r) * c].to_vec();
                    self.accum(p, Tensor::new(vec![r, c], data));
                    r0 += r;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total_c = g.cols();
                let mut c0 = 0;
                for p in parts {
                    let c = self.nodes[p].value.cols();
                    let mut data = Vec::with_capacity(r * c);
                    for ri in 0..r {
                        data.extend_from_slice(&g.data()[ri * total_c + c0..ri * total_c + c0 + c]);
                    }
                    self.accum(p, Tensor::new(vec![r, c], data));
                    c0 += c;
                }
            }
            Op::SliceRows(a, r0, _r1) => {
                let ta = &self.nodes[a].value;
                let mut full = Tensor::zeros(ta.shape());
                let c = ta.cols();
                full.data_mut()[r0 * c..r0 * c + g.len()].copy_from_slice(g.data());
                self.accum(a, full);
            }
            Op::SliceCols(a, c0, c1) => {
                let ta = &self.nodes[a].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut full = Tensor::zeros(&[r, c]);
                let w = c1 - c0;
                for ri in 0..r {
                    full.data_mut()[ri * c + c0..ri * c + c1]
                        .copy_from_slice(&g.data()[ri * w..(ri + 1) * w]);
                }
                self.accum(a, full);
            }
            Op::GatherRows(a, idx) => {
                let ta = &self.nodes[a].value;
                let mut full = Tensor::zeros(ta.shape());
                let c = ta.cols();
                for (gi, &src) in idx.iter().enumerate() {
                    let grow = &g.data()[gi * c..(gi + 1) * c];
                    for (fv, &gv) in full.data_mut()[src * c..(src + 1) * c].iter_mut().zip(grow) {
                        *fv += gv;
                    }
                }
                self.accum(a, full);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let ta = self.nodes[a].value.shape().to_vec();
                self.accum(a, Tensor::full(&ta, gv));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.len() as f64;
                let gv = g.item() / n;
                let ta = self.nodes[a].value.shape().to_vec();
                self.accum(a, Tensor::full(&ta, gv));
            }
            Op::RowSum(a) => {
                let ta = &self.nodes[a].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend(std::iter::repeat(g.data()[i]).take(c));
                }
                self.accum(a, Tensor::new(vec![r, c], data));
            }
            Op::ColSum(a) => {
                let ta = &self.nodes[a].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend_from_slice(g.data());
                }
                self.accum(a, Tensor::new(vec![r, c], data));
            }
            Op::RowBroadcastAdd(a, b) => {
                self.accum(a, g.clone());
                let c = g.cols();
                let mut col = vec![0.0; c];
                for i in 0..g.rows() {
                    for (acc, &x) in col.iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                self.accum(b, Tensor::new(vec![1, c], col));
            }
            Op::RowBroadcastMul(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = Vec::with_capacity(r * c);
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gv = g.at2(i, j);
                        ga.push(gv * tb.at2(0, j));
                        gb[j] += gv * ta.at2(i, j);
                    }
                }
                self.accum(a, Tensor::new(vec![r, c], ga));
                self.accum(b, Tensor::new(vec![1, c], gb));
            }
            Op::ColBroadcastMul(a, s) => {
                let (ta, ts) = (&self.nodes[a].value, &self.nodes[s].value);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = Vec::with_capacity(r * c);
                let mut gs = vec![0.0; r];
                for i in 0..r {
                    let f = ts.at2(i, 0);
                    for j in 0..c {
                        let gv = g.at2(i, j);
                        ga.push(gv * f);
                        gs[i] += gv * ta.at2(i, j);
                    }
                }
                self.accum(a, Tensor::new(vec![r, c], ga));
                self.accum(s, Tensor::new(vec![r, 1], gs));
            }
            Op::WeightedPoolRows(weights, values) => {
                let tw = &self.nodes[weights].value;
                let tv = &self.nodes[values].value;
                let (l, d) = (tv.rows(), tv.cols());
                let mut gw = vec![0.0; l];
                let mut gv = vec![0.0; l * d];
                for p in 0..l {
                    let wv = tw.data()[p];
                    let vrow = tv.row(p);
                    let mut acc = 0.0;
                    for j in 0..d {
                        let gj = g.data()[j];
                        acc += gj * vrow[j];
                        gv[p * d + j] = wv * gj;
                    }
                    gw[p] = acc;
                }
                self.accum(weights, Tensor::new(vec![1, l], gw));
                self.accum(values, Tensor::new(vec![l, d], gv));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (r, c) = (y.rows(), y.cols());
                let mut ga = Vec::with_capacity(r * c);
                for ri in 0..r {
                    let yr = y.row(ri);
                    let gr = g.row(ri);
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accum(a, Tensor::new(vec![r, c], ga));
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let tx = &self.nodes[x].value;
                let tg = &self.nodes[gamma].value;
                let (r, c) = (tx.rows(), tx.cols());
                let mut gx = Vec::with_capacity(r * c);
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ri in 0..r {
                    let row = tx.row(ri);
                    let gr = g.row(ri);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * tg.data()[j])
                        .collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx.push(inv * (dxhat[j] - m1 - xhat[j] * m2));
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                }
                self.accum(x, Tensor::new(vec![r, c], gx));
                let gshape = self.nodes[gamma].value.shape().to_vec();
                let bshape = self.nodes[beta].value.shape().to_vec();
                self.accum(gamma, Tensor::new(gshape, ggamma));
                self.accum(beta, Tensor::new(bshape, gbeta));
            }
            Op::L2NormalizeRows { x, eps } => {
                let tx = &self.nodes[x].value;
                let ty = &self.nodes[i].value;
                let (r, c) = (tx.rows(), tx.cols());
                let mut gx = Vec::with_capacity(r * c);
                for ri in 0..r {
                    let row = tx.row(ri);
                    let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    if n < eps {
                        gx.extend(std::iter::repeat(0.0).take(c));
                        continue;
                    }
                    let yr = ty.row(ri);
                    let gr = g.row(ri);
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| (gv - yv * dot) / n),
                    );
                }
                self.accum(x, Tensor::new(vec![r, c], gx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
                eps,
            } => {
                let tx = &self.nodes[x].value;
                let s = tx.shape().to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                let m = (b * plane) as f64;
                let tg = self.nodes[gamma].value.data().to_vec();
                let mut gx = vec![0.0; tx.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    // channel-wise sums over batch and plane
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for k in 0..plane {
                            let gv = g.data()[base + k];
                            let xhat = (tx.data()[base + k] - mean[ci]) * inv;
                            sum_g += gv;
                            sum_gx += gv * xhat;
                            ggamma[ci] += gv * xhat;
                            gbeta[ci] += gv;
                        }
                    }
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for k in 0..plane {
                            let gv = g.data()[base + k];
                            let xhat = (tx.data()[base + k] - mean[ci]) * inv;
                            gx[base + k] = if train {
                                tg[ci] * inv * (gv - sum_g / m - xhat * sum_gx / m)
                            } else {
                                tg[ci] * inv * gv
                            };
                        }
                    }
                }
                self.accum(x, Tensor::new(s, gx));
                let gshape = self.nodes[gamma].value.shape().to_vec();
                let bshape = self.nodes[beta].value.shape().to_vec();
                self.accum(gamma, Tensor::new(gshape, ggamma));
                self.accum(beta, Tensor::new(bshape, gbeta));
            }
            Op::ConvDw3 { x, kernel } => {
                let tx = &self.nodes[x].value;
                let tk = &self.nodes[kernel].value;
                let s = tx.shape().to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0; tx.len()];
                let mut gk = vec![0.0; tk.len()];
                let xd = tx.data();
                let kd = tk.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let kb = ci * 9;
                        for i in 0..h {
                            for j in 0..w {
                                let gv = g.data()[base + i * w + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for u in 0..3usize {
                                    let ii = i as isize + u as isize - 1;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for v in 0..3usize {
                                        let jj = j as isize + v as isize - 1;
                                        if jj < 0 || jj >= w as isize {
                                            continue;
                                        }
                                        let xi = base + ii as usize * w + jj as usize;
                                        gx[xi] += gv * kd[kb + u * 3 + v];
                                        gk[kb + u * 3 + v] += gv * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let kshape = tk.shape().to_vec();
                self.accum(x, Tensor::new(s, gx));
                self.accum(kernel, Tensor::new(kshape, gk));
            }
            Op::Conv1x1 { x, weight } => {
                let tx = &self.nodes[x].value;
                let tw = &self.nodes[weight].value;
                let s = tx.shape().to_vec();
                let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
                let cout = tw.rows();
                let plane = h * w;
                let mut gx = vec![0.0; tx.len()];
                let mut gw = vec![0.0; tw.len()];
                let xd = tx.data();
                let wd = tw.data();
                for bi in 0..b {
                    let xb = bi * cin * plane;
                    let ob = bi * cout * plane;
                    for o in 0..cout {
                        let grow = &g.data()[ob + o * plane..ob + (o + 1) * plane];
                        for ci in 0..cin {
                            let xrow = &xd[xb + ci * plane..xb + (ci + 1) * plane];
                            let wv = wd[o * cin + ci];
                            let mut acc = 0.0;
                            let gxrow = &mut gx[xb + ci * plane..xb + (ci + 1) * plane];
                            for ((gxv, &gv), &xv) in gxrow.iter_mut().zip(grow).zip(xrow) {
                                *gxv += gv * wv;
                                acc += gv * xv;
                            }
                            gw[o * cin + ci] += acc;
                        }
                    }
                }
                let wshape = tw.shape().to_vec();
                self.accum(x, Tensor::new(s, gx));
                self.accum(weight, Tensor::new(wshape, gw));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                row_weights,
            } => {
                let t = &self.nodes[logits].value;
                let (r, c) = (t.rows(), t.cols());
                let wsum: f64 = row_weights.iter().sum();
                let gv = g.item() / wsum;
                let mut gl = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = t.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        let p = e / z;
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        gl.push(gv * row_weights[i] * (p - ind));
                    }
                }
                self.accum(logits, Tensor::new(vec![r, c], gl));
            }
            Op::FocalBce {
                logits,
                positives,
                alpha,
                gamma,
                norm,
            } => {
                let t = &self.nodes[logits].value;
                let gv = g.item() / norm;
                let mut gl = Vec::with_capacity(t.len());
                for (&x, &pos) in t.data().iter().zip(&positives) {
                    let p = sigmoid(x);
                    let d = if pos {
                        // d/dx [-alpha (1-p)^gamma ln p]
                        alpha * (1.0 - p).powf(gamma) * (gamma * p * (-softplus(-x)) - (1.0 - p))
                    } else {
                        // d/dx [-(1-alpha) p^gamma ln(1-p)]
                        (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (-softplus(x)))
                    };
                    gl.push(gv * d);
                }
                self.accum(logits, Tensor::new(t.shape().to_vec(), gl));
            }
            Op::BceLogits { logits, targets } => {
                let t = &self.nodes[logits].value;
                let gv = g.item() / t.len() as f64;
                let gl: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &y)| gv * (sigmoid(x) - y))
                    .collect();
                self.accum(logits, Tensor::new(t.shape().to_vec(), gl));
            }
        }
    }
}

/// Sum in ascending value order: deterministic and invariant to the input's
/// ordering (a permutation of addends yields the identical float result).
pub fn sorted_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn tensor_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.len(), b.len());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data)
}

fn tensor_zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter().zip(c.data()))
        .map(|(&x, (&y, &z))| f(x, y, z))
        .collect();
    Tensor::new(b.shape().to_vec(), data)
}
