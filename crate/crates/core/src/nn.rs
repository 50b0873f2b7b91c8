//! Parameter storage, standard layers, and the AdamW optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persisted state that is not optimized (e.g. batch-norm running stats).
    Buffer,
}

struct Entry {
    name: String,
    value: Tensor,
    kind: ParamKind,
}

/// Flat, name-addressed parameter container. Iteration order is insertion
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        self.insert(name, value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> usize {
        self.insert(name, value, ParamKind::Buffer)
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            kind,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, pid: usize) -> &Tensor {
        &self.entries[pid].value
    }

    pub fn value_mut(&mut self, pid: usize) -> &mut Tensor {
        &mut self.entries[pid].value
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.entries[pid].name
    }

    pub fn kind(&self, pid: usize) -> ParamKind {
        self.entries[pid].kind
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.kind, &e.value))
    }

    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind == ParamKind::Trainable)
            .collect()
    }

    pub fn total_trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Standard normal via Box-Muller over the given RNG.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data)
}

/// y = x @ W + b with W stored [d_in, d_out].
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(&format!("{prefix}.weight"), xavier_uniform(rng, d_in, d_out));
        let b = store.add(&format!("{prefix}.bias"), Tensor::zeros(&[1, d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.row_broadcast_add(y, b)
    }
}

pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{prefix}.gamma"), Tensor::full(&[1, dim], 1.0));
        let beta = store.add(&format!("{prefix}.beta"), Tensor::zeros(&[1, dim]));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm_rows(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Multi-layer perceptron; activation between layers, none after the last.
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: &[usize],
        act: Activation,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = match self.act {
                    Activation::Relu => tape.relu(h),
                    Activation::Gelu => tape.gelu(h),
                };
            }
        }
        h
    }
}

/// Attention maps recorded during a forward pass, one entry per requested
/// site. Each tensor is row-stochastic (queries x memory).
#[derive(Default)]
pub struct AttnCapture {
    pub maps: Vec<(String, Tensor)>,
}

/// Standard multi-head attention. The output projection result is returned
/// without any residual; callers own the residual structure.
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        Self {
            wq: Linear::new(store, rng, &format!("{prefix}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{prefix}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{prefix}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{prefix}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: NodeId,
        memory: NodeId,
        capture: Option<(&str, &mut AttnCapture)>,
    ) -> NodeId {
        let q = self.wq.forward(tape, store, queries);
        let k = self.wk.forward(tape, store, memory);
        let v = self.wv.forward(tape, store, memory);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Tensor> = None;
        for hd in 0..self.heads {
            let (c0, c1) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let scores = tape.matmul_tb(qh, kh);
            let scaled = tape.mul_scalar(scores, scale);
            let attn = tape.softmax_rows(scaled);
            if capture.is_some() {
                let t = tape.value(attn).clone();
                attn_sum = Some(match attn_sum.take() {
                    None => t,
                    Some(mut acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                        acc
                    }
                });
            }
            outs.push(tape.matmul(attn, vh));
        }
        if let Some((label, cap)) = capture {
            let mut mean = attn_sum.expect("attention capture requested with zero heads");
            let h = self.heads as f64;
            for v in mean.data_mut() {
                *v /= h;
            }
            cap.maps.push((label.to_string(), mean));
        }
        let merged = tape.concat_cols(&outs);
        self.wo.forward(tape, store, merged)
    }
}

/// Transformer feed-forward block (no residual, callers add it).
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(store, rng, &format!("{prefix}.lin1"), dim, hidden),
            lin2: Linear::new(store, rng, &format!("{prefix}.lin2"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.lin1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.lin2.forward(tape, store, h)
    }
}

/// Fixed 2D sine/cosine position table for an R x C token grid, one row per
/// token in row-major order. First half of the channels encodes the y
/// coordinate, second half the x coordinate.
pub fn sine_positions_2d(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let token = r * cols + c;
            let y = (r as f64 + 0.5) / rows as f64 * std::f64::consts::TAU;
            let x = (c as f64 + 0.5) / cols as f64 * std::f64::consts::TAU;
            let row = &mut data[token * dim..(token + 1) * dim];
            fill_sinusoid(&mut row[..half], y);
            fill_sinusoid(&mut row[half..], x);
        }
    }
    Tensor::new(vec![rows * cols, dim], data)
}

fn fill_sinusoid(slot: &mut [f64], coord: f64) {
    let n = slot.len();
    let pairs = n / 2;
    for k in 0..pairs {
        let freq = 10000f64.powf(-(k as f64) / pairs.max(1) as f64);
        slot[2 * k] = (coord * freq).sin();
        slot[2 * k + 1] = (coord * freq).cos();
    }
    if n % 2 == 1 {
        let freq = 10000f64.powf(-(pairs as f64) / pairs.max(1) as f64);
        slot[n - 1] = (coord * freq).sin();
    }
}

/// Decoupled-weight-decay Adam. State vectors are indexed by parameter id.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, grad) in grads {
            if store.kind(*pid) != ParamKind::Trainable {
                continue;
            }
            let m = self.m[*pid].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v[*pid].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let value = store.value_mut(*pid);
            let (b1, b2) = (self.beta1, self.beta2);
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let x = value.data()[i];
                value.data_mut()[i] =
                    x - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adamw_zero_lr_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let before = store.value(lin.w).clone();
        let mut opt = AdamW::new(&store, 0.0, 0.0);
        let g = Tensor::full(&[3, 2], 0.7);
        opt.step(&mut store, &[(lin.w, g)]);
        assert_eq!(store.value(lin.w), &before);
    }

    #[test]
    fn sine_positions_are_bounded_and_distinct() {
        let p = sine_positions_2d(7, 7, 32);
        assert_eq!(p.shape(), &[49, 32]);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(p.row(0), p.row(1));
        assert_ne!(p.row(0), p.row(7));
    }

    #[test]
    fn mha_shapes_and_row_stochastic_capture() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "attn", 16, 4);
        let mut tape = Tape::new(&store);
        let q = tape.leaf(normal_tensor(&mut rng, &[5, 16], 1.0));
        let m = tape.leaf(normal_tensor(&mut rng, &[9, 16], 1.0));
        let mut cap = AttnCapture::default();
        let out = mha.forward(&mut tape, &store, q, m, Some(("site", &mut cap)));
        assert_eq!(tape.value(out).shape(), &[5, 16]);
        let map = &cap.maps[0].1;
        assert_eq!(map.shape(), &[5, 9]);
        for i in 0..5 {
            let s: f64 = map.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }
}
