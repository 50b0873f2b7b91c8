//! Pair encoder: two residual local convolution blocks followed by a global
//! context former built on linear-cost additive attention.
//!
//! The local block computes `x + Conv1(GeLU(Conv1(DWConv3(BN(x)))))` on a
//! [B,C,H,W] grid. The former runs a small conv front end, flattens the grid
//! to tokens, applies additive attention with a residual from the block
//! input, and finishes with a pre-norm linear block. Convolutions carry
//! kernels only; shifts come from the batch norms.

use rand_chacha::ChaCha8Rng;

use crate::frontend::{roi_align_sampled, FeatureGrid};
use crate::geometry::BoxN;
use crate::nn::{xavier_uniform, AttnCapture, LayerNorm, Linear, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{matmul, matmul_tb, Tensor};

/// Collected batch-norm statistics from a training-mode forward; the
/// training loop folds them into the running buffers.
pub struct BnUpdate {
    pub mean_pid: usize,
    pub var_pid: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    Train(&'a mut Vec<BnUpdate>),
    Eval,
}

pub struct LocalEncoderBlock {
    bn_gamma: usize,
    bn_beta: usize,
    bn_mean: usize,
    bn_var: usize,
    dw: usize,
    conv_a: usize,
    conv_b: usize,
}

impl LocalEncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, channels: usize) -> Self {
        let bn_gamma = store.add(&format!("{prefix}.bn.gamma"), Tensor::full(&[channels], 1.0));
        let bn_beta = store.add(&format!("{prefix}.bn.beta"), Tensor::zeros(&[channels]));
        let bn_mean = store.add_buffer(&format!("{prefix}.bn.running_mean"), Tensor::zeros(&[channels]));
        let bn_var = store.add_buffer(&format!("{prefix}.bn.running_var"), Tensor::full(&[channels], 1.0));
        let dw_scale = 1.0 / 3.0;
        let dw = store.add(
            &format!("{prefix}.dw"),
            xavier_uniform(rng, channels, 9).map(|x| x * dw_scale).reshaped(&[channels, 3, 3]),
        );
        let conv_a = store.add(&format!("{prefix}.conv_a"), xavier_uniform(rng, channels, channels));
        let conv_b = store.add(&format!("{prefix}.conv_b"), xavier_uniform(rng, channels, channels));
        Self {
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            dw,
            conv_a,
            conv_b,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: &mut BnMode,
    ) -> NodeId {
        let gamma = tape.param(store, self.bn_gamma);
        let beta = tape.param(store, self.bn_beta);
        let (y, mean, var) = match mode {
            BnMode::Train(_) => tape.batch_norm(x, gamma, beta, None, 1e-5),
            BnMode::Eval => {
                let rm = store.value(self.bn_mean).data().to_vec();
                let rv = store.value(self.bn_var).data().to_vec();
                tape.batch_norm(x, gamma, beta, Some((&rm, &rv)), 1e-5)
            }
        };
        if let BnMode::Train(updates) = mode {
            updates.push(BnUpdate {
                mean_pid: self.bn_mean,
                var_pid: self.bn_var,
                mean,
                var,
            });
        }
        let dw = tape.param(store, self.dw);
        let y = tape.conv_dw3(y, dw);
        let wa = tape.param(store, self.conv_a);
        let y = tape.conv1x1(y, wa);
        let y = tape.gelu(y);
        let wb = tape.param(store, self.conv_b);
        let y = tape.conv1x1(y, wb);
        tape.add(x, y)
    }
}

/// Linear-cost token mixer: a global query pooled from learned per-token
/// scores modulates the per-token keys. Residual included.
pub struct AdditiveAttention {
    pub wq: usize,
    pub wk: usize,
    pub wa: usize,
    pub wout: usize,
    pub dim: usize,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) -> Self {
        Self {
            wq: store.add(&format!("{prefix}.wq"), xavier_uniform(rng, dim, dim)),
            wk: store.add(&format!("{prefix}.wk"), xavier_uniform(rng, dim, dim)),
            wa: store.add(&format!("{prefix}.wa"), xavier_uniform(rng, dim, 1)),
            wout: store.add(&format!("{prefix}.wout"), xavier_uniform(rng, dim, dim)),
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: NodeId,
        capture: Option<(&str, &mut AttnCapture)>,
    ) -> NodeId {
        let l = tape.value(tokens).rows();
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wa = tape.param(store, self.wa);
        let wout = tape.param(store, self.wout);
        let q = tape.matmul(tokens, wq);
        let k = tape.matmul(tokens, wk);
        let scores = tape.matmul(q, wa);
        let scores = tape.mul_scalar(scores, 1.0 / (self.dim as f64).sqrt());
        let scores_row = tape.reshape(scores, &[1, l]);
        let alpha = tape.softmax_rows(scores_row);
        if let Some((label, cap)) = capture {
            cap.maps.push((label.to_string(), tape.value(alpha).clone()));
        }
        let global_q = tape.weighted_pool_rows(alpha, q);
        let modulated = tape.row_broadcast_mul(k, global_q);
        let out = tape.matmul(modulated, wout);
        tape.add(out, tokens)
    }

    /// Instrumented pure forward: same arithmetic on plain tensors, counting
    /// multiply-accumulate operations. Used to assert linear cost in L.
    pub fn forward_counted(&self, store: &ParamStore, tokens: &Tensor) -> (Tensor, u64) {
        let l = tokens.rows();
        let d = self.dim;
        let mut flops = 0u64;
        let mm = |a: &Tensor, b: &Tensor, flops: &mut u64| {
            *flops += (a.rows() * a.cols() * b.cols()) as u64;
            matmul(a, b)
        };
        let q = mm(tokens, store.value(self.wq), &mut flops);
        let k = mm(tokens, store.value(self.wk), &mut flops);
        let scores = mm(&q, store.value(self.wa), &mut flops);
        let scale = 1.0 / (d as f64).sqrt();
        let mut alpha: Vec<f64> = scores.data().iter().map(|&s| s * scale).collect();
        flops += l as u64;
        let m = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for a in alpha.iter_mut() {
            *a = (*a - m).exp();
            z += *a;
        }
        for a in alpha.iter_mut() {
            *a /= z;
        }
        flops += 3 * l as u64;
        let alpha_t = Tensor::new(vec![1, l], alpha);
        let global_q = mm(&alpha_t, &q, &mut flops);
        let mut modulated = Tensor::zeros(&[l, d]);
        for i in 0..l {
            for j in 0..d {
                modulated.set2(i, j, k.at2(i, j) * global_q.at2(0, j));
            }
        }
        flops += (l * d) as u64;
        let mut out = mm(&modulated, store.value(self.wout), &mut flops);
        for i in 0..l {
            for j in 0..d {
                let v = out.at2(i, j) + tokens.at2(i, j);
                out.set2(i, j, v);
            }
        }
        flops += (l * d) as u64;
        (out, flops)
    }
}

/// Conv front end + additive attention + pre-norm linear block; consumes a
/// single image's [1,C,H,W] grid node and yields [H*W, C] tokens.
pub struct GlobalContextFormer {
    front_dw: usize,
    front_conv: usize,
    pub attn: AdditiveAttention,
    ln: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    pub channels: usize,
}

impl GlobalContextFormer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, channels: usize) -> Self {
        let front_dw = store.add(
            &format!("{prefix}.front.dw"),
            xavier_uniform(rng, channels, 9).map(|x| x / 3.0).reshaped(&[channels, 3, 3]),
        );
        let front_conv = store.add(
            &format!("{prefix}.front.conv"),
            xavier_uniform(rng, channels, channels),
        );
        Self {
            front_dw,
            front_conv,
            attn: AdditiveAttention::new(store, rng, &format!("{prefix}.attn"), channels),
            ln: LayerNorm::new(store, &format!("{prefix}.linear.ln"), channels),
            lin1: Linear::new(store, rng, &format!("{prefix}.linear.lin1"), channels, channels),
            lin2: Linear::new(store, rng, &format!("{prefix}.linear.lin2"), channels, channels),
            channels,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        grid: NodeId,
        capture: Option<(&str, &mut AttnCapture)>,
    ) -> NodeId {
        let s = tape.value(grid).shape().to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], 1, "former runs per image");
        let (c, h, w) = (s[1], s[2], s[3]);
        let dw = tape.param(store, self.front_dw);
        let front = tape.conv_dw3(grid, dw);
        let fc = tape.param(store, self.front_conv);
        let front = tape.conv1x1(front, fc);
        let tokens = grid_to_tokens(tape, front, c, h * w);
        let attn_out = self.attn.forward(tape, store, tokens, capture);
        let input_tokens = grid_to_tokens(tape, grid, c, h * w);
        let y = tape.add(attn_out, input_tokens);
        let n = self.ln.forward(tape, store, y);
        let n = self.lin1.forward(tape, store, n);
        let n = tape.gelu(n);
        let n = self.lin2.forward(tape, store, n);
        tape.add(y, n)
    }
}

/// [1,C,H,W] grid node -> [H*W, C] token node.
pub fn grid_to_tokens(tape: &mut Tape, grid: NodeId, channels: usize, tokens: usize) -> NodeId {
    let flat = tape.reshape(grid, &[channels, tokens]);
    tape.transpose(flat)
}

/// The full pair encoder: ROI pooling to a 7x7 grid, two local blocks on the
/// stacked batch, then the per-image global context former.
pub struct HoPairEncoder {
    pub block1: LocalEncoderBlock,
    pub block2: LocalEncoderBlock,
    pub former: GlobalContextFormer,
    pub channels: usize,
    pub grid_size: usize,
    pub roi_samples: usize,
}

impl HoPairEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        grid_size: usize,
    ) -> Self {
        Self {
            block1: LocalEncoderBlock::new(store, rng, &format!("{prefix}.local1"), channels),
            block2: LocalEncoderBlock::new(store, rng, &format!("{prefix}.local2"), channels),
            former: GlobalContextFormer::new(store, rng, &format!("{prefix}.former"), channels),
            channels,
            grid_size,
            roi_samples: 1,
        }
    }

    /// Pool each backbone grid over the whole image (or the given per-image
    /// ROI) and stack into one [B,C,g,g] tensor.
    pub fn pool_batch(&self, grids: &[&FeatureGrid], rois: Option<&[BoxN]>) -> crate::error::Result<Tensor> {
        assert!(!grids.is_empty());
        let g = self.grid_size;
        let c = self.channels;
        let mut data = Vec::with_capacity(grids.len() * c * g * g);
        for (i, grid) in grids.iter().enumerate() {
            let roi = match rois {
                Some(r) => r[i],
                None => BoxN::new(0.5, 0.5, 1.0, 1.0),
            };
            let pooled = roi_align_sampled(grid, roi, g, self.roi_samples)?;
            data.extend_from_slice(pooled.data());
        }
        Ok(Tensor::new(vec![grids.len(), c, g, g], data))
    }

    /// Run the trainable encoder stack on an already-stacked [B,C,g,g] node.
    /// Returns one [g*g, C] token node per image.
    pub fn forward_stacked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stacked: NodeId,
        mode: &mut BnMode,
        mut capture: Option<&mut AttnCapture>,
    ) -> Vec<NodeId> {
        let s = tape.value(stacked).shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = self.block1.forward(tape, store, stacked, mode);
        let x = self.block2.forward(tape, store, x, mode);
        let flat = tape.reshape(x, &[b, c * h * w]);
        (0..b)
            .map(|i| {
                let row = tape.slice_rows(flat, i, i + 1);
                let grid = tape.reshape(row, &[1, c, h, w]);
                let cap = capture.as_deref_mut().map(|ac| ("pair_encoder.alpha", ac));
                self.former.forward(tape, store, grid, cap)
            })
            .collect()
    }

    /// Whole pipeline stage: backbone grids in, per-image (or per-ROI)
    /// global token matrices out.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        grids: &[&FeatureGrid],
        rois: Option<&[BoxN]>,
        mode: &mut BnMode,
        capture: Option<&mut AttnCapture>,
    ) -> crate::error::Result<Vec<NodeId>> {
        let stacked = self.pool_batch(grids, rois)?;
        let node = tape.constant(stacked);
        Ok(self.forward_stacked(tape, store, node, mode, capture))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheckConfig};
    use crate::nn::normal_tensor;
    use rand::SeedableRng;

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
    }

    fn setup(channels: usize) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(77 + channels as u64))
    }

    #[test]
    fn local_block_zero_branch_is_identity() {
        let (mut store, mut rng) = setup(6);
        let block = LocalEncoderBlock::new(&mut store, &mut rng, "b", 6);
        for pid in [block.dw, block.conv_a, block.conv_b] {
            let shape = store.value(pid).shape().to_vec();
            *store.value_mut(pid) = Tensor::zeros(&shape);
        }
        let x = normal_tensor(&mut rng, &[2, 6, 7, 7], 1.0);
        let mut tape = Tape::new(&store);
        let xn = tape.leaf(x.clone());
        let mut updates = Vec::new();
        let mut mode = BnMode::Train(&mut updates);
        let y = block.forward(&mut tape, &store, xn, &mut mode);
        assert_eq!(tape.value(y), &x);
        assert_eq!(tape.value(y).shape(), &[2, 6, 7, 7]);
    }

    #[test]
    fn local_block_matches_explicit_loop_oracle() {
        let (mut store, mut rng) = setup(4);
        let block = LocalEncoderBlock::new(&mut store, &mut rng, "b", 4);
        // nontrivial running stats, eval mode so the oracle is closed-form
        *store.value_mut(block.bn_mean) = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]);
        *store.value_mut(block.bn_var) = Tensor::new(vec![4], vec![1.1, 0.9, 1.3, 0.7]);
        *store.value_mut(block.bn_gamma) = Tensor::new(vec![4], vec![1.2, 0.8, 1.0, 0.9]);
        *store.value_mut(block.bn_beta) = Tensor::new(vec![4], vec![0.05, -0.05, 0.0, 0.1]);
        let x = normal_tensor(&mut rng, &[1, 4, 5, 5], 1.0);
        let mut tape = Tape::new(&store);
        let xn = tape.leaf(x.clone());
        let mut mode = BnMode::Eval;
        let y = block.forward(&mut tape, &store, xn, &mut mode);
        let got = tape.value(y).clone();

        // independent oracle: explicit loops over the same parameters
        let (c, h, w) = (4usize, 5usize, 5usize);
        let gm = store.value(block.bn_gamma).data();
        let bt = store.value(block.bn_beta).data();
        let rm = store.value(block.bn_mean).data();
        let rv = store.value(block.bn_var).data();
        let mut bn = vec![0.0; c * h * w];
        for ci in 0..c {
            for k in 0..h * w {
                bn[ci * h * w + k] =
                    (x.data()[ci * h * w + k] - rm[ci]) / (rv[ci] + 1e-5).sqrt() * gm[ci] + bt[ci];
            }
        }
        let kd = store.value(block.dw).data();
        let mut dwv = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for u in -1..=1isize {
                        for v in -1..=1isize {
                            let (ii, jj) = (i + u, j + v);
                            if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                                acc += bn[ci * h * w + ii as usize * w + jj as usize]
                                    * kd[ci * 9 + (u + 1) as usize * 3 + (v + 1) as usize];
                            }
                        }
                    }
                    dwv[ci * h * w + i as usize * w + j as usize] = acc;
                }
            }
        }
        let wa = store.value(block.conv_a).data();
        let wb = store.value(block.conv_b).data();
        let mut out = vec![0.0; c * h * w];
        for k in 0..h * w {
            let mut mid = vec![0.0; c];
            for o in 0..c {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += wa[o * c + ci] * dwv[ci * h * w + k];
                }
                mid[o] = gelu_ref(acc);
            }
            for o in 0..c {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += wb[o * c + ci] * mid[ci];
                }
                out[o * h * w + k] = x.data()[o * h * w + k] + acc;
            }
        }
        for (a, b) in got.data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn additive_attention_singleton_and_zero_init() {
        let (mut store, mut rng) = setup(8);
        let attn = AdditiveAttention::new(&mut store, &mut rng, "a", 8);
        // L = 1: alpha is exactly [1], global query equals the single Q row
        let t1 = normal_tensor(&mut rng, &[1, 8], 1.0);
        let mut tape = Tape::new(&store);
        let tn = tape.leaf(t1.clone());
        let mut cap = AttnCapture::default();
        let _ = attn.forward(&mut tape, &store, tn, Some(("alpha", &mut cap)));
        assert_eq!(cap.maps[0].1.data(), &[1.0]);

        // zero projections: output equals input
        for pid in [attn.wq, attn.wk, attn.wa, attn.wout] {
            let shape = store.value(pid).shape().to_vec();
            *store.value_mut(pid) = Tensor::zeros(&shape);
        }
        let t = normal_tensor(&mut rng, &[5, 8], 1.0);
        let mut tape = Tape::new(&store);
        let tn = tape.leaf(t.clone());
        let y = attn.forward(&mut tape, &store, tn, None);
        assert_eq!(tape.value(y), &t);
    }

    #[test]
    fn additive_attention_permutation_equivariance_is_exact() {
        let (mut store, mut rng) = setup(8);
        let attn = AdditiveAttention::new(&mut store, &mut rng, "a", 8);
        let t = normal_tensor(&mut rng, &[6, 8], 1.0);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut tp = Tensor::zeros(&[6, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            tp.row_mut(dst).copy_from_slice(t.row(src));
        }
        let mut tape = Tape::new(&store);
        let a = tape.leaf(t);
        let ya = attn.forward(&mut tape, &store, a, None);
        let b = tape.leaf(tp);
        let yb = attn.forward(&mut tape, &store, b, None);
        let (va, vb) = (tape.value(ya).clone(), tape.value(yb).clone());
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(va.row(src), vb.row(dst), "row {src} not equivariant");
        }
    }

    #[test]
    fn additive_attention_alpha_row_stochastic_and_counted_forward_agrees() {
        let (mut store, mut rng) = setup(8);
        let attn = AdditiveAttention::new(&mut store, &mut rng, "a", 8);
        let t = normal_tensor(&mut rng, &[13, 8], 1.0);
        let mut tape = Tape::new(&store);
        let tn = tape.leaf(t.clone());
        let mut cap = AttnCapture::default();
        let y = attn.forward(&mut tape, &store, tn, Some(("alpha", &mut cap)));
        let alpha = &cap.maps[0].1;
        assert!(alpha.data().iter().all(|&a| a >= 0.0));
        assert!((alpha.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let (counted, _) = attn.forward_counted(&store, &t);
        for (a, b) in tape.value(y).data().iter().zip(counted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_attention_cost_scales_linearly() {
        let (mut store, mut rng) = setup(16);
        let attn = AdditiveAttention::new(&mut store, &mut rng, "a", 16);
        let flops_at = |l: usize, rng: &mut ChaCha8Rng| {
            let t = normal_tensor(rng, &[l, 16], 1.0);
            attn.forward_counted(&store, &t).1
        };
        let f49 = flops_at(49, &mut rng);
        let f98 = flops_at(98, &mut rng);
        let f196 = flops_at(196, &mut rng);
        let r1 = f98 as f64 / f49 as f64;
        let r2 = f196 as f64 / f98 as f64;
        assert!((1.9..=2.1).contains(&r1), "f(2L)/f(L) = {r1}");
        assert!((1.9..=2.1).contains(&r2), "f(4L)/f(2L) = {r2}");
    }

    #[test]
    fn former_zero_attention_identity_linear_passes_input_through() {
        let (mut store, mut rng) = setup(6);
        let former = GlobalContextFormer::new(&mut store, &mut rng, "f", 6);
        for pid in [
            former.front_dw,
            former.front_conv,
            former.attn.wq,
            former.attn.wk,
            former.attn.wa,
            former.attn.wout,
            former.lin1.w,
            former.lin1.b,
            former.lin2.w,
            former.lin2.b,
        ] {
            let shape = store.value(pid).shape().to_vec();
            *store.value_mut(pid) = Tensor::zeros(&shape);
        }
        let x = normal_tensor(&mut rng, &[1, 6, 7, 7], 1.0);
        let mut tape = Tape::new(&store);
        let xn = tape.leaf(x.clone());
        let y = former.forward(&mut tape, &store, xn, None);
        assert_eq!(tape.value(y).shape(), &[49, 6]);
        // V_G row t equals the t-th grid cell across channels
        for t in 0..49 {
            for c in 0..6 {
                assert_eq!(tape.value(y).at2(t, c), x.data()[c * 49 + t]);
            }
        }
    }

    #[test]
    fn former_gradient_matches_finite_differences() {
        let (mut store, mut rng) = setup(4);
        let former = GlobalContextFormer::new(&mut store, &mut rng, "f", 4);
        let x = normal_tensor(&mut rng, &[1, 4, 5, 5], 1.0);
        let cfg = GradCheckConfig {
            max_coords: 30,
            ..Default::default()
        };
        // gradient of mean(V_G) with respect to the input grid
        let report = check_inputs(&cfg, &[x], |tape, ids| {
            let y = former.forward(tape, &store, ids[0], None);
            tape.mean_all(y)
        });
        report.assert_ok("former input gradient");
    }

    #[test]
    fn encode_whole_image_path_shapes_and_determinism() {
        let (mut store, mut rng) = setup(64);
        let enc = HoPairEncoder::new(&mut store, &mut rng, "enc", 64, 7);
        let grid = FeatureGrid {
            values: normal_tensor(&mut rng, &[64, 8, 8], 1.0),
            stride: 8,
        };
        let mut tape = Tape::new(&store);
        let mut mode = BnMode::Eval;
        let out = enc
            .encode(&mut tape, &store, &[&grid], None, &mut mode, None)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out[0]).shape(), &[49, 64]);

        let mut tape2 = Tape::new(&store);
        let mut mode2 = BnMode::Eval;
        let out2 = enc
            .encode(&mut tape2, &store, &[&grid], None, &mut mode2, None)
            .unwrap();
        assert_eq!(tape.value(out[0]), tape2.value(out2[0]));
    }

    #[test]
    fn encode_composes_exactly_from_stage_calls() {
        let (mut store, mut rng) = setup(5);
        let enc = HoPairEncoder::new(&mut store, &mut rng, "enc", 5, 7);
        let grid = FeatureGrid {
            values: normal_tensor(&mut rng, &[5, 9, 9], 1.0),
            stride: 8,
        };
        let roi = BoxN::new(0.5, 0.5, 0.9, 0.8);

        let mut tape = Tape::new(&store);
        let mut mode = BnMode::Eval;
        let end_to_end = enc
            .encode(&mut tape, &store, &[&grid], Some(&[roi]), &mut mode, None)
            .unwrap();

        // stage-composition oracle: roi_align, block1, block2, former, called
        // one at a time
        let pooled = roi_align_sampled(&grid, roi, 7, 1).unwrap().reshaped(&[1, 5, 7, 7]);
        let mut tape2 = Tape::new(&store);
        let pn = tape2.constant(pooled);
        let mut mode2 = BnMode::Eval;
        let s1 = enc.block1.forward(&mut tape2, &store, pn, &mut mode2);
        let s2 = enc.block2.forward(&mut tape2, &store, s1, &mut mode2);
        let composed = enc.former.forward(&mut tape2, &store, s2, None);

        for (a, b) in tape
            .value(end_to_end[0])
            .data()
            .iter()
            .zip(tape2.value(composed).data())
        {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn per_roi_path_yields_one_token_set_per_box() {
        let (mut store, mut rng) = setup(4);
        let enc = HoPairEncoder::new(&mut store, &mut rng, "enc", 4, 7);
        let g1 = FeatureGrid {
            values: normal_tensor(&mut rng, &[4, 8, 8], 1.0),
            stride: 8,
        };
        let g2 = FeatureGrid {
            values: normal_tensor(&mut rng, &[4, 8, 8], 1.0),
            stride: 8,
        };
        let rois = [BoxN::new(0.3, 0.3, 0.5, 0.5), BoxN::new(0.6, 0.6, 0.6, 0.6)];
        let mut tape = Tape::new(&store);
        let mut mode = BnMode::Eval;
        let out = enc
            .encode(&mut tape, &store, &[&g1, &g2], Some(&rois), &mut mode, None)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(tape.value(out[1]).shape(), &[49, 4]);
    }
}
