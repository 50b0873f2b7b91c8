//! Pluggable visual and text encoders.
//!
//! Pretrained backbones are out of scope at desk scale, so everything the
//! pipeline borrows from them sits behind small interfaces with
//! deterministic stub implementations: a patch-projection backbone, a
//! ViT-like spatial token encoder, and two text embedders. An external
//! adapter can inject precomputed embeddings from disk (e.g. produced by a
//! real vision-language model) without adding a runtime dependency.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoxN;
use crate::label_space::LabelSpace;
use crate::tensor::{matmul, Tensor};

/// Spatial feature map [C, H, W] with its pixel stride.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Token embeddings, one row per token.
pub type TokenMatrix = Tensor;

// ---------------------------------------------------------------------------
// deterministic pseudo-random streams (documented recipe, frozen forever)
// ---------------------------------------------------------------------------

/// Uniform [0,1) doubles derived from SHA-256 in counter mode:
/// block_i = SHA256(key_material || i as u64 LE), consumed as little-endian
/// u64 words, each mapped to (w >> 11) * 2^-53.
struct HashStream {
    key: Vec<u8>,
    block: u64,
    buf: Vec<u64>,
}

impl HashStream {
    fn new(key_material: &[u8]) -> Self {
        Self {
            key: key_material.to_vec(),
            block: 0,
            buf: Vec::new(),
        }
    }

    fn next_u64(&mut self) -> u64 {
        if self.buf.is_empty() {
            let mut hasher = Sha256::new();
            hasher.update(&self.key);
            hasher.update(self.block.to_le_bytes());
            let digest = hasher.finalize();
            self.block += 1;
            self.buf = digest
                .chunks_exact(8)
                .rev()
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        self.buf.pop().unwrap()
    }

    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    fn normal(&mut self) -> f64 {
        let mut u1 = self.uniform();
        if u1 == 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

fn seeded_key(seed: u64, label: &str, payload: &str) -> Vec<u8> {
    let mut key = Vec::with_capacity(8 + label.len() + payload.len());
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(label.as_bytes());
    key.extend_from_slice(payload.as_bytes());
    key
}

fn l2_normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

// ---------------------------------------------------------------------------
// backbone stub
// ---------------------------------------------------------------------------

/// Stand-in for a detection backbone: per-cell linear projection of raw
/// stride x stride patches. No bias, so a zero image maps to a zero grid.
pub struct StubBackbone {
    pub channels: usize,
    pub stride: usize,
    proj: Tensor,
}

impl StubBackbone {
    pub fn new(channels: usize, stride: usize, seed: u64) -> Self {
        let fan_in = 3 * stride * stride;
        let mut stream = HashStream::new(&seeded_key(seed, "backbone", ""));
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = stream
            .normals(channels * fan_in)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Self {
            channels,
            stride,
            proj: Tensor::new(vec![channels, fan_in], data),
        }
    }

    /// Extract a stride-8-style grid from a [3, H, W] image in [0, 1].
    /// Images smaller than 16x16 are rejected; non-multiple sizes are
    /// zero-padded on the bottom/right.
    pub fn extract(&self, image: &Tensor) -> Result<FeatureGrid> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::validation(format!("expected [3,H,W] image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h < 16 || w < 16 {
            return Err(Error::validation(format!("image {h}x{w} under minimum 16x16")));
        }
        let gh = h.div_ceil(self.stride);
        let gw = w.div_ceil(self.stride);
        let fan_in = 3 * self.stride * self.stride;
        let mut cells = Tensor::zeros(&[gh * gw, fan_in]);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = cells.row_mut(gy * gw + gx);
                let mut k = 0;
                for c in 0..3 {
                    for py in 0..self.stride {
                        for px in 0..self.stride {
                            let (y, x) = (gy * self.stride + py, gx * self.stride + px);
                            row[k] = if y < h && x < w {
                                image.data()[c * h * w + y * w + x]
                            } else {
                                0.0
                            };
                            k += 1;
                        }
                    }
                }
            }
        }
        // [cells, fan_in] @ proj^T -> [cells, channels], then to [C, gh, gw]
        let projected = matmul(&cells, &self.proj.transposed());
        let mut grid = vec![0.0; self.channels * gh * gw];
        for cell in 0..gh * gw {
            for ch in 0..self.channels {
                grid[ch * gh * gw + cell] = projected.at2(cell, ch);
            }
        }
        Ok(FeatureGrid {
            values: Tensor::new(vec![self.channels, gh, gw], grid),
            stride: self.stride,
        })
    }
}

// ---------------------------------------------------------------------------
// ROI align
// ---------------------------------------------------------------------------

/// Bilinear sample of `grid.values` at one point per output cell (cell
/// centers), border-clamped. `samples` > 1 averages an s x s sub-grid.
pub fn roi_align(grid: &FeatureGrid, roi: BoxN, out_size: usize) -> Result<Tensor> {
    roi_align_sampled(grid, roi, out_size, 1)
}

pub fn roi_align_sampled(
    grid: &FeatureGrid,
    roi: BoxN,
    out_size: usize,
    samples: usize,
) -> Result<Tensor> {
    let c = grid.channels();
    let (gh, gw) = (grid.height(), grid.width());
    let cr = roi.to_corners();
    if !(cr.x2 > cr.x1 && cr.y2 > cr.y1) {
        return Err(Error::validation(format!("degenerate ROI {roi:?}")));
    }
    if cr.x1 < -1e-9 || cr.y1 < -1e-9 || cr.x2 > 1.0 + 1e-9 || cr.y2 > 1.0 + 1e-9 {
        return Err(Error::validation(format!("ROI outside image: {roi:?}")));
    }
    let mut out = vec![0.0; c * out_size * out_size];
    let inv = 1.0 / (samples * samples) as f64;
    for i in 0..out_size {
        for j in 0..out_size {
            for si in 0..samples {
                for sj in 0..samples {
                    let fy = (i as f64 + (si as f64 + 0.5) / samples as f64) / out_size as f64;
                    let fx = (j as f64 + (sj as f64 + 0.5) / samples as f64) / out_size as f64;
                    let y = cr.y1 + fy * (cr.y2 - cr.y1);
                    let x = cr.x1 + fx * (cr.x2 - cr.x1);
                    // continuous grid coordinates under the cell-center convention
                    let gy = (y * gh as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
                    let gx = (x * gw as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
                    let y0 = gy.floor() as usize;
                    let x0 = gx.floor() as usize;
                    let y1 = (y0 + 1).min(gh - 1);
                    let x1 = (x0 + 1).min(gw - 1);
                    let (dy, dx) = (gy - y0 as f64, gx - x0 as f64);
                    for ch in 0..c {
                        let at = |yy: usize, xx: usize| grid.values.data()[ch * gh * gw + yy * gw + xx];
                        let v = at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                            + at(y0, x1) * (1.0 - dy) * dx
                            + at(y1, x0) * dy * (1.0 - dx)
                            + at(y1, x1) * dy * dx;
                        out[ch * out_size * out_size + i * out_size + j] += v * inv;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, out_size, out_size], out))
}

// ---------------------------------------------------------------------------
// spatial token encoder stub (ViT-B/32-like patch grid)
// ---------------------------------------------------------------------------

/// Patch grid geometry produced by the spatial encoder, including padding
/// applied to reach a patch multiple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub rows: usize,
    pub cols: usize,
    pub pad_y: usize,
    pub pad_x: usize,
}

/// Stand-in for a pretrained vision-language visual encoder: averages each
/// patch per channel and applies a seeded random projection to the token
/// dimension.
pub struct SpatialTokenStub {
    pub dim: usize,
    pub patch: usize,
    proj: Tensor,
}

impl SpatialTokenStub {
    pub fn new(dim: usize, patch: usize, seed: u64) -> Self {
        let mut stream = HashStream::new(&seeded_key(seed, "spatial", ""));
        let scale = 1.0 / 3f64.sqrt();
        let data = stream
            .normals(dim * 3)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Self {
            dim,
            patch,
            proj: Tensor::new(vec![dim, 3], data),
        }
    }

    /// Tokens for a [3, H, W] image: one row per patch, row-major over the
    /// padded patch grid.
    pub fn extract(&self, image: &Tensor) -> Result<(TokenMatrix, PatchLayout)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::validation(format!("expected [3,H,W] image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let rows = h.div_ceil(self.patch);
        let cols = w.div_ceil(self.patch);
        let layout = PatchLayout {
            rows,
            cols,
            pad_y: rows * self.patch - h,
            pad_x: cols * self.patch - w,
        };
        let mut pooled = Tensor::zeros(&[rows * cols, 3]);
        let denom = (self.patch * self.patch) as f64;
        for r in 0..rows {
            for cc in 0..cols {
                let row = pooled.row_mut(r * cols + cc);
                for c in 0..3 {
                    let mut acc = 0.0;
                    for py in 0..self.patch {
                        for px in 0..self.patch {
                            let (y, x) = (r * self.patch + py, cc * self.patch + px);
                            if y < h && x < w {
                                acc += image.data()[c * h * w + y * w + x];
                            }
                        }
                    }
                    row[c] = acc / denom;
                }
            }
        }
        Ok((matmul(&pooled, &self.proj.transposed()), layout))
    }
}

// ---------------------------------------------------------------------------
// text embedders
// ---------------------------------------------------------------------------

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    /// Unit-norm embedding of a prompt.
    fn embed(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Seeded hash-based embedder: `normals` from
/// SHA256(seed LE || "text" || prompt) in counter mode, L2-normalized.
/// Useful as an arbitrary-but-fixed embedding space.
pub struct HashTextStub {
    pub dim: usize,
    pub seed: u64,
}

impl HashTextStub {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for HashTextStub {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::validation("empty prompt"));
        }
        let mut stream = HashStream::new(&seeded_key(self.seed, "text", prompt));
        let mut v = stream.normals(self.dim);
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Embedder whose space has explicit compositional structure:
/// `[verb one-hot | object one-hot | noise]`, where the noise block is the
/// sum of a per-verb and a per-object seeded vector. An unseen
/// (verb, object) prompt is therefore an exact linear composition of parts
/// that both appear in seen prompts.
pub struct CompositionalTextStub {
    verbs: Vec<String>,
    objects: Vec<String>,
    pub dim: usize,
    pub seed: u64,
    pub noise_scale: f64,
}

impl CompositionalTextStub {
    pub fn new(space: &LabelSpace, dim: usize, seed: u64, noise_scale: f64) -> Result<Self> {
        let a = space.n_verbs();
        let c = space.n_objects();
        if dim < a + c {
            return Err(Error::validation(format!(
                "embed dim {dim} below verb+object block size {}",
                a + c
            )));
        }
        Ok(Self {
            verbs: space.verbs().iter().map(|v| v.replace('_', " ")).collect(),
            objects: space.objects().iter().map(|o| o.replace('_', " ")).collect(),
            dim,
            seed,
            noise_scale,
        })
    }

    fn find_verb(&self, prompt: &str) -> Option<usize> {
        // longest display text first so "stand under" beats "stand"
        let mut order: Vec<usize> = (0..self.verbs.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.verbs[i].len()));
        order
            .into_iter()
            .find(|&i| prompt.contains(&format!("person {} ", self.verbs[i])))
    }

    fn find_object(&self, prompt: &str) -> Option<usize> {
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.objects[i].len()));
        order
            .into_iter()
            .find(|&i| prompt.ends_with(self.objects[i].as_str()))
    }

    fn part_noise(&self, label: &str, id: usize, n: usize) -> Vec<f64> {
        let mut stream = HashStream::new(&seeded_key(self.seed, label, &id.to_string()));
        stream
            .normals(n)
            .into_iter()
            .map(|x| x * self.noise_scale)
            .collect()
    }
}

impl TextEmbedder for CompositionalTextStub {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::validation("empty prompt"));
        }
        let verb = self.find_verb(prompt);
        let object = self.find_object(prompt);
        if verb.is_none() && object.is_none() {
            return Err(Error::validation(format!(
                "prompt names no known verb or object: {prompt:?}"
            )));
        }
        let (a, c) = (self.verbs.len(), self.objects.len());
        let noise_dim = self.dim - a - c;
        let mut v = vec![0.0; self.dim];
        if let Some(vi) = verb {
            v[vi] = 1.0;
            if noise_dim > 0 {
                for (slot, x) in v[a + c..].iter_mut().zip(self.part_noise("verb-noise", vi, noise_dim)) {
                    *slot += x;
                }
            }
        }
        if let Some(oi) = object {
            v[a + oi] = 1.0;
            if noise_dim > 0 {
                for (slot, x) in v[a + c..].iter_mut().zip(self.part_noise("object-noise", oi, noise_dim)) {
                    *slot += x;
                }
            }
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Adapter over a directory of precomputed embeddings. Each key (prompt or
/// image id) is stored as `<sha256hex(key)>.json` holding a plain JSON
/// array; optional `meta.json` records `{embed_dim, source_layer}` so a
/// real encoder's provenance travels with the data.
pub struct DirEmbeddings {
    dir: PathBuf,
    pub dim: usize,
    pub source_layer: Option<String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct DirEmbeddingsMeta {
    pub embed_dim: usize,
    #[serde(default)]
    pub source_layer: Option<String>,
}

impl DirEmbeddings {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DirEmbeddingsMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            dim: meta.embed_dim,
            source_layer: meta.source_layer,
        })
    }

    pub fn key_file(key: &str) -> String {
        let digest = Sha256::digest(key.as_bytes());
        format!("{:x}.json", digest)
    }

    /// Write one embedding (test/tooling helper for producing fixtures).
    pub fn write(dir: &Path, key: &str, values: &[f64]) -> Result<()> {
        std::fs::write(dir.join(Self::key_file(key)), serde_json::to_vec(values)?)?;
        Ok(())
    }

    pub fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        let path = self.dir.join(Self::key_file(key));
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Error::runtime(format!("no embedding for key {key:?} (expected {})", path.display()))
        })?;
        let mut v: Vec<f64> = serde_json::from_str(&text)?;
        if v.len() != self.dim {
            return Err(Error::validation(format!(
                "embedding for {key:?} has dim {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

impl TextEmbedder for DirEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        self.lookup(prompt)
    }
}
