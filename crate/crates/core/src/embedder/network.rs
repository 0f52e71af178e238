//! Residual CNN: stem conv, identity blocks, projection blocks, global
//! average pooling, dense layer, L2 normalization.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conv::Conv2d;
use super::RffVector;
use crate::{Error, Result};

/// Norm floor applied before the final L2 normalization.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    /// `(rows, cols)` of the input feature map.
    pub input_shape: (usize, usize),
    pub stem_filters: usize,
    pub stage2_filters: usize,
    pub embedding_dim: usize,
    pub margin_alpha: f64,
    /// Divides channel counts and embedding size. 1.0 is the full network.
    pub width_scale: f64,
    pub stem_kernel: usize,
    pub stage1_blocks: usize,
    pub stage2_blocks: usize,
    /// Multiplies every input value before the stem, mapping the clipped dB
    /// range onto roughly [-1, 1].
    pub input_scale: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_shape: (256, 62),
            stem_filters: 32,
            stage2_filters: 64,
            embedding_dim: 512,
            margin_alpha: 0.1,
            width_scale: 1.0,
            stem_kernel: 7,
            stage1_blocks: 2,
            stage2_blocks: 2,
            input_scale: 1.0 / 40.0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("embedder: {m}")));
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return bad("input_shape must be nonzero");
        }
        if !(self.width_scale.is_finite() && self.width_scale >= 1.0) {
            return bad("width_scale must be >= 1");
        }
        if self.stem_filters == 0 || self.stage2_filters == 0 {
            return bad("filter counts must be positive");
        }
        if self.scaled_embedding_dim() < 8 {
            return bad("embedding_dim after scaling must be >= 8");
        }
        if !(self.margin_alpha.is_finite() && self.margin_alpha > 0.0) {
            return bad("margin_alpha must be > 0");
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem_kernel must be odd");
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad("input_scale must be > 0");
        }
        Ok(())
    }

    fn scale(&self, n: usize) -> usize {
        ((n as f64 / self.width_scale).round() as usize).max(1)
    }

    pub fn scaled_stem_filters(&self) -> usize {
        self.scale(self.stem_filters)
    }

    pub fn scaled_stage2_filters(&self) -> usize {
        self.scale(self.stage2_filters)
    }

    pub fn scaled_embedding_dim(&self) -> usize {
        self.scale(self.embedding_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1x1 strided projection on the skip path when the shape changes.
    pub proj: Option<Conv2d>,
}

/// All trainable tensors plus the config they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderWeights {
    pub config: EmbedderConfig,
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    /// `[embedding_dim, channels]`, row-major.
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl EmbedderWeights {
    /// Zero-filled weights with the layout `cfg` implies.
    pub fn zeros(cfg: &EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let c1 = cfg.scaled_stem_filters();
        let c2 = cfg.scaled_stage2_filters();
        let dim = cfg.scaled_embedding_dim();
        let mut blocks = Vec::new();
        for _ in 0..cfg.stage1_blocks {
            blocks.push(ResidualBlock {
                conv1: Conv2d::zeros(c1, c1, 3, 1),
                conv2: Conv2d::zeros(c1, c1, 3, 1),
                proj: None,
            });
        }
        for i in 0..cfg.stage2_blocks {
            let first = i == 0;
            let cin = if first { c1 } else { c2 };
            blocks.push(ResidualBlock {
                conv1: Conv2d::zeros(cin, c2, 3, if first { 2 } else { 1 }),
                conv2: Conv2d::zeros(c2, c2, 3, 1),
                proj: first.then(|| Conv2d::zeros(c1, c2, 1, 2)),
            });
        }
        let last = if cfg.stage2_blocks > 0 { c2 } else { c1 };
        Ok(Self {
            config: cfg.clone(),
            stem: Conv2d::zeros(1, c1, cfg.stem_kernel, 2),
            blocks,
            dense_w: vec![0.0; dim * last],
            dense_b: vec![0.0; dim],
        })
    }

    /// He-normal kernels, zero biases. Values are rounded to f32 so the
    /// on-disk format reproduces them exactly.
    pub fn init(cfg: &EmbedderConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f64], fan_in: usize, gain: f64| {
            let std = (gain / fan_in as f64).sqrt();
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = (z * std) as f32 as f64;
            }
        };
        let conv_fan = |c: &Conv2d| c.c_in * c.kernel * c.kernel;
        let fan = conv_fan(&w.stem);
        fill(&mut w.stem.weight, fan, 2.0);
        for b in &mut w.blocks {
            let f1 = conv_fan(&b.conv1);
            fill(&mut b.conv1.weight, f1, 2.0);
            let f2 = conv_fan(&b.conv2);
            fill(&mut b.conv2.weight, f2, 2.0);
            if let Some(p) = &mut b.proj {
                let fp = conv_fan(p);
                fill(&mut p.weight, fp, 2.0);
            }
        }
        let fan = w.dense_w.len() / w.dense_b.len();
        fill(&mut w.dense_w, fan, 1.0);
        Ok(w)
    }

    pub fn embedding_dim(&self) -> usize {
        self.dense_b.len()
    }

    /// Tensor names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let conv = |c: &Conv2d| vec![c.c_out, c.c_in, c.kernel, c.kernel];
        let mut out = vec![
            ("stem.weight".to_string(), conv(&self.stem)),
            ("stem.bias".to_string(), vec![self.stem.c_out]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv1.weight"), conv(&b.conv1)));
            out.push((format!("block{i}.conv1.bias"), vec![b.conv1.c_out]));
            out.push((format!("block{i}.conv2.weight"), conv(&b.conv2)));
            out.push((format!("block{i}.conv2.bias"), vec![b.conv2.c_out]));
            if let Some(p) = &b.proj {
                out.push((format!("block{i}.proj.weight"), conv(p)));
                out.push((format!("block{i}.proj.bias"), vec![p.c_out]));
            }
        }
        let dim = self.dense_b.len();
        out.push(("dense.weight".to_string(), vec![dim, self.dense_w.len() / dim]));
        out.push(("dense.bias".to_string(), vec![dim]));
        out
    }

    /// Flat tensors in the same order as [`layout`](Self::layout).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.stem.weight, &self.stem.bias];
        for b in &self.blocks {
            out.push(&b.conv1.weight);
            out.push(&b.conv1.bias);
            out.push(&b.conv2.weight);
            out.push(&b.conv2.bias);
            if let Some(p) = &b.proj {
                out.push(&p.weight);
                out.push(&p.bias);
            }
        }
        out.push(&self.dense_w);
        out.push(&self.dense_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            if let Some(p) = &mut b.proj {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        out.push(&mut self.dense_w);
        out.push(&mut self.dense_b);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest f32.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Runs the network on one feature map.
    pub fn forward(&self, x: &Array2<f64>) -> Result<RffVector> {
        let input = self.prepare_input(x)?;
        let trace = self.forward_trace(&input);
        Ok(RffVector::from_f64(&trace.embedding))
    }

    pub(crate) fn prepare_input(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let want = self.config.input_shape;
        if x.dim() != want {
            return Err(Error::Contract(format!(
                "embedder input shape {:?} does not match configured {:?}",
                x.dim(),
                want
            )));
        }
        let s = self.config.input_scale;
        let v: Vec<f64> = x.iter().map(|&v| v * s).collect();
        if v.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("embedder input contains non-finite values".into()));
        }
        Ok(v)
    }

    /// Forward pass keeping every activation needed by [`backward`](Self::backward).
    pub(crate) fn forward_trace(&self, input: &[f64]) -> Trace {
        let (h, w) = self.config.input_shape;
        let mut scratch = Vec::new();
        let (mut a, mut ah, mut aw) = self.stem.forward(input, h, w, &mut scratch);
        relu(&mut a);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (mut y1, h1, w1) = b.conv1.forward(&a, ah, aw, &mut scratch);
            relu(&mut y1);
            let (mut out, h2, w2) = b.conv2.forward(&y1, h1, w1, &mut scratch);
            match &b.proj {
                Some(p) => {
                    let (skip, _, _) = p.forward(&a, ah, aw, &mut scratch);
                    add_into(&mut out, &skip);
                }
                None => add_into(&mut out, &a),
            }
            relu(&mut out);
            blocks.push(BlockTrace {
                input: std::mem::take(&mut a),
                in_dim: (ah, aw),
                y1,
                mid_dim: (h1, w1),
            });
            a = out;
            ah = h2;
            aw = w2;
        }
        let c = a.len() / (ah * aw);
        let p = (ah * aw) as f64;
        let pooled: Vec<f64> = a.chunks(ah * aw).map(|ch| ch.iter().sum::<f64>() / p).collect();
        let dim = self.dense_b.len();
        let mut z = self.dense_b.clone();
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.dense_w[i * c..(i + 1) * c];
            *zi += row.iter().zip(&pooled).map(|(w, g)| w * g).sum::<f64>();
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let embedding = if norm >= NORM_FLOOR {
            z.iter().map(|v| v / norm).collect()
        } else {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        };
        Trace {
            input: input.to_vec(),
            blocks,
            last: (a, ah, aw),
            pooled,
            norm,
            embedding,
        }
    }

    /// Accumulates into `grad` the gradient of `dot(d_embedding, e(x))`
    /// with respect to every tensor.
    pub(crate) fn backward(&self, trace: &Trace, d_embedding: &[f64], grad: &mut EmbedderWeights) {
        if trace.norm < NORM_FLOOR {
            // Output is the constant fallback vector; no gradient flows.
            return;
        }
        let e = &trace.embedding;
        let proj = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum::<f64>();
        let dz: Vec<f64> = e
            .iter()
            .zip(d_embedding)
            .map(|(ei, di)| (di - ei * proj) / trace.norm)
            .collect();
        let c = trace.pooled.len();
        let mut dpool = vec![0.0; c];
        for (i, dzi) in dz.iter().enumerate() {
            grad.dense_b[i] += dzi;
            let row = &self.dense_w[i * c..(i + 1) * c];
            let grow = &mut grad.dense_w[i * c..(i + 1) * c];
            for j in 0..c {
                grow[j] += dzi * trace.pooled[j];
                dpool[j] += dzi * row[j];
            }
        }
        let (last, lh, lw) = &trace.last;
        let p = lh * lw;
        let mut da = vec![0.0; last.len()];
        for (ch, (chunk, out)) in da.chunks_mut(p).zip(last.chunks(p)).enumerate() {
            let g = dpool[ch] / p as f64;
            for (d, o) in chunk.iter_mut().zip(out) {
                if *o > 0.0 {
                    *d = g;
                }
            }
        }
        // `da` is now the gradient at the pre-ReLU sum of the last block
        // (or the stem output when there are no blocks).
        let mut scratch = Vec::new();
        let mut dx = Vec::new();
        for (bi, (b, t)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let gb = &mut grad.blocks[bi];
            let (h1, w1) = t.mid_dim;
            let mut dy1 = Vec::new();
            b.conv2.backward(&t.y1, h1, w1, &da, &mut gb.conv2, Some(&mut dy1), &mut scratch);
            mask_relu(&mut dy1, &t.y1);
            let (h0, w0) = t.in_dim;
            b.conv1.backward(&t.input, h0, w0, &dy1, &mut gb.conv1, Some(&mut dx), &mut scratch);
            match (&b.proj, &mut gb.proj) {
                (Some(p), Some(gp)) => {
                    let mut dskip = Vec::new();
                    p.backward(&t.input, h0, w0, &da, gp, Some(&mut dskip), &mut scratch);
                    add_into(&mut dx, &dskip);
                }
                _ => add_into(&mut dx, &da),
            }
            // The block input is the ReLU output of the previous stage.
            mask_relu(&mut dx, &t.input);
            std::mem::swap(&mut da, &mut dx);
        }
        let (h, w) = self.config.input_shape;
        self.stem.backward(&trace.input, h, w, &da, &mut grad.stem, None, &mut scratch);
    }
}

/// Cached activations of one forward pass.
pub(crate) struct Trace {
    input: Vec<f64>,
    blocks: Vec<BlockTrace>,
    last: (Vec<f64>, usize, usize),
    pooled: Vec<f64>,
    norm: f64,
    pub(crate) embedding: Vec<f64>,
}

struct BlockTrace {
    /// Post-ReLU block input.
    input: Vec<f64>,
    in_dim: (usize, usize),
    /// Post-ReLU output of the first conv.
    y1: Vec<f64>,
    mid_dim: (usize, usize),
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn mask_relu(d: &mut [f64], activated: &[f64]) {
    for (g, a) in d.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
