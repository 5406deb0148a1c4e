//! Semantic aligner: text tokens plus a target frame count in, one semantic
//! feature row per frame out.
//!
//! Text is embedded and refined by ConvNeXt blocks, then a bidirectional
//! transformer reads `[e_st, text…, e_sm, m × N]` and the outputs at the `N`
//! mask positions become `z`. Optionally `z` is vector-quantized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::numerics::{Init, ParamBuilder, ParamId, Scalar, Tape, Var};

pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerConfig {
    pub convnext_blocks: usize,
    pub transformer_blocks: usize,
    pub model_dim: usize,
    pub head_count: usize,
    #[serde(default)]
    pub vq_enabled: bool,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Rotary coordinate range shared by the text and mask segments.
    #[serde(default = "default_position_span")]
    pub position_span: f64,
}

fn default_codebook_size() -> usize {
    256
}
fn default_conv_kernel() -> usize {
    7
}
pub(crate) fn default_mlp_ratio() -> usize {
    2
}
fn default_position_span() -> f64 {
    64.0
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            convnext_blocks: 1,
            transformer_blocks: 2,
            model_dim: 128,
            head_count: 4,
            vq_enabled: false,
            codebook_size: default_codebook_size(),
            conv_kernel: default_conv_kernel(),
            mlp_ratio: default_mlp_ratio(),
            position_span: default_position_span(),
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transformer_blocks == 0 {
            return Err(Error::Config("aligner needs at least one transformer block".into()));
        }
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "aligner model_dim {} must be a positive multiple of head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if (self.model_dim / self.head_count) % 2 != 0 {
            return Err(Error::Config("aligner head width must be even for rotary positions".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.vq_enabled && self.codebook_size == 0 {
            return Err(Error::Config("VQ enabled with an empty codebook".into()));
        }
        if !(self.position_span > 0.0) {
            return Err(Error::Config("position_span must be positive".into()));
        }
        Ok(())
    }
}

/// Semantic features on a tape.
#[derive(Clone, Debug)]
pub struct AlignerOutput {
    /// `N × model_dim`.
    pub z: Var,
    pub vq_indices: Option<Vec<usize>>,
    pub vq_loss: Option<Var>,
}

/// Depthwise conv → norm → expand → GELU → project, residual.
#[derive(Clone, Debug)]
struct ConvNextBlock {
    kernel: ParamId,
    kernel_bias: ParamId,
    norm: LayerNorm,
    expand: Linear,
    project: Linear,
}

impl ConvNextBlock {
    fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, dim: usize, k: usize, ratio: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                kernel: pb.add("dwconv", vec![k, dim], Init::Normal(1.0 / (k as f64).sqrt()))?,
                kernel_bias: pb.add("dwconv_bias", vec![1, dim], Init::Zeros)?,
                norm: LayerNorm::new(pb, "norm", dim)?,
                expand: Linear::new(pb, "expand", dim, dim * ratio, true)?,
                project: Linear::zeroed(pb, "project", dim * ratio, dim)?,
            })
        })
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let kb = tape.param(self.kernel_bias);
        let h = tape.depthwise_conv1d(x, k)?;
        let h = tape.add_row(h, kb)?;
        let h = self.norm.forward(tape, h)?;
        let h = self.expand.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.project.forward(tape, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct SemanticAligner {
    config: AlignerConfig,
    vocab_size: usize,
    embedding: ParamId,
    convnext: Vec<ConvNextBlock>,
    start_token: ParamId,
    separator_token: ParamId,
    mask_token: ParamId,
    blocks: Vec<TransformerBlock>,
    out_norm: LayerNorm,
    codebook: Option<ParamId>,
}

impl SemanticAligner {
    pub fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, config: &AlignerConfig, vocab_size: usize, rope_base: f64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        pb.scope("aligner", |pb| {
            let embedding = pb.add("embedding", vec![vocab_size, d], Init::Normal(1.0))?;
            let convnext = (0..config.convnext_blocks)
                .map(|i| ConvNextBlock::new(pb, &format!("convnext{i}"), d, config.conv_kernel, config.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            let start_token = pb.add("start_token", vec![1, d], Init::Normal(0.02))?;
            let separator_token = pb.add("separator_token", vec![1, d], Init::Normal(0.02))?;
            let mask_token = pb.add("mask_token", vec![1, d], Init::Normal(0.02))?;
            let blocks = (0..config.transformer_blocks)
                .map(|i| TransformerBlock::new(pb, &format!("block{i}"), d, config.head_count, config.mlp_ratio, rope_base))
                .collect::<Result<Vec<_>>>()?;
            let out_norm = LayerNorm::new(pb, "out_norm", d)?;
            let codebook = if config.vq_enabled {
                Some(pb.add("codebook", vec![config.codebook_size, d], Init::Normal(1.0))?)
            } else {
                None
            };
            Ok(Self {
                config: config.clone(),
                vocab_size,
                embedding,
                convnext,
                start_token,
                separator_token,
                mask_token,
                blocks,
                out_norm,
                codebook,
            })
        })
    }

    pub fn config(&self) -> &AlignerConfig {
        &self.config
    }

    /// Embedding lookup followed by the ConvNeXt stack; `L × model_dim`.
    pub fn embed_text<F: Scalar>(&self, tape: &mut Tape<'_, F>, tokens: &TokenSequence) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Validation("embed_text needs at least one token".into()));
        }
        if let Some(&t) = tokens.ids().iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Validation(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        let idx: Vec<usize> = tokens.ids().iter().map(|&t| t as usize).collect();
        let table = tape.param(self.embedding);
        let mut x = tape.gather_rows(table, &idx)?;
        for block in &self.convnext {
            x = block.forward(tape, x)?;
        }
        Ok(x)
    }

    /// Rotary coordinates for `[e_st, text × L, e_sm, mask × N]`. Each segment
    /// is spread over `[0, span]` so a mask frame and the text token at the
    /// same relative position share a coordinate.
    pub fn positions(&self, text_len: usize, frames: usize) -> Vec<f64> {
        let span = self.config.position_span;
        let mut p = Vec::with_capacity(text_len + frames + 2);
        p.push(0.0);
        p.extend((0..text_len).map(|i| (i as f64 + 0.5) / text_len as f64 * span));
        p.push(span);
        p.extend((0..frames).map(|j| (j as f64 + 0.5) / frames as f64 * span));
        p
    }

    /// Runs the transformer over the full sequence and returns the `N` mask-position outputs.
    pub fn align<F: Scalar>(&self, tape: &mut Tape<'_, F>, text: Var, frames: usize) -> Result<AlignerOutput> {
        if frames == 0 {
            return Err(Error::Validation("align needs at least one frame".into()));
        }
        let (l, d) = tape.shape(text);
        if d != self.config.model_dim || l == 0 {
            return Err(Error::dim("align", format!("L>=1 x {}", self.config.model_dim), format!("{l}x{d}")));
        }
        let st = tape.param(self.start_token);
        let sm = tape.param(self.separator_token);
        let m = tape.param(self.mask_token);
        let masks = tape.broadcast_rows(m, frames)?;
        let mut x = tape.concat_rows(&[st, text, sm, masks])?;
        let pos = self.positions(l, frames);
        for block in &self.blocks {
            x = block.forward(tape, x, &pos)?;
        }
        let x = self.out_norm.forward(tape, x)?;
        let z = tape.slice_rows(x, l + 2, frames)?;
        if self.codebook.is_some() {
            let (zq, idx, loss) = self.quantize(tape, z)?;
            return Ok(AlignerOutput {
                z: zq,
                vq_indices: Some(idx),
                vq_loss: Some(loss),
            });
        }
        Ok(AlignerOutput {
            z,
            vq_indices: None,
            vq_loss: None,
        })
    }

    /// Nearest-codeword quantization with a straight-through gradient.
    pub fn quantize<F: Scalar>(&self, tape: &mut Tape<'_, F>, z: Var) -> Result<(Var, Vec<usize>, Var)> {
        let id = self
            .codebook
            .ok_or_else(|| Error::Config("quantize called with VQ disabled".into()))?;
        let codebook = tape.param(id);
        quantize(tape, z, codebook)
    }
}

/// Maps each row of `z` (`N × D`) to its nearest row of `codebook` (`K × D`).
///
/// Returns `z_q` (value of the codewords, gradient passed straight to `z`),
/// the indices, and `mean_n ‖sg(z) − c‖² + 0.25 · mean_n ‖z − sg(c)‖²`.
pub fn quantize<F: Scalar>(tape: &mut Tape<'_, F>, z: Var, codebook: Var) -> Result<(Var, Vec<usize>, Var)> {
    let (n, d) = tape.shape(z);
    let (k, dc) = tape.shape(codebook);
    if k == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    if d != dc {
        return Err(Error::dim("quantize", d, dc));
    }
    let zv = tape.value(z);
    let cv = tape.value(codebook);
    let indices: Vec<usize> = zv
        .chunks(d)
        .map(|row| nearest_row(row, cv, d))
        .collect();
    let chosen: Vec<F> = indices.iter().flat_map(|&i| cv[i * d..(i + 1) * d].iter().copied()).collect();

    let zq = tape.straight_through(z, chosen)?;
    let c = tape.gather_rows(codebook, &indices)?;
    let z_sg = tape.detach(z);
    let c_sg = tape.detach(c);
    let inv_n = F::from_f64_lossy(1.0 / n as f64);

    let diff = tape.sub(z_sg, c)?;
    let sq = tape.mul(diff, diff)?;
    let codebook_term = tape.sum(sq);
    let diff = tape.sub(z, c_sg)?;
    let sq = tape.mul(diff, diff)?;
    let commit = tape.sum(sq);
    let commit = tape.scale(commit, F::from_f64_lossy(COMMITMENT_WEIGHT));
    let loss = tape.add(codebook_term, commit)?;
    let loss = tape.scale(loss, inv_n);
    Ok((zq, indices, loss))
}

fn nearest_row<F: Scalar>(row: &[F], codebook: &[F], d: usize) -> usize {
    let mut best = (0, F::infinity());
    for (i, c) in codebook.chunks(d).enumerate() {
        let dist: F = row.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(convnext: usize, vq: bool) -> (SemanticAligner, ParamSet<f64>) {
        let cfg = AlignerConfig {
            convnext_blocks: convnext,
            transformer_blocks: 1,
            model_dim: 8,
            head_count: 2,
            vq_enabled: vq,
            codebook_size: 4,
            conv_kernel: 3,
            mlp_ratio: 2,
            position_span: 16.0,
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = SemanticAligner::new(&mut ParamBuilder::new(&mut params, &mut rng), &cfg, 5, 10_000.0).unwrap();
        (a, params)
    }

    #[test]
    fn no_convnext_blocks_returns_raw_embeddings() {
        let (a, params) = tiny(0, false);
        let mut tape = Tape::with_params(&params);
        let x = a.embed_text(&mut tape, &TokenSequence(vec![3, 1])).unwrap();
        let table = params.get(params.id("aligner.embedding").unwrap()).data();
        assert_eq!(tape.value(x), [&table[24..32], &table[8..16]].concat());
    }

    #[test]
    fn zero_initialized_convnext_block_is_identity() {
        let (a, params) = tiny(1, false);
        let mut tape = Tape::with_params(&params);
        let x = a.embed_text(&mut tape, &TokenSequence(vec![2])).unwrap();
        let table = params.get(params.id("aligner.embedding").unwrap()).data();
        assert_eq!(tape.value(x), &table[16..24]);
    }

    #[test]
    fn unknown_token_and_zero_frames_rejected() {
        let (a, params) = tiny(1, false);
        let mut tape = Tape::with_params(&params);
        assert!(a.embed_text(&mut tape, &TokenSequence(vec![5])).is_err());
        assert!(a.embed_text(&mut tape, &TokenSequence(vec![])).is_err());
        let x = a.embed_text(&mut tape, &TokenSequence(vec![1])).unwrap();
        assert!(a.align(&mut tape, x, 0).is_err());
    }

    #[test]
    fn output_length_is_frame_count() {
        let (a, params) = tiny(1, false);
        for (l, n) in [(3usize, 1usize), (1, 5), (4, 4)] {
            let mut tape = Tape::with_params(&params);
            let toks = TokenSequence((0..l as u32).collect());
            let x = a.embed_text(&mut tape, &toks).unwrap();
            let out = a.align(&mut tape, x, n).unwrap();
            assert_eq!(tape.shape(out.z), (n, 8));
            assert_eq!(a.positions(l, n).len(), l + n + 2);
        }
    }

    #[test]
    fn every_mask_position_depends_on_every_text_row() {
        let (a, params) = tiny(0, false);
        let (l, n) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let text: Vec<f64> = (0..l * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for j in 0..n {
            let mut tape = Tape::with_params(&params);
            let x = tape.input(l, 8, text.clone()).unwrap();
            let out = a.align(&mut tape, x, n).unwrap();
            let zj = tape.slice_rows(out.z, j, 1).unwrap();
            let s = tape.sum(zj);
            let w = tape.constant(1, 8, (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
            let p = tape.mul(zj, w).unwrap();
            let p = tape.sum(p);
            let obj = tape.add(s, p).unwrap();
            let g = tape.backward(obj).unwrap();
            let gx = g.wrt(x).unwrap();
            for row in gx.chunks(8) {
                assert!(row.iter().map(|v| v.abs()).sum::<f64>() > 1e-8);
            }
        }
    }

    #[test]
    fn quantize_exact_codewords_is_lossless() {
        let mut tape = Tape::<f64>::new();
        let cb = vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0];
        let codebook = tape.constant(3, 2, cb).unwrap();
        let z = tape.input(2, 2, vec![-1.0, -1.0, 1.0, 0.0]).unwrap();
        let (zq, idx, loss) = quantize(&mut tape, z, codebook).unwrap();
        assert_eq!(idx, vec![2, 0]);
        assert_eq!(tape.value(zq), tape.value(z));
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn single_codeword_takes_everything() {
        let mut tape = Tape::<f64>::new();
        let codebook = tape.constant(1, 2, vec![0.3, -0.2]).unwrap();
        let z = tape.input(3, 2, vec![1.0, 2.0, -4.0, 0.0, 0.5, 0.5]).unwrap();
        let (zq, idx, _) = quantize(&mut tape, z, codebook).unwrap();
        assert_eq!(idx, vec![0, 0, 0]);
        assert_eq!(tape.value(zq), &[0.3, -0.2, 0.3, -0.2, 0.3, -0.2]);
    }

    #[test]
    fn quantize_matches_exhaustive_scan_and_passes_gradient_straight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let cb: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut tape = Tape::<f64>::new();
            let codebook = tape.input(4, 2, cb.clone()).unwrap();
            let z = tape.input(5, 2, zs.clone()).unwrap();
            let (zq, idx, _) = quantize(&mut tape, z, codebook).unwrap();
            for (f, &i) in idx.iter().enumerate() {
                let d = |c: usize| (zs[2 * f] - cb[2 * c]).powi(2) + (zs[2 * f + 1] - cb[2 * c + 1]).powi(2);
                for c in 0..4 {
                    assert!(d(i) <= d(c));
                }
            }
            let w = tape.constant(5, 2, (0..10).map(|i| i as f64).collect()).unwrap();
            let y = tape.mul(zq, w).unwrap();
            let y = tape.sum(y);
            let g = tape.backward(y).unwrap();
            assert_eq!(g.wrt(z).unwrap(), tape.value(w));
        }
    }

    #[test]
    fn vq_output_carries_indices_and_loss() {
        let (a, params) = tiny(0, true);
        let mut tape = Tape::with_params(&params);
        let x = a.embed_text(&mut tape, &TokenSequence(vec![0, 4])).unwrap();
        let out = a.align(&mut tape, x, 3).unwrap();
        let idx = out.vq_indices.unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|&i| i < 4));
        assert!(tape.scalar_value(out.vq_loss.unwrap()) >= 0.0);
    }
}
