//! Layers shared by the aligner, encoder and decoder. Layers only hold
//! [`ParamId`]s; weights live in a [`ParamSet`](crate::numerics::ParamSet)
//! bound to the [`Tape`] at forward time.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Init, ParamBuilder, ParamId, Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        Self::with_init(pb, name, inp, out, bias, Init::FanIn)
    }

    pub fn zeroed<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, inp: usize, out: usize) -> Result<Self> {
        Self::with_init(pb, name, inp, out, true, Init::Zeros)
    }

    fn with_init<F: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, F, R>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            let w = pb.add("weight", vec![inp, out], init)?;
            let b = if bias { Some(pb.add("bias", vec![1, out], Init::Zeros)?) } else { None };
            Ok(Self { w, b })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                gain: pb.add("gain", vec![1, dim], Init::Ones)?,
                bias: pb.add("bias", vec![1, dim], Init::Zeros)?,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, Some(g), Some(b), F::from_f64_lossy(LN_EPS))
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                up: Linear::new(pb, "up", dim, hidden, true)?,
                down: Linear::new(pb, "down", hidden, dim, true)?,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Multi-head self-attention with rotary positions, no masking.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
    rope_base: f64,
}

impl SelfAttention {
    pub fn new<F: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, F, R>,
        name: &str,
        dim: usize,
        heads: usize,
        rope_base: f64,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                qkv: Linear::new(pb, "qkv", dim, 3 * dim, true)?,
                out: Linear::new(pb, "out", dim, dim, true)?,
                heads,
                dim,
                rope_base,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, positions: &[f64]) -> Result<Var> {
        let qkv = self.qkv.forward(tape, x)?;
        let q = tape.slice_cols(qkv, 0, self.dim)?;
        let k = tape.slice_cols(qkv, self.dim, self.dim)?;
        let v = tape.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let q = tape.rope(q, self.heads, positions, self.rope_base)?;
        let k = tape.rope(k, self.heads, positions, self.rope_base)?;
        let a = tape.attention(q, k, v, self.heads, false)?;
        self.out.forward(tape, a)
    }
}

/// Pre-norm transformer block (attention + MLP, residual).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<F: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, F, R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rope_base: f64,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                norm1: LayerNorm::new(pb, "norm1", dim)?,
                attn: SelfAttention::new(pb, "attn", dim, heads, rope_base)?,
                norm2: LayerNorm::new(pb, "norm2", dim)?,
                mlp: Mlp::new(pb, "mlp", dim, dim * mlp_ratio)?,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, positions: &[f64]) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.attn.forward(tape, h, positions)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// `LN(x)·(1 + scale) + shift`, all operands `T × D`.
fn modulate<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm_plain(x, F::from_f64_lossy(LN_EPS))?;
    let s1 = tape.add_scalar(scale, F::one());
    let y = tape.mul(n, s1)?;
    tape.add(y, shift)
}

/// DiT block: adaptive pre-norm attention and MLP whose shift, scale and
/// gate come from a conditioning signal. Modulation starts at zero, so a
/// fresh block is the identity.
#[derive(Clone, Debug)]
pub struct DitBlock {
    modulation: Linear,
    attn: SelfAttention,
    mlp: Mlp,
    dim: usize,
}

impl DitBlock {
    pub fn new<F: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, F, R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rope_base: f64,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                modulation: Linear::zeroed(pb, "modulation", dim, 6 * dim)?,
                attn: SelfAttention::new(pb, "attn", dim, heads, rope_base)?,
                mlp: Mlp::new(pb, "mlp", dim, dim * mlp_ratio)?,
                dim,
            })
        })
    }

    /// `cond` is either one row (broadcast over frames) or one row per frame.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, cond: Var, positions: &[f64]) -> Result<Var> {
        let frames = tape.rows(x);
        let c = tape.gelu(cond);
        let mut m = self.modulation.forward(tape, c)?;
        if tape.rows(m) == 1 && frames != 1 {
            m = tape.broadcast_rows(m, frames)?;
        }
        let d = self.dim;
        let part = |tape: &mut Tape<'_, F>, i: usize| tape.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let (shift2, scale2, gate2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

        let h = modulate(tape, x, shift1, scale1)?;
        let h = self.attn.forward(tape, h, positions)?;
        let h = tape.mul(h, gate1)?;
        let x = tape.add(x, h)?;

        let h = modulate(tape, x, shift2, scale2)?;
        let h = self.mlp.forward(tape, h)?;
        let h = tape.mul(h, gate2)?;
        tape.add(x, h)
    }
}

/// Final adaptive norm + projection used by the velocity decoder.
#[derive(Clone, Debug)]
pub struct AdaptiveOutput {
    modulation: Linear,
    proj: Linear,
    dim: usize,
}

impl AdaptiveOutput {
    pub fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, dim: usize, out: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                modulation: Linear::zeroed(pb, "modulation", dim, 2 * dim)?,
                proj: Linear::zeroed(pb, "proj", dim, out)?,
                dim,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, cond: Var) -> Result<Var> {
        let frames = tape.rows(x);
        let c = tape.gelu(cond);
        let mut m = self.modulation.forward(tape, c)?;
        if tape.rows(m) == 1 && frames != 1 {
            m = tape.broadcast_rows(m, frames)?;
        }
        let shift = tape.slice_cols(m, 0, self.dim)?;
        let scale = tape.slice_cols(m, self.dim, self.dim)?;
        let h = modulate(tape, x, shift, scale)?;
        self.proj.forward(tape, h)
    }
}

/// Sinusoidal features of a scalar time in `[0, 1]`, `1 × dim`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (scaled * freq).cos();
        out[i + half] = (scaled * freq).sin();
    }
    out
}

/// Sinusoidal features followed by a two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder {
    mlp: Mlp,
    dim: usize,
}

impl TimestepEmbedder {
    pub fn new<F: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, F, R>, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                mlp: Mlp::new(pb, "mlp", dim, dim)?,
                dim,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, t: f64) -> Result<Var> {
        let feats = sinusoidal_embedding(t, self.dim)
            .into_iter()
            .map(F::from_f64_lossy)
            .collect();
        let x = tape.constant(1, self.dim, feats)?;
        self.mlp.forward(tape, x)
    }
}

/// Integer frame positions `0..n`.
pub fn frame_positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}
