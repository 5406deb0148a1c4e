//! Condition encoder: a DiT stack fusing the noisy latent, the audio prompt,
//! semantic features and the speaker vector into per-frame hidden states.
//! An intermediate block output feeds the CTC head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::default_mlp_ratio;
use crate::error::{Error, Result};
use crate::nn::{frame_positions, DitBlock, LayerNorm, Linear, TimestepEmbedder, LN_EPS};
use crate::numerics::{Init, ParamBuilder, ParamId, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub head_count: usize,
    /// 1-based block whose output feeds the CTC head; `None` means `blocks / 2` (at least 1).
    #[serde(default)]
    pub ctc_tap_layer: Option<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            model_dim: 128,
            head_count: 4,
            ctc_tap_layer: None,
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl EncoderConfig {
    pub fn tap_layer(&self) -> usize {
        self.ctc_tap_layer.unwrap_or((self.blocks / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "encoder model_dim {} must be a positive multiple of head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if (self.model_dim / self.head_count) % 2 != 0 {
            return Err(Error::Config("encoder head width must be even for rotary positions".into()));
        }
        let tap = self.tap_layer();
        if tap == 0 || tap > self.blocks {
            return Err(Error::Config(format!("ctc_tap_layer {tap} outside [1, {}]", self.blocks)));
        }
        Ok(())
    }
}

/// Which conditions are replaced by their learned null embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullFlags {
    pub x_ref: bool,
    pub semantic: bool,
    pub speaker: bool,
}

impl NullFlags {
    pub const NONE: NullFlags = NullFlags {
        x_ref: false,
        semantic: false,
        speaker: false,
    };
    pub const ALL: NullFlags = NullFlags {
        x_ref: true,
        semantic: true,
        speaker: true,
    };

    pub fn all(&self) -> bool {
        self.x_ref && self.semantic && self.speaker
    }
}

/// Condition inputs on a tape. `x_ref` and `z` are `T × ·`, `speaker` is `1 × D_s`.
#[derive(Clone, Copy, Debug)]
pub struct Conditions {
    pub x_ref: Var,
    pub z: Var,
    pub speaker: Var,
}

/// Encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub h: Var,
    pub phi: Var,
}

/// Encoder outputs detached from any tape, reusable across sampling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionState {
    pub frames: usize,
    pub dim: usize,
    /// `frames × dim` final hidden states.
    pub h: Vec<f32>,
    /// `frames × dim` tap-layer states.
    pub phi: Vec<f32>,
    /// Time the state was computed at.
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    config: EncoderConfig,
    latent_dim: usize,
    semantic_dim: usize,
    speaker_dim: usize,
    input: Linear,
    null_x_ref: ParamId,
    null_semantic: ParamId,
    null_speaker: ParamId,
    time: TimestepEmbedder,
    blocks: Vec<DitBlock>,
    out_norm: LayerNorm,
    ctc_head: Linear,
}

impl ConditionEncoder {
    pub fn new<F: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, F, R>,
        config: &EncoderConfig,
        latent_dim: usize,
        semantic_dim: usize,
        speaker_dim: usize,
        ctc_vocab: usize,
        rope_base: f64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        pb.scope("encoder", |pb| {
            let input = Linear::new(pb, "input", 2 * latent_dim + semantic_dim + speaker_dim, d, true)?;
            let null_x_ref = pb.add("null_x_ref", vec![1, latent_dim], Init::Normal(0.02))?;
            let null_semantic = pb.add("null_semantic", vec![1, semantic_dim], Init::Normal(0.02))?;
            let null_speaker = pb.add("null_speaker", vec![1, speaker_dim], Init::Normal(0.02))?;
            let time = TimestepEmbedder::new(pb, "time", d)?;
            let blocks = (0..config.blocks)
                .map(|i| DitBlock::new(pb, &format!("block{i}"), d, config.head_count, config.mlp_ratio, rope_base))
                .collect::<Result<Vec<_>>>()?;
            let out_norm = LayerNorm::new(pb, "out_norm", d)?;
            let ctc_head = Linear::new(pb, "ctc_head", d, ctc_vocab, true)?;
            Ok(Self {
                config: config.clone(),
                latent_dim,
                semantic_dim,
                speaker_dim,
                input,
                null_x_ref,
                null_semantic,
                null_speaker,
                time,
                blocks,
                out_norm,
                ctc_head,
            })
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Evaluates the stack. Flagged conditions are replaced by null
    /// embeddings, so their values never reach the output.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x_t: Var,
        t: f64,
        cond: Conditions,
        flags: NullFlags,
    ) -> Result<EncoderOutput> {
        let frames = tape.rows(x_t);
        let expect = |tape: &Tape<'_, F>, what: &'static str, v: Var, rows: usize, cols: usize| -> Result<()> {
            if tape.shape(v) != (rows, cols) {
                return Err(Error::Validation(format!(
                    "{what} is {:?}, expected {rows}x{cols}",
                    tape.shape(v)
                )));
            }
            Ok(())
        };
        expect(tape, "x_t", x_t, frames, self.latent_dim)?;
        let x_ref = if flags.x_ref {
            let n = tape.param(self.null_x_ref);
            tape.broadcast_rows(n, frames)?
        } else {
            expect(tape, "x_ref", cond.x_ref, frames, self.latent_dim)?;
            cond.x_ref
        };
        let z = if flags.semantic {
            let n = tape.param(self.null_semantic);
            tape.broadcast_rows(n, frames)?
        } else {
            expect(tape, "z", cond.z, frames, self.semantic_dim)?;
            cond.z
        };
        let s = if flags.speaker {
            tape.param(self.null_speaker)
        } else {
            expect(tape, "speaker", cond.speaker, 1, self.speaker_dim)?;
            cond.speaker
        };
        let s = tape.broadcast_rows(s, frames)?;
        let inp = tape.concat_cols(&[x_t, x_ref, z, s])?;
        let mut x = self.input.forward(tape, inp)?;
        let temb = self.time.forward(tape, t)?;
        let pos = frame_positions(frames);
        let tap = self.config.tap_layer();
        let mut phi = x;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, temb, &pos)?;
            if i + 1 == tap {
                phi = x;
            }
        }
        let h = self.out_norm.forward(tape, x)?;
        Ok(EncoderOutput { h, phi })
    }

    /// Normalized tap-layer states projected to CTC log-probabilities (`T × (V+1)`).
    pub fn ctc_logits<F: Scalar>(&self, tape: &mut Tape<'_, F>, phi: Var) -> Result<Var> {
        let n = tape.layer_norm_plain(phi, F::from_f64_lossy(LN_EPS))?;
        let logits = self.ctc_head.forward(tape, n)?;
        tape.log_softmax(logits)
    }
}

impl ConditionState {
    pub fn from_tape<F: Scalar>(tape: &Tape<'_, F>, out: EncoderOutput, t: f64) -> Self {
        let (frames, dim) = tape.shape(out.h);
        let conv = |v: Var| tape.value(v).iter().map(|x| x.as_f64() as f32).collect();
        Self {
            frames,
            dim,
            h: conv(out.h),
            phi: conv(out.phi),
            t,
        }
    }
}
