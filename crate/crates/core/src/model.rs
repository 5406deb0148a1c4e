//! The full network: semantic aligner, condition encoder and velocity decoder
//! sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerConfig, AlignerOutput, SemanticAligner};
use crate::codec::TokenSequence;
use crate::decoder::{DecoderConfig, VelocityDecoder};
use crate::encoder::{ConditionEncoder, ConditionState, Conditions, EncoderConfig, NullFlags};
use crate::error::{Error, Result};
use crate::numerics::{ParamBuilder, ParamSet, Scalar, Tape};

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub speaker_dim: usize,
    /// Codec vocabulary; the CTC head has one more output for blank.
    pub vocab_size: usize,
    pub aligner: AlignerConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            speaker_dim: 4,
            vocab_size: 16,
            aligner: AlignerConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            rope_base: default_rope_base(),
        }
    }
}

impl ModelConfig {
    /// The published block counts (2 ConvNeXt + 6 transformer aligner blocks,
    /// 18 encoder and 4 decoder blocks) at the configured width.
    pub fn paper_depth() -> Self {
        let mut cfg = Self::default();
        cfg.aligner.convnext_blocks = 2;
        cfg.aligner.transformer_blocks = 6;
        cfg.encoder.blocks = 18;
        cfg.decoder.blocks = 4;
        cfg
    }

    /// A small configuration for tests: model width `dim`, given block counts.
    pub fn tiny(dim: usize, aligner_blocks: usize, encoder_blocks: usize, decoder_blocks: usize) -> Self {
        Self {
            latent_dim: 4,
            speaker_dim: 2,
            vocab_size: 5,
            aligner: AlignerConfig {
                convnext_blocks: 1,
                transformer_blocks: aligner_blocks,
                model_dim: dim,
                head_count: 2,
                conv_kernel: 3,
                position_span: 16.0,
                ..AlignerConfig::default()
            },
            encoder: EncoderConfig {
                blocks: encoder_blocks,
                model_dim: dim,
                head_count: 2,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                blocks: decoder_blocks,
                model_dim: dim,
                head_count: 2,
                ..DecoderConfig::default()
            },
            rope_base: default_rope_base(),
        }
    }

    pub fn ctc_vocab(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.speaker_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config("latent_dim, speaker_dim and vocab_size must be positive".into()));
        }
        self.aligner.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.model_dim != self.encoder.model_dim {
            return Err(Error::Config("decoder and encoder model_dim must match".into()));
        }
        Ok(())
    }
}

/// Everything the model is conditioned on for one utterance.
#[derive(Clone, Debug)]
pub struct ConditionInputs<'a> {
    /// `T × D`, zero on frames to generate.
    pub x_ref: &'a [f32],
    /// Full transcript covering all `T` frames.
    pub tokens: &'a TokenSequence,
    /// `D_s` speaker vector.
    pub speaker: &'a [f32],
}

#[derive(Clone, Debug)]
pub struct ArchiTts {
    config: ModelConfig,
    pub aligner: SemanticAligner,
    pub encoder: ConditionEncoder,
    pub decoder: VelocityDecoder,
}

impl ArchiTts {
    /// Builds the layers and freshly initialized parameters from `seed`.
    pub fn build<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<F>)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let aligner = SemanticAligner::new(&mut pb, &config.aligner, config.vocab_size, config.rope_base)?;
        let encoder = ConditionEncoder::new(
            &mut pb,
            &config.encoder,
            config.latent_dim,
            config.aligner.model_dim,
            config.speaker_dim,
            config.ctc_vocab(),
            config.rope_base,
        )?;
        let decoder = VelocityDecoder::new(&mut pb, &config.decoder, config.latent_dim, config.encoder.model_dim, config.rope_base)?;
        let model = Self {
            config: config.clone(),
            aligner,
            encoder,
            decoder,
        };
        Ok((model, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Semantic features for `frames` frames of `tokens`.
    pub fn semantic<F: Scalar>(&self, tape: &mut Tape<'_, F>, tokens: &TokenSequence, frames: usize) -> Result<AlignerOutput> {
        let text = self.aligner.embed_text(tape, tokens)?;
        self.aligner.align(tape, text, frames)
    }

    /// Puts the condition values on `tape`. The aligner is skipped when the
    /// semantic condition is nulled.
    pub fn condition_vars<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        inputs: &ConditionInputs<'_>,
        frames: usize,
        flags: NullFlags,
    ) -> Result<(Conditions, Option<AlignerOutput>)> {
        let d = self.config.latent_dim;
        if inputs.x_ref.len() != frames * d {
            return Err(Error::Validation(format!(
                "x_ref has {} values, expected {frames}x{d}",
                inputs.x_ref.len()
            )));
        }
        let x_ref = tape.constant(frames, d, to_scalars(inputs.x_ref))?;
        let speaker = tape.constant(1, self.config.speaker_dim, to_scalars(inputs.speaker))?;
        let (z, aligned) = if flags.semantic {
            (tape.constant(1, 1, vec![F::zero()])?, None)
        } else {
            let out = self.semantic(tape, inputs.tokens, frames)?;
            (out.z, Some(out))
        };
        Ok((Conditions { x_ref, z, speaker }, aligned))
    }

    /// Frozen-weight encoder evaluation producing a reusable [`ConditionState`].
    pub fn encode_condition(
        &self,
        params: &ParamSet<f32>,
        x_t: &[f32],
        t: f64,
        z: Option<&[f32]>,
        inputs: &ConditionInputs<'_>,
        flags: NullFlags,
    ) -> Result<ConditionState> {
        let d = self.config.latent_dim;
        let frames = x_t.len() / d;
        let mut tape = Tape::frozen(params);
        let xv = tape.constant(frames, d, x_t.to_vec())?;
        let x_ref = tape.constant(frames, d, inputs.x_ref.to_vec())?;
        let speaker = tape.constant(1, self.config.speaker_dim, inputs.speaker.to_vec())?;
        let z = match (flags.semantic, z) {
            (true, _) => tape.constant(1, 1, vec![0.0])?,
            (false, Some(z)) => tape.constant(frames, self.config.aligner.model_dim, z.to_vec())?,
            (false, None) => return Err(Error::Validation("semantic features required unless nulled".into())),
        };
        let out = self.encoder.encode(&mut tape, xv, t, Conditions { x_ref, z, speaker }, flags)?;
        Ok(ConditionState::from_tape(&tape, out, t))
    }

    /// Frozen-weight semantic features, `frames × model_dim`.
    pub fn semantic_features(&self, params: &ParamSet<f32>, tokens: &TokenSequence, frames: usize) -> Result<Vec<f32>> {
        let mut tape = Tape::frozen(params);
        let out = self.semantic(&mut tape, tokens, frames)?;
        Ok(tape.value(out.z).to_vec())
    }

    /// Frozen-weight velocity from a (possibly cached) condition state.
    pub fn decode_velocity(&self, params: &ParamSet<f32>, x_t: &[f32], t: f64, state: &ConditionState) -> Result<Vec<f32>> {
        let d = self.config.latent_dim;
        let frames = x_t.len() / d;
        if frames != state.frames || x_t.len() != frames * d {
            return Err(Error::Validation(format!(
                "x_t has {frames} frames but condition state has {}",
                state.frames
            )));
        }
        let mut tape = Tape::frozen(params);
        let xv = tape.constant(frames, d, x_t.to_vec())?;
        let h = tape.constant(state.frames, state.dim, state.h.clone())?;
        let v = self.decoder.decode_velocity(&mut tape, xv, t, h)?;
        Ok(tape.value(v).to_vec())
    }
}

pub(crate) fn to_scalars<F: Scalar>(xs: &[f32]) -> Vec<F> {
    xs.iter().map(|&x| F::from_f64_lossy(x as f64)).collect()
}
