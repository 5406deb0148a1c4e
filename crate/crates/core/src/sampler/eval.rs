//! Continuation scoring over a held-out split: each utterance's opening tokens
//! and their frames become the prompt, the rest is synthesized and decoded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{zero_shot_synthesize, SamplerPlan};
use crate::codec::{token_error_rate, LatentCodec, LatentSequence, TokenSequence, Utterance};
use crate::error::{Error, Result};
use crate::model::ArchiTts;
use crate::numerics::ParamSet;
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationPrompt {
    pub ref_latents: LatentSequence,
    pub ref_tokens: TokenSequence,
    pub gen_tokens: TokenSequence,
}

/// Splits `utt` after `round(L·fraction)` tokens (at least one on each side).
/// Token boundaries come from the codec's frame labels, which are exact on
/// corpus latents.
pub fn continuation_split(codec: &LatentCodec, utt: &Utterance, prompt_fraction: f64) -> Result<ContinuationPrompt> {
    let ids = utt.tokens.ids();
    if ids.len() < 2 {
        return Err(Error::Validation(format!("utterance {} is too short to split", utt.id)));
    }
    let labels = codec.frame_labels(&utt.latents);
    let mut starts = Vec::with_capacity(ids.len());
    for (j, l) in labels.iter().enumerate() {
        if j == 0 || labels[j - 1] != *l {
            starts.push(j);
        }
    }
    if starts.len() != ids.len() {
        return Err(Error::Validation(format!(
            "utterance {}: {} label runs for {} tokens",
            utt.id,
            starts.len(),
            ids.len()
        )));
    }
    let p = ((ids.len() as f64 * prompt_fraction).round() as usize).clamp(1, ids.len() - 1);
    Ok(ContinuationPrompt {
        ref_latents: utt.latents.slice(0, starts[p]),
        ref_tokens: TokenSequence(ids[..p].to_vec()),
        gen_tokens: TokenSequence(ids[p..].to_vec()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: u32,
    /// Error rate of the boundary-aware decode of the generated region.
    pub ter: f64,
    /// Error rate of decoding the generated region on its own.
    pub raw_ter: f64,
    pub speaker_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub utterances: usize,
    pub ter: f64,
    pub raw_ter: f64,
    pub speaker_cosine: f64,
    /// Per utterance.
    pub encoder_evals: usize,
    pub decoder_evals: usize,
    pub wall_time: f64,
    pub results: Vec<UtteranceResult>,
}

/// Synthesizes every utterance's continuation with `plan`, seeding each run
/// from `plan.seed` and the utterance id.
pub fn evaluate_continuations(
    model: &ArchiTts,
    params: &ParamSet<f32>,
    codec: &LatentCodec,
    utterances: &[Utterance],
    plan: &SamplerPlan,
    prompt_fraction: f64,
) -> Result<EvalSummary> {
    if utterances.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let started = Instant::now();
    let mut results = Vec::with_capacity(utterances.len());
    let (mut enc, mut dec) = (0, 0);
    for utt in utterances {
        let prompt = continuation_split(codec, utt, prompt_fraction)?;
        let speaker = codec.speaker(utt.speaker as usize)?;
        let run = SamplerPlan {
            seed: rng::derive(plan.seed, &[stream::EVAL, utt.id as u64]),
            ..plan.clone()
        };
        let syn = zero_shot_synthesize(
            model,
            params,
            codec,
            &prompt.ref_latents,
            &prompt.ref_tokens,
            &prompt.gen_tokens,
            speaker.values(),
            &run,
        )?;
        let bounded = codec.decode_continuation(&prompt.ref_latents, &syn.latents);
        results.push(UtteranceResult {
            id: utt.id,
            ter: token_error_rate(&prompt.gen_tokens, &bounded)?,
            raw_ter: token_error_rate(&prompt.gen_tokens, &syn.decoded)?,
            speaker_cosine: codec.speaker_cosine(&syn.latents, utt.speaker as usize)?,
        });
        enc = syn.encoder_evals;
        dec = syn.decoder_evals;
    }
    let n = results.len() as f64;
    let mean = |f: fn(&UtteranceResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(EvalSummary {
        utterances: results.len(),
        ter: mean(|r| r.ter),
        raw_ter: mean(|r| r.raw_ter),
        speaker_cosine: mean(|r| r.speaker_cosine),
        encoder_evals: enc,
        decoder_evals: dec,
        wall_time: started.elapsed().as_secs_f64(),
        results,
    })
}
