//! Zero-shot continuation: a small model is trained briefly, then each test
//! utterance's opening tokens and frames prompt the generation of the rest,
//! with and without encoder sharing.

use architts::codec::{generate_corpus, CodecConfig, LatentCodec};
use architts::model::{ArchiTts, ModelConfig};
use architts::sampler::{continuation_split, zero_shot_synthesize, SamplerPlan};
use architts::training::{train, TrainOptions, TrainState, TrainingConfig};

pub fn main() -> architts::Result<()> {
    let codec = LatentCodec::new(CodecConfig {
        vocab_size: 5,
        latent_dim: 4,
        speaker_dim: 2,
        speaker_count: 3,
        ..CodecConfig::default()
    })?;
    let corpus = generate_corpus(&codec, 64, [4, 6], 0, 3)?;
    let test = generate_corpus(&codec, 3, [4, 6], 64, 3)?;
    let mcfg = ModelConfig::tiny(32, 1, 2, 1);
    let cfg = TrainingConfig {
        steps: 120,
        batch_size: 8,
        peak_lr: 3e-3,
        warmup_steps: 10,
        log_every: 40,
        ema_decay: 0.9,
        ..TrainingConfig::default()
    };
    let (model, params) = ArchiTts::build::<f32>(&mcfg, 0)?;
    let state = train(&model, &corpus, &cfg, TrainState::new(params), &TrainOptions::default(), |m| {
        println!("step {:>3}  total {:.4}", m.step, m.total)
    })?;

    for utt in &test.utterances {
        let prompt = continuation_split(&codec, utt, 0.4)?;
        let speaker = codec.speaker(utt.speaker as usize)?;
        for ratio in [0.0, 0.75] {
            let plan = SamplerPlan { nfe: 16, ..SamplerPlan::default() }.with_sharing_ratio(ratio)?;
            let syn = zero_shot_synthesize(
                &model,
                &state.ema,
                &codec,
                &prompt.ref_latents,
                &prompt.ref_tokens,
                &prompt.gen_tokens,
                speaker.values(),
                &plan,
            )?;
            println!(
                "utt {} ratio {ratio:.2}: prompt {:?} target {:?} decoded {:?} ({} frames, {} encoder evals)",
                utt.id,
                prompt.ref_tokens.ids(),
                prompt.gen_tokens.ids(),
                codec.decode_continuation(&prompt.ref_latents, &syn.latents).ids(),
                syn.latents.frames(),
                syn.encoder_evals
            );
        }
    }
    Ok(())
}
