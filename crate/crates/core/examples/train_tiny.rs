//! Trains a tiny model for a few steps with checkpoints, then resumes from the
//! midpoint checkpoint and confirms the weights match the uninterrupted run.

use architts::codec::{generate_corpus, CodecConfig, LatentCodec};
use architts::model::{ArchiTts, ModelConfig};
use architts::training::{load_checkpoint, save_checkpoint, train, TrainOptions, TrainState, TrainingConfig};

pub fn main() -> architts::Result<()> {
    let codec = LatentCodec::new(CodecConfig {
        vocab_size: 5,
        latent_dim: 4,
        speaker_dim: 2,
        speaker_count: 3,
        ..CodecConfig::default()
    })?;
    let corpus = generate_corpus(&codec, 16, [3, 6], 0, 2)?;
    let mcfg = ModelConfig::tiny(16, 1, 2, 1);
    let cfg = TrainingConfig {
        steps: 30,
        batch_size: 4,
        peak_lr: 3e-3,
        warmup_steps: 5,
        log_every: 5,
        checkpoint_every: 10,
        ..TrainingConfig::default()
    };
    let (model, params) = ArchiTts::build::<f32>(&mcfg, 0)?;
    println!("{} parameters", params.scalar_count());

    let opts = TrainOptions {
        checkpoint_dir: None,
        metrics_path: None,
        stop_at: None,
    };
    let full = train(&model, &corpus, &cfg, TrainState::new(params.clone()), &opts, |m| {
        println!("step {:>3}  cfm {:.4}  dir {:.4}  ctc {:.4}  total {:.4}", m.step, m.cfm, m.dir, m.ctc, m.total)
    })?;

    let half = train(&model, &corpus, &cfg, TrainState::new(params), &TrainOptions { stop_at: Some(15), ..opts.clone() }, |_| {})?;
    let path = std::env::temp_dir().join(format!("architts-tiny-{}.ckpt", std::process::id()));
    save_checkpoint(&path, &mcfg, &cfg, &half)?;
    let resumed = load_checkpoint(&path)?;
    let _ = std::fs::remove_file(&path);
    let done = train(&resumed.model, &corpus, &resumed.training, resumed.state, &opts, |_| {})?;
    let same = full.params.iter().zip(done.params.iter()).all(|(a, b)| a.2 == b.2);
    println!("resumed from step 15: weights identical to the uninterrupted run: {same}");
    assert!(same);
    Ok(())
}
