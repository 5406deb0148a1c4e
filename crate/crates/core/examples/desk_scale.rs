//! The full desk-scale pipeline: generate the corpus, train the default model,
//! score zero-shot continuations on the test split and sweep sharing ratios.
//!
//! Output goes to `./desk_run` (or the first argument). `STEPS` overrides the
//! training length for a quicker look.

use std::path::PathBuf;

use architts::cli::{cmd_bench_sharing, cmd_gen_corpus, cmd_train, final_checkpoint, load_weights, Paths, RunConfig, Weights};
use architts::codec::{read_dataset, LatentCodec};
use architts::sampler::evaluate_continuations;

pub fn main() -> architts::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "desk_run".into());
    let mut cfg = RunConfig {
        paths: Paths {
            dataset: root.join("data/train.bin"),
            test_dataset: root.join("data/test.bin"),
            checkpoints: root.join("checkpoints"),
            reports: root.join("reports"),
        },
        ..RunConfig::default()
    };
    if let Some(steps) = std::env::var("STEPS").ok().and_then(|s| s.parse().ok()) {
        cfg.training.steps = steps;
        cfg.training.warmup_steps = cfg.training.warmup_steps.min(steps / 4);
    }

    let corpus = cmd_gen_corpus(&cfg)?;
    println!("corpus: {} train / {} test utterances", corpus.train_utterances, corpus.test_utterances);

    let every = (cfg.training.steps / 20).max(1);
    cmd_train(&cfg, false, None, |m| {
        if m.step % every == 0 {
            println!("step {:>6}  lr {:.2e}  cfm {:.3}  dir {:.4}  ctc {:.4}  {:.0}s", m.step, m.lr, m.cfm, m.dir, m.ctc, m.wall_time);
        }
    })?;

    let (model, params) = load_weights(&final_checkpoint(&cfg), Weights::Ema)?;
    let codec = LatentCodec::new(cfg.codec.clone())?;
    let test = read_dataset(&cfg.paths.test_dataset)?;
    let s = evaluate_continuations(&model, &params, &codec, &test.utterances, &cfg.sampler.plan()?, cfg.sampler.prompt_fraction)?;
    println!(
        "zero-shot: TER {:.2}% over {} utterances, speaker cosine {:.3}, {:.1}s",
        100.0 * s.ter,
        s.utterances,
        s.speaker_cosine,
        s.wall_time
    );

    let table = cmd_bench_sharing(&cfg, &final_checkpoint(&cfg), Weights::Ema)?;
    print!("{}", table.summary());
    println!("reports in {}", cfg.paths.reports.display());
    Ok(())
}
