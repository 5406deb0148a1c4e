//! Command-line surface: corpus generation, training, synthesis, the
//! sharing-ratio benchmark and the verification suite.
//!
//! The `architts` binary only forwards its arguments to [`main_with_args`];
//! every command is also callable as a library function.

mod config;
pub mod verify;

pub use config::{BenchSettings, CorpusSettings, Paths, RunConfig, SamplerSettings, REPORT_DIR_ENV};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::codec::{generate_corpus, read_dataset, token_error_rate, write_dataset, Corpus, LatentCodec, LatentSequence, TokenSequence, Utterance};
use crate::error::{Error, Result};
use crate::model::ArchiTts;
use crate::numerics::ParamSet;
use crate::sampler::{continuation_split, evaluate_continuations, zero_shot_synthesize, SamplerPlan, SynthesisReport, UncondMode};
use crate::training::{load_checkpoint, train, MetricsRecord, TrainOptions, TrainState};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "architts", version, about = "Desk-scale flow-matching TTS on a synthetic latent codec")]
pub struct Cli {
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and test datasets.
    GenCorpus(GenCorpusArgs),
    /// Train (or resume) and write checkpoints and metrics.
    Train(TrainArgs),
    /// Synthesize a continuation of one utterance.
    Synth(SynthArgs),
    /// Token error rate, speaker cosine and cost across sharing ratios.
    BenchSharing(BenchArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Train dataset path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub test_utterances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from `<checkpoints>/latest.ckpt` if present.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this step; a later `--resume` continues the same schedule.
    #[arg(long)]
    pub stop_at: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    Ema,
    Raw,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long = "cfg")]
    pub cfg_strength: Option<f64>,
    #[arg(long)]
    pub timeshift: Option<f64>,
    #[arg(long)]
    pub sharing_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Null set used by the unconditional guidance branch.
    #[arg(long, value_enum)]
    pub uncond: Option<UncondArg>,
    #[arg(long, value_enum, default_value = "ema")]
    pub weights: Weights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UncondArg {
    AllNull,
    PromptSpeaker,
}

impl From<UncondArg> for UncondMode {
    fn from(u: UncondArg) -> Self {
        match u {
            UncondArg::AllNull => UncondMode::AllNull,
            UncondArg::PromptSpeaker => UncondMode::PromptSpeaker,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Utterance id, looked up in the test dataset and then the train dataset.
    #[arg(long)]
    pub ref_id: u32,
    /// Comma-separated token ids to speak. Without it, the utterance's own
    /// continuation is generated and scored.
    #[arg(long, value_delimiter = ',')]
    pub gen_tokens: Option<Vec<u32>>,
    /// Output latents path; the report goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub nfe_list: Option<Vec<usize>>,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long, value_enum, default_value = "ema")]
    pub weights: Weights,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Swap in a CTC loss with an off-by-one in its recursion.
    #[arg(long, hide = true)]
    pub inject_ctc_fault: bool,
}

/// Process exit code for an error: usage errors 2, I/O 3, anything else 1.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Config(_) | Error::Validation(_) | Error::Lookup(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs a parsed command, returning the exit code for non-error outcomes.
pub fn run(cli: Cli) -> Result<u8> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus(a) => {
            let cfg = apply_gen_corpus(cfg, &a)?;
            let s = cmd_gen_corpus(&cfg)?;
            println!(
                "train: {} utterances, {} frames -> {}",
                s.train_utterances,
                s.train_frames,
                cfg.paths.dataset.display()
            );
            println!(
                "test: {} utterances, {} frames -> {}",
                s.test_utterances,
                s.test_frames,
                cfg.paths.test_dataset.display()
            );
            println!("speakers: {}", s.speakers);
            Ok(EXIT_OK)
        }
        Command::Train(a) => {
            let cfg = apply_train(cfg, &a)?;
            let state = cmd_train(&cfg, a.resume, a.stop_at, |m| {
                println!(
                    "step {:>6}  lr {:.2e}  cfm {:.4}  dir {:.4}  ctc {:.4}  total {:.4}  |g| {:.3}",
                    m.step, m.lr, m.cfm, m.dir, m.ctc, m.total, m.grad_norm
                );
            })?;
            println!("stopped at step {}", state.step);
            Ok(EXIT_OK)
        }
        Command::Synth(a) => {
            let cfg = apply_plan(cfg, &a.plan)?;
            let out = cmd_synth(&cfg, &a)?;
            println!("{}", serde_json::to_string_pretty(&out.report).expect("report serializes"));
            println!("latents -> {}", out.latents_path.display());
            Ok(EXIT_OK)
        }
        Command::BenchSharing(a) => {
            let cfg = apply_bench(cfg, &a)?;
            let ckpt = a.checkpoint.clone().unwrap_or_else(|| final_checkpoint(&cfg));
            let table = cmd_bench_sharing(&cfg, &ckpt, a.weights)?;
            print!("{}", table.summary());
            if table.wall_time_decreasing {
                Ok(EXIT_OK)
            } else {
                eprintln!("wall time does not decrease with the sharing ratio");
                Ok(EXIT_FAILURE)
            }
        }
        Command::Verify(a) => {
            let report = if a.inject_ctc_fault {
                verify::run_verify_with(a.seed, verify::off_by_one_ctc_loss)
            } else {
                verify::run_verify(a.seed)
            };
            for c in &report.checks {
                let seed = c.failing_seed.map(|s| format!(" (seed {s})")).unwrap_or_default();
                println!(
                    "{} {:<20} {:>6.2}s  {}{seed}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
            }
            write_json(&cfg.paths.reports.join("verify.json"), &report)?;
            Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

fn revalidate(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_gen_corpus(mut cfg: RunConfig, a: &GenCorpusArgs) -> Result<RunConfig> {
    if let Some(p) = &a.out {
        cfg.paths.dataset = p.clone();
    }
    if let Some(p) = &a.test_out {
        cfg.paths.test_dataset = p.clone();
    }
    if let Some(n) = a.utterances {
        cfg.corpus.train_utterances = n;
    }
    if let Some(n) = a.test_utterances {
        cfg.corpus.test_utterances = n;
    }
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    revalidate(cfg)
}

pub fn apply_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<RunConfig> {
    if let Some(n) = a.steps {
        cfg.training.steps = n;
    }
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    revalidate(cfg)
}

pub fn apply_plan(mut cfg: RunConfig, a: &PlanArgs) -> Result<RunConfig> {
    let s = &mut cfg.sampler;
    if let Some(v) = a.nfe {
        s.nfe = v;
    }
    if let Some(v) = a.cfg_strength {
        s.cfg_strength = v;
    }
    if let Some(v) = a.timeshift {
        s.timeshift = v;
    }
    if let Some(v) = a.sharing_ratio {
        s.sharing_ratio = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.uncond {
        s.uncond = v.into();
    }
    revalidate(cfg)
}

pub fn apply_bench(mut cfg: RunConfig, a: &BenchArgs) -> Result<RunConfig> {
    if let Some(r) = &a.ratios {
        cfg.bench.ratios = r.clone();
    }
    if let Some(n) = &a.nfe_list {
        cfg.bench.nfe = n.clone();
    }
    if let Some(n) = a.utterances {
        cfg.bench.utterances = Some(n);
    }
    revalidate(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train_utterances: usize,
    pub train_frames: usize,
    pub test_utterances: usize,
    pub test_frames: usize,
    pub speakers: usize,
}

/// The train split (ids `0..n`) and test split (ids following it) of the configured corpus.
pub fn build_corpora(cfg: &RunConfig) -> Result<(LatentCodec, Corpus, Corpus)> {
    let codec = LatentCodec::new(cfg.codec.clone())?;
    let c = &cfg.corpus;
    let train = generate_corpus(&codec, c.train_utterances, c.length_range, 0, c.seed)?;
    let test = generate_corpus(&codec, c.test_utterances, c.length_range, c.train_utterances as u32, c.seed)?;
    Ok((codec, train, test))
}

pub fn cmd_gen_corpus(cfg: &RunConfig) -> Result<CorpusSummary> {
    let (_, train, test) = build_corpora(cfg)?;
    for (path, corpus) in [(&cfg.paths.dataset, &train), (&cfg.paths.test_dataset, &test)] {
        ensure_parent(path)?;
        write_dataset(path, corpus)?;
    }
    Ok(CorpusSummary {
        train_utterances: train.utterances.len(),
        train_frames: train.total_frames(),
        test_utterances: test.utterances.len(),
        test_frames: test.total_frames(),
        speakers: cfg.codec.speaker_count,
    })
}

pub fn latest_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("latest.ckpt")
}

pub fn final_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("final.ckpt")
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.reports.join("metrics.jsonl")
}

/// Trains on the configured dataset. With `resume`, continues from the latest
/// checkpoint when one exists; otherwise starts fresh and truncates the metrics file.
pub fn cmd_train(cfg: &RunConfig, resume: bool, stop_at: Option<usize>, on_metrics: impl FnMut(&MetricsRecord)) -> Result<TrainState> {
    let corpus = read_dataset(&cfg.paths.dataset)?;
    if corpus.config != cfg.codec {
        return Err(Error::Config(format!(
            "dataset {} was generated with a different codec config",
            cfg.paths.dataset.display()
        )));
    }
    fs::create_dir_all(&cfg.paths.checkpoints).map_err(|e| Error::io(&cfg.paths.checkpoints, e))?;
    fs::create_dir_all(&cfg.paths.reports).map_err(|e| Error::io(&cfg.paths.reports, e))?;
    let latest = latest_checkpoint(cfg);
    let metrics = metrics_path(cfg);
    let (model, training, state) = if resume && latest.exists() {
        let ck = load_checkpoint(&latest)?;
        if ck.model_config != cfg.model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        // keep the schedule the run started with so resumed steps match an uninterrupted run
        (ck.model, ck.training, ck.state)
    } else {
        if metrics.exists() {
            fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
        }
        let (model, params) = ArchiTts::build::<f32>(&cfg.model, cfg.training.seed)?;
        (model, cfg.training.clone(), TrainState::new(params))
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(cfg.paths.checkpoints.clone()),
        metrics_path: Some(metrics),
        stop_at,
    };
    train(&model, &corpus, &training, state, &opts, on_metrics)
}

/// Loads a checkpoint and returns the model with the selected weights.
pub fn load_weights(path: &Path, weights: Weights) -> Result<(ArchiTts, ParamSet<f32>)> {
    let ck = load_checkpoint(path)?;
    let params = match weights {
        Weights::Ema => ck.state.ema,
        Weights::Raw => ck.state.params,
    };
    Ok((ck.model, params))
}

const LATENTS_MAGIC: &[u8; 8] = b"ATTSLATS";

/// Latents file: magic, `u32` frames, `u32` dim, little-endian `f32` values.
pub fn write_latents(path: &Path, latents: &LatentSequence) -> Result<()> {
    ensure_parent(path)?;
    let mut buf = Vec::with_capacity(16 + 4 * latents.data().len());
    buf.extend_from_slice(LATENTS_MAGIC);
    buf.extend_from_slice(&(latents.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(latents.dim() as u32).to_le_bytes());
    for v in latents.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<LatentSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != LATENTS_MAGIC {
        return Err(bad("not a latents file"));
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * frames * dim {
        return Err(bad("length does not match header"));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    LatentSequence::new(dim, data)
}

fn find_utterance(cfg: &RunConfig, id: u32) -> Result<Utterance> {
    for path in [&cfg.paths.test_dataset, &cfg.paths.dataset] {
        if path.exists() {
            if let Some(u) = read_dataset(path)?.get(id) {
                return Ok(u.clone());
            }
        }
    }
    Err(Error::Lookup(format!("utterance {id} not found in the test or train dataset")))
}

pub struct SynthOutput {
    pub report: SynthesisReport,
    pub latents_path: PathBuf,
    pub report_path: PathBuf,
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<SynthOutput> {
    let plan = cfg.sampler.plan()?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| final_checkpoint(cfg));
    let (model, params) = load_weights(&ckpt, a.plan.weights)?;
    let codec = LatentCodec::new(cfg.codec.clone())?;
    let utt = find_utterance(cfg, a.ref_id)?;
    let (ref_latents, ref_tokens, gen_tokens, reference) = match &a.gen_tokens {
        Some(ids) => {
            let gen = TokenSequence(ids.clone());
            if gen.is_empty() || ids.iter().any(|&t| t as usize >= cfg.codec.vocab_size) {
                return Err(Error::Validation(format!("gen tokens must be non-empty ids below {}", cfg.codec.vocab_size)));
            }
            (utt.latents.clone(), utt.tokens.clone(), gen, None)
        }
        None => {
            let p = continuation_split(&codec, &utt, cfg.sampler.prompt_fraction)?;
            let reference = p.gen_tokens.clone();
            (p.ref_latents, p.ref_tokens, p.gen_tokens, Some(reference))
        }
    };
    let speaker = codec.speaker(utt.speaker as usize)?;
    let syn = zero_shot_synthesize(&model, &params, &codec, &ref_latents, &ref_tokens, &gen_tokens, speaker.values(), &plan)?;
    let token_error_rate = match &reference {
        Some(r) => Some(token_error_rate(r, &codec.decode_continuation(&ref_latents, &syn.latents))?),
        None => None,
    };
    let report = SynthesisReport {
        sharing_ratio: plan.sharing_ratio(),
        plan,
        duration: syn.duration,
        encoder_evals: syn.encoder_evals,
        decoder_evals: syn.decoder_evals,
        wall_time: syn.wall_time,
        decoded_tokens: syn.decoded.ids().to_vec(),
        token_error_rate,
    };
    let latents_path = a.out.clone().unwrap_or_else(|| cfg.paths.reports.join(format!("synth_{}.lat", a.ref_id)));
    let report_path = latents_path.with_extension("json");
    write_latents(&latents_path, &syn.latents)?;
    write_json(&report_path, &report)?;
    Ok(SynthOutput {
        report,
        latents_path,
        report_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ratio: f64,
    pub nfe: usize,
    pub recompute: usize,
    pub token_error_rate: f64,
    pub raw_token_error_rate: f64,
    pub speaker_cosine: f64,
    pub encoder_evals: usize,
    pub decoder_evals: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub utterances: usize,
    pub rows: Vec<BenchRow>,
    /// Wall time falls strictly as the ratio grows, at every NFE.
    pub wall_time_decreasing: bool,
}

impl BenchTable {
    pub const CSV_HEADER: &'static str = "ratio,nfe,recompute,token_error_rate,raw_token_error_rate,speaker_cosine,encoder_evals,decoder_evals,wall_time";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.ratio, r.nfe, r.recompute, r.token_error_rate, r.raw_token_error_rate, r.speaker_cosine, r.encoder_evals, r.decoder_evals, r.wall_time
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} test utterances\n ratio  nfe    K    TER  spk-cos  enc-evals  wall(s)\n", self.utterances);
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6.3} {:>4} {:>4} {:>6.2}% {:>8.4} {:>10} {:>8.2}\n",
                r.ratio,
                r.nfe,
                r.recompute,
                100.0 * r.token_error_rate,
                r.speaker_cosine,
                r.encoder_evals,
                r.wall_time
            ));
        }
        s
    }
}

/// Evaluates every (ratio, NFE) cell on the same utterances and seeds.
#[allow(clippy::too_many_arguments)]
pub fn bench_sharing(
    model: &ArchiTts,
    params: &ParamSet<f32>,
    codec: &LatentCodec,
    utterances: &[Utterance],
    base: &SamplerPlan,
    ratios: &[f64],
    nfes: &[usize],
    prompt_fraction: f64,
) -> Result<BenchTable> {
    if utterances.is_empty() {
        return Err(Error::Validation("bench split is empty".into()));
    }
    let mut ratios = ratios.to_vec();
    ratios.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for &nfe in nfes {
        for &ratio in &ratios {
            let plan = SamplerPlan { nfe, ..base.clone() }.with_sharing_ratio(ratio)?;
            let s = evaluate_continuations(model, params, codec, utterances, &plan, prompt_fraction)?;
            rows.push(BenchRow {
                ratio,
                nfe,
                recompute: plan.recompute,
                token_error_rate: s.ter,
                raw_token_error_rate: s.raw_ter,
                speaker_cosine: s.speaker_cosine,
                encoder_evals: s.encoder_evals,
                decoder_evals: s.decoder_evals,
                wall_time: s.wall_time,
            });
        }
    }
    let wall_time_decreasing = nfes.iter().all(|&n| {
        let cells: Vec<&BenchRow> = rows.iter().filter(|r| r.nfe == n).collect();
        cells.windows(2).all(|w| w[1].recompute == w[0].recompute || w[1].wall_time < w[0].wall_time)
    });
    Ok(BenchTable {
        utterances: utterances.len(),
        rows,
        wall_time_decreasing,
    })
}

pub fn cmd_bench_sharing(cfg: &RunConfig, checkpoint: &Path, weights: Weights) -> Result<BenchTable> {
    let (model, params) = load_weights(checkpoint, weights)?;
    let codec = LatentCodec::new(cfg.codec.clone())?;
    let test = read_dataset(&cfg.paths.test_dataset)?;
    let n = cfg.bench.utterances.unwrap_or(test.utterances.len()).min(test.utterances.len());
    let table = bench_sharing(
        &model,
        &params,
        &codec,
        &test.utterances[..n],
        &cfg.sampler.plan()?,
        &cfg.bench.ratios,
        &cfg.bench.nfe,
        cfg.sampler.prompt_fraction,
    )?;
    write_json(&cfg.paths.reports.join("bench_sharing.json"), &table)?;
    let csv = cfg.paths.reports.join("bench_sharing.csv");
    let mut f = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    f.write_all(table.to_csv().as_bytes()).map_err(|e| Error::io(&csv, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests;
