//! Training objective and loop: flow-matching and direction losses on the
//! masked span, the auxiliary CTC loss, logit-normal timesteps, condition
//! dropout, AdamW with warmup/decay, gradient clipping and an EMA copy.

mod checkpoint;
mod config;
mod gradcheck;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainingConfig;
pub use gradcheck::{objective_gradient_errors, perturb_zero_inits, OBJECTIVE_TERMS};
pub use optim::{clip_gradients, lr_schedule, AdamW, Ema};

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Corpus, LatentCodec, TokenSequence, Utterance};
use crate::ctc;
use crate::encoder::NullFlags;
use crate::error::{Error, Result};
use crate::model::{to_scalars, ArchiTts, ConditionInputs};
use crate::numerics::{ParamSet, Scalar, Tape, Var};
use crate::rng::{self, stream};

/// Added under the square root of the per-frame velocity norm.
const NORM_EPS: f64 = 1e-12;

/// `x_t = (1 − t)·x0 + t·x1` and the constant path velocity `x1 − x0`.
pub fn interpolate(x0: &[f32], x1: &[f32], t: f64) -> Result<(Vec<f32>, Vec<f32>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Validation(format!("t = {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::dim("interpolate", x1.len(), x0.len()));
    }
    let t32 = t as f32;
    let x_t = x0.iter().zip(x1).map(|(&a, &b)| (1.0 - t32) * a + t32 * b).collect();
    let v = x0.iter().zip(x1).map(|(&a, &b)| b - a).collect();
    Ok((x_t, v))
}

/// `sigmoid(g)` with `g ~ N(0, 1)`.
pub fn sample_timestep(count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            1.0 / (1.0 + (-g).exp())
        })
        .collect()
}

/// Contiguous span of `frames` covering a fraction drawn from `fraction`,
/// never less than `ceil(fraction[0] · frames)` frames, at a random start.
pub fn sample_mask(frames: usize, fraction: [f64; 2], rng: &mut impl Rng) -> Result<Vec<bool>> {
    let [lo, hi] = fraction;
    if frames == 0 {
        return Err(Error::Validation("cannot mask an empty sequence".into()));
    }
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("mask fraction range [{lo}, {hi}] must lie in (0, 1]")));
    }
    let f = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let min_len = (lo * frames as f64).ceil() as usize;
    let len = ((f * frames as f64).round() as usize).clamp(min_len.max(1), frames);
    let start = rng.random_range(0..=frames - len);
    Ok((0..frames).map(|i| i >= start && i < start + len).collect())
}

/// All conditions dropped with `p_all`; otherwise prompt and speaker dropped
/// together with `p_joint`.
pub fn apply_condition_dropout(p_all: f64, p_joint: f64, rng: &mut impl Rng) -> NullFlags {
    if rng.random_bool(p_all) {
        return NullFlags::ALL;
    }
    if rng.random_bool(p_joint) {
        return NullFlags {
            x_ref: true,
            semantic: false,
            speaker: true,
        };
    }
    NullFlags::NONE
}

/// Reference flow losses: mean over masked frames of `‖v − v̂‖²` and of
/// `1 − cos(v, v̂)`.
pub fn flow_losses(v_pred: &[f64], v_hat: &[f64], mask: &[bool], dim: usize) -> Result<(f64, f64)> {
    if v_pred.len() != v_hat.len() || v_pred.len() != mask.len() * dim {
        return Err(Error::dim("flow_losses", mask.len() * dim, v_pred.len()));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::Validation("no masked frames".into()));
    }
    let (mut cfm, mut dir) = (0.0, 0.0);
    for ((p, h), _) in v_pred.chunks(dim).zip(v_hat.chunks(dim)).zip(mask).filter(|(_, &m)| m) {
        cfm += p.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let dot: f64 = p.iter().zip(h).map(|(a, b)| a * b).sum();
        let np = (p.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt();
        let nh = (h.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt();
        dir += 1.0 - dot / (np * nh);
    }
    Ok((cfm / masked as f64, dir / masked as f64))
}

/// Batch-averaged loss terms. `total = cfm + dir + eta·ctc + vq`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cfm: f64,
    pub dir: f64,
    pub ctc: f64,
    pub vq: f64,
    pub total: f64,
    pub eta: f64,
}

/// One fully specified training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    pub frames: usize,
    pub dim: usize,
    pub x1: Vec<f32>,
    pub x0: Vec<f32>,
    /// True on frames to generate.
    pub mask: Vec<bool>,
    pub x_ref: Vec<f32>,
    pub tokens: TokenSequence,
    pub speaker: Vec<f32>,
    pub t: f64,
    pub flags: NullFlags,
    /// Seed of the stream that produced `x0`, `mask`, `t` and `flags`.
    pub seed: u64,
}

impl TrainingItem {
    /// Draws noise, time, mask and dropout flags for `utt` from `seed`.
    pub fn sample(utt: &Utterance, speaker: &[f32], cfg: &TrainingConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream_rng(seed, &[]);
        let frames = utt.latents.frames();
        let dim = utt.latents.dim();
        let x1 = utt.latents.data().to_vec();
        let x0: Vec<f32> = (0..x1.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        let t = sample_timestep(1, &mut r)[0];
        let mask = sample_mask(frames, cfg.mask_fraction, &mut r)?;
        let flags = apply_condition_dropout(cfg.p_all_drop, cfg.p_joint_drop, &mut r);
        let mut x_ref = x1.clone();
        for (row, &m) in x_ref.chunks_mut(dim).zip(&mask) {
            if m {
                row.fill(0.0);
            }
        }
        Ok(Self {
            frames,
            dim,
            x1,
            x0,
            mask,
            x_ref,
            tokens: utt.tokens.clone(),
            speaker: speaker.to_vec(),
            t,
            flags,
            seed,
        })
    }
}

/// Loss nodes of one item.
#[derive(Clone, Copy, Debug)]
pub struct ItemGraph {
    pub v_pred: Var,
    pub cfm: Var,
    pub dir: Var,
    pub ctc: Var,
    pub vq: Option<Var>,
    pub total: Var,
}

/// Masked-frame flow losses on the tape. Unmasked frames are multiplied by
/// an exact zero, so they receive exactly zero gradient.
pub fn flow_losses_on_tape<F: Scalar>(
    tape: &mut Tape<'_, F>,
    v_pred: Var,
    v_hat: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let (frames, d) = tape.shape(v_pred);
    if tape.shape(v_hat) != (frames, d) || mask.len() != frames {
        return Err(Error::dim("flow_losses_on_tape", format!("{frames}x{d}"), format!("{:?}", tape.shape(v_hat))));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::Validation("item has no masked frames".into()));
    }
    let inv = F::from_f64_lossy(1.0 / masked as f64);
    let bit = |m: bool| if m { F::one() } else { F::zero() };
    let mask_col = tape.constant(frames, 1, mask.iter().map(|&m| bit(m)).collect())?;
    let full = mask.iter().flat_map(|&m| std::iter::repeat_n(bit(m), d)).collect();
    let mask_full = tape.constant(frames, d, full)?;

    let diff = tape.sub(v_pred, v_hat)?;
    let diff = tape.mul(diff, mask_full)?;
    let sq = tape.mul(diff, diff)?;
    let cfm = tape.sum(sq);
    let cfm = tape.scale(cfm, inv);

    let vm = tape.mul(v_pred, mask_full)?;
    let prod = tape.mul(vm, v_hat)?;
    let dot = tape.row_sum(prod);
    let vv = tape.mul(vm, vm)?;
    let nv = tape.row_sum(vv);
    let nv = tape.add_scalar(nv, F::from_f64_lossy(NORM_EPS));
    let nv = tape.sqrt(nv);
    let nh: Vec<F> = tape
        .value(v_hat)
        .chunks(d)
        .map(|r| (r.iter().fold(F::zero(), |a, &b| a + b * b) + F::from_f64_lossy(NORM_EPS)).sqrt())
        .collect();
    let nh = tape.constant(frames, 1, nh)?;
    let denom = tape.mul(nv, nh)?;
    let cos = tape.div(dot, denom)?;
    let one_minus = tape.scale(cos, -F::one());
    let one_minus = tape.add_scalar(one_minus, F::one());
    let one_minus = tape.mul(one_minus, mask_col)?;
    let dir = tape.sum(one_minus);
    let dir = tape.scale(dir, inv);
    Ok((cfm, dir))
}

/// Builds the full objective of one item on `tape`.
pub fn item_losses_on_tape<F: Scalar>(model: &ArchiTts, tape: &mut Tape<'_, F>, item: &TrainingItem, eta: f64) -> Result<ItemGraph> {
    let (x_t, v_hat) = interpolate(&item.x0, &item.x1, item.t)?;
    let x_t = tape.constant(item.frames, item.dim, to_scalars(&x_t))?;
    let v_hat = tape.constant(item.frames, item.dim, to_scalars(&v_hat))?;
    let inputs = ConditionInputs {
        x_ref: &item.x_ref,
        tokens: &item.tokens,
        speaker: &item.speaker,
    };
    let (cond, aligned) = model.condition_vars(tape, &inputs, item.frames, item.flags)?;
    let enc = model.encoder.encode(tape, x_t, item.t, cond, item.flags)?;
    let v_pred = model.decoder.decode_velocity(tape, x_t, item.t, enc.h)?;
    let (cfm, dir) = flow_losses_on_tape(tape, v_pred, v_hat, &item.mask)?;

    let lp = model.encoder.ctc_logits(tape, enc.phi)?;
    let ctc = ctc::ctc_loss_on_tape(tape, lp, &ctc::to_ctc_labels(&item.tokens))?;
    let ctc = tape.scale(ctc, F::from_f64_lossy(1.0 / item.tokens.len() as f64));

    let weighted = tape.scale(ctc, F::from_f64_lossy(eta));
    let mut total = tape.add(cfm, dir)?;
    total = tape.add(total, weighted)?;
    let vq = aligned.and_then(|a| a.vq_loss);
    if let Some(vq) = vq {
        total = tape.add(total, vq)?;
    }
    Ok(ItemGraph {
        v_pred,
        cfm,
        dir,
        ctc,
        vq,
        total,
    })
}

/// Weights, EMA copy, optimizer moments and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: ParamSet<f32>) -> Self {
        Self {
            ema: params.clone(),
            optimizer: AdamW::new(&params),
            params,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Mean loss and gradient over `items` with the current weights.
pub fn batch_gradients(
    model: &ArchiTts,
    params: &ParamSet<f32>,
    items: &[TrainingItem],
    eta: f64,
) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
    if items.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut grads: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    let mut loss = LossBreakdown {
        eta,
        ..LossBreakdown::default()
    };
    let scale = 1.0 / items.len() as f32;
    for item in items {
        let mut tape = Tape::with_params(params);
        let g = item_losses_on_tape(model, &mut tape, item, eta)?;
        let total = tape.scalar_value(g.total) as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {total} on item seed {:#x} (t = {}, flags = {:?})",
                item.seed, item.t, item.flags
            )));
        }
        loss.cfm += tape.scalar_value(g.cfm) as f64;
        loss.dir += tape.scalar_value(g.dir) as f64;
        loss.ctc += tape.scalar_value(g.ctc) as f64;
        loss.vq += g.vq.map_or(0.0, |v| tape.scalar_value(v) as f64);
        let scaled = tape.scale(g.total, scale);
        let gr = tape.backward(scaled)?;
        tape.accumulate_param_grads(&gr, &mut grads);
    }
    let n = items.len() as f64;
    loss.cfm /= n;
    loss.dir /= n;
    loss.ctc /= n;
    loss.vq /= n;
    loss.total = loss.cfm + loss.dir + eta * loss.ctc + loss.vq;
    Ok((loss, grads))
}

/// One optimizer step: gradients, clipping, AdamW at the scheduled rate, EMA.
pub fn train_step(model: &ArchiTts, state: &mut TrainState, items: &[TrainingItem], cfg: &TrainingConfig) -> Result<StepReport> {
    let step = state.step + 1;
    let (loss, mut grads) = batch_gradients(model, &state.params, items, cfg.eta)?;
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {step}")));
    }
    let lr = lr_schedule(step, cfg);
    state.optimizer.update(&mut state.params, &grads, lr, cfg)?;
    Ema::update(&mut state.ema, &state.params, cfg.ema_decay);
    state.step = step;
    Ok(StepReport {
        step,
        lr,
        loss,
        grad_norm,
    })
}

/// Batch for `step` (1-based): utterances and per-item seeds depend only on
/// `(seed, step)`, so a resumed run draws the same batches.
pub fn batch_for_step(corpus: &Corpus, codec: &LatentCodec, cfg: &TrainingConfig, step: usize) -> Result<Vec<TrainingItem>> {
    if corpus.utterances.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let mut r = rng::stream_rng(cfg.seed, &[stream::STEP, step as u64]);
    (0..cfg.batch_size)
        .map(|i| {
            let utt = &corpus.utterances[r.random_range(0..corpus.utterances.len())];
            let spk = codec.speaker(utt.speaker as usize)?.values().to_vec();
            let seed = rng::derive(cfg.seed, &[stream::STEP, step as u64, stream::ITEM, i as u64]);
            TrainingItem::sample(utt, &spk, cfg, seed)
        })
        .collect()
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub cfm: f64,
    pub dir: f64,
    pub ctc: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints go to `<dir>/latest.ckpt` and `<dir>/final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Metrics lines are appended here.
    pub metrics_path: Option<PathBuf>,
    /// Stop after this step even if `cfg.steps` is larger (the schedule still uses `cfg.steps`).
    pub stop_at: Option<usize>,
}

/// Runs steps `state.step + 1 ..= cfg.steps`. `on_metrics` sees every logged record.
pub fn train(
    model: &ArchiTts,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    mut state: TrainState,
    opts: &TrainOptions,
    mut on_metrics: impl FnMut(&MetricsRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    let codec = LatentCodec::new(corpus.config.clone())?;
    let start = Instant::now();
    let mut metrics = match &opts.metrics_path {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let last = opts.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    while state.step < last {
        let items = batch_for_step(corpus, &codec, cfg, state.step + 1)?;
        let report = train_step(model, &mut state, &items, cfg)?;
        let step = report.step;
        if step % cfg.log_every == 0 || step == last {
            let rec = MetricsRecord {
                step,
                lr: report.lr,
                cfm: report.loss.cfm,
                dir: report.loss.dir,
                ctc: report.loss.ctc,
                total: report.loss.total,
                grad_norm: report.grad_norm,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let (Some(f), Some(p)) = (metrics.as_mut(), &opts.metrics_path) {
                let line = serde_json::to_string(&rec).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            on_metrics(&rec);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if step % cfg.checkpoint_every == 0 || step == last {
                save_checkpoint(&dir.join("latest.ckpt"), model.config(), cfg, &state)?;
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        if state.step == cfg.steps {
            save_checkpoint(&dir.join("final.ckpt"), model.config(), cfg, &state)?;
        }
    }
    Ok(state)
}
