//! Zero-shot inference: duration estimation, prompt assembly, a timeshifted
//! Euler solver with classifier-free guidance, and reuse of condition encoder
//! outputs across adjacent steps.

mod eval;

pub use eval::{continuation_split, evaluate_continuations, ContinuationPrompt, EvalSummary, UtteranceResult};

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentSequence, TokenSequence};
use crate::encoder::{ConditionState, NullFlags};
use crate::error::{Error, Result};
use crate::model::{ArchiTts, ConditionInputs};
use crate::numerics::ParamSet;
use crate::rng::{self, stream};

/// Which null set the unconditional guidance branch uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncondMode {
    /// Every condition nulled, as in the all-drop training event.
    #[default]
    AllNull,
    /// Prompt and speaker nulled, semantic features kept.
    PromptSpeaker,
}

impl UncondMode {
    pub fn flags(self) -> NullFlags {
        match self {
            UncondMode::AllNull => NullFlags::ALL,
            UncondMode::PromptSpeaker => NullFlags {
                x_ref: true,
                semantic: false,
                speaker: true,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    /// Solver steps `N`.
    pub nfe: usize,
    /// Encoder recomputations `K`, `1 ≤ K ≤ N`.
    pub recompute: usize,
    pub cfg_strength: f64,
    pub timeshift: f64,
    pub seed: u64,
    #[serde(default)]
    pub uncond: UncondMode,
}

impl Default for SamplerPlan {
    fn default() -> Self {
        Self {
            nfe: 32,
            recompute: 32,
            cfg_strength: 4.0,
            timeshift: 3.0,
            seed: 0,
            uncond: UncondMode::AllNull,
        }
    }
}

impl SamplerPlan {
    /// `K = round(N·(1 − ratio))`, clamped to `[1, N]`.
    pub fn recompute_for_ratio(nfe: usize, sharing_ratio: f64) -> Result<usize> {
        if !(0.0..1.0).contains(&sharing_ratio) {
            return Err(Error::Validation(format!("sharing ratio {sharing_ratio} outside [0, 1)")));
        }
        Ok(((nfe as f64 * (1.0 - sharing_ratio)).round() as usize).clamp(1, nfe.max(1)))
    }

    pub fn with_sharing_ratio(mut self, ratio: f64) -> Result<Self> {
        self.recompute = Self::recompute_for_ratio(self.nfe, ratio)?;
        Ok(self)
    }

    pub fn sharing_ratio(&self) -> f64 {
        1.0 - self.recompute as f64 / self.nfe as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 || self.recompute == 0 || self.recompute > self.nfe {
            return Err(Error::Validation(format!(
                "need 1 <= K <= N, got N={} K={}",
                self.nfe, self.recompute
            )));
        }
        if !(self.cfg_strength >= 0.0) || !(self.timeshift > 0.0) {
            return Err(Error::Validation("cfg_strength must be >= 0 and timeshift > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationEstimate {
    pub d: usize,
    pub t_ref: usize,
    pub l_ref: usize,
    pub l_gen: usize,
}

/// Frames to generate so the prompt's frames-per-token rate is preserved:
/// `⌊L_gen · T_ref / L_ref⌋` in integer arithmetic.
pub fn estimate_duration(t_ref: usize, l_ref: usize, l_gen: usize) -> Result<DurationEstimate> {
    if t_ref == 0 || l_ref == 0 || l_gen == 0 {
        return Err(Error::Validation(format!(
            "duration inputs must be positive, got T_ref={t_ref} L_ref={l_ref} L_gen={l_gen}"
        )));
    }
    let d = (l_gen as u128 * t_ref as u128 / l_ref as u128) as usize;
    Ok(DurationEstimate { d, t_ref, l_ref, l_gen })
}

/// `N + 1` times from 0 to 1: the uniform grid warped by `s·u / (1 + (s − 1)·u)`.
pub fn build_schedule(n: usize, timeshift: f64) -> Result<Vec<f64>> {
    if n == 0 || !(timeshift > 0.0) {
        return Err(Error::Validation(format!("schedule needs N >= 1 and s > 0, got N={n} s={timeshift}")));
    }
    Ok((0..=n)
        .map(|i| {
            if i == n {
                return 1.0;
            }
            let u = i as f64 / n as f64;
            timeshift * u / (1.0 + (timeshift - 1.0) * u)
        })
        .collect())
}

/// `(1 + ω)·v_cond − ω·v_uncond`, elementwise in exactly that form.
pub fn cfg_velocity(v_cond: &[f32], v_uncond: &[f32], omega: f64) -> Result<Vec<f32>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::dim("cfg_velocity", v_cond.len(), v_uncond.len()));
    }
    let w = omega as f32;
    Ok(v_cond.iter().zip(v_uncond).map(|(&c, &u)| (1.0 + w) * c - w * u).collect())
}

/// The `K` steps at which the encoder is recomputed: `⌊j·N/K⌋` for `j < K`.
pub fn plan_sharing(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Validation(format!("need 1 <= K <= N, got N={n} K={k}")));
    }
    Ok((0..k).map(|j| j * n / k).collect())
}

/// For every step, the recompute step whose encoder output it uses.
pub fn sharing_sources(n: usize, k: usize) -> Result<Vec<usize>> {
    let recompute = plan_sharing(n, k)?;
    let mut out = Vec::with_capacity(n);
    let mut next = 0;
    let mut current = 0;
    for i in 0..n {
        if next < recompute.len() && recompute[next] == i {
            current = i;
            next += 1;
        }
        out.push(current);
    }
    Ok(out)
}

/// Guidance branch of an encoder call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// A velocity field split into a cacheable condition pass and a cheap decode.
pub trait FlowModel {
    type State;

    fn encode(&mut self, x: &[f32], t: f64, branch: Branch) -> Result<Self::State>;

    fn decode(&mut self, x: &[f32], t: f64, state: &Self::State) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub latents: Vec<f32>,
    pub encoder_evals: usize,
    pub decoder_evals: usize,
}

/// Seeded standard Gaussian start state.
pub fn initial_noise(len: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream_rng(seed, &[stream::SAMPLE]);
    (0..len).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn euler_step(x: &mut [f32], v: &[f32], dt: f64, step: usize) -> Result<()> {
    let dt = dt as f32;
    for (x, &v) in x.iter_mut().zip(v) {
        *x += dt * v;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampler state at step {step}")));
    }
    Ok(())
}

/// Integrates from seeded noise at `t = 0` to `t = 1`, recomputing the encoder
/// only on the steps chosen by [`plan_sharing`].
pub fn sample<M: FlowModel>(model: &mut M, len: usize, plan: &SamplerPlan) -> Result<SampleOutput> {
    plan.validate()?;
    let times = build_schedule(plan.nfe, plan.timeshift)?;
    let recompute = plan_sharing(plan.nfe, plan.recompute)?;
    let mut x = initial_noise(len, plan.seed);
    let (mut enc, mut dec) = (0, 0);
    let mut cached: Option<(M::State, M::State)> = None;
    for i in 0..plan.nfe {
        let t = times[i];
        if recompute.contains(&i) {
            let c = model.encode(&x, t, Branch::Conditional)?;
            let u = model.encode(&x, t, Branch::Unconditional)?;
            enc += 2;
            cached = Some((c, u));
        }
        let (c, u) = cached.as_ref().expect("step 0 always recomputes");
        let vc = model.decode(&x, t, c)?;
        let vu = model.decode(&x, t, u)?;
        dec += 2;
        let v = cfg_velocity(&vc, &vu, plan.cfg_strength)?;
        euler_step(&mut x, &v, times[i + 1] - t, i)?;
    }
    Ok(SampleOutput {
        latents: x,
        encoder_evals: enc,
        decoder_evals: dec,
    })
}

/// The same solver with no caching at all; ignores `plan.recompute`.
pub fn sample_uncached<M: FlowModel>(model: &mut M, len: usize, plan: &SamplerPlan) -> Result<Vec<f32>> {
    plan.validate()?;
    let times = build_schedule(plan.nfe, plan.timeshift)?;
    let mut x = initial_noise(len, plan.seed);
    for i in 0..plan.nfe {
        let t = times[i];
        let c = model.encode(&x, t, Branch::Conditional)?;
        let u = model.encode(&x, t, Branch::Unconditional)?;
        let vc = model.decode(&x, t, &c)?;
        let vu = model.decode(&x, t, &u)?;
        let v = cfg_velocity(&vc, &vu, plan.cfg_strength)?;
        euler_step(&mut x, &v, times[i + 1] - t, i)?;
    }
    Ok(x)
}

/// [`ArchiTts`] with frozen weights and fixed conditions, as a [`FlowModel`].
pub struct ConditionedModel<'a> {
    pub model: &'a ArchiTts,
    pub params: &'a ParamSet<f32>,
    pub inputs: ConditionInputs<'a>,
    /// Semantic features, `frames × aligner width`.
    pub z: Vec<f32>,
    pub uncond: UncondMode,
}

impl<'a> ConditionedModel<'a> {
    /// Runs the aligner once for `frames` frames.
    pub fn new(model: &'a ArchiTts, params: &'a ParamSet<f32>, inputs: ConditionInputs<'a>, frames: usize, uncond: UncondMode) -> Result<Self> {
        let z = model.semantic_features(params, inputs.tokens, frames)?;
        Ok(Self {
            model,
            params,
            inputs,
            z,
            uncond,
        })
    }
}

impl FlowModel for ConditionedModel<'_> {
    type State = ConditionState;

    fn encode(&mut self, x: &[f32], t: f64, branch: Branch) -> Result<ConditionState> {
        let flags = match branch {
            Branch::Conditional => NullFlags::NONE,
            Branch::Unconditional => self.uncond.flags(),
        };
        self.model.encode_condition(self.params, x, t, Some(&self.z), &self.inputs, flags)
    }

    fn decode(&mut self, x: &[f32], t: f64, state: &ConditionState) -> Result<Vec<f32>> {
        self.model.decode_velocity(self.params, x, t, state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// The generated region only, `d` frames.
    pub latents: LatentSequence,
    pub decoded: TokenSequence,
    pub duration: DurationEstimate,
    pub encoder_evals: usize,
    pub decoder_evals: usize,
    pub wall_time: f64,
}

/// Continues `ref_latents` with speech for `gen_tokens` in the prompt's voice.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_synthesize(
    model: &ArchiTts,
    params: &ParamSet<f32>,
    codec: &LatentCodec,
    ref_latents: &LatentSequence,
    ref_tokens: &TokenSequence,
    gen_tokens: &TokenSequence,
    speaker: &[f32],
    plan: &SamplerPlan,
) -> Result<Synthesis> {
    let started = Instant::now();
    let dim = model.config().latent_dim;
    if ref_latents.dim() != dim {
        return Err(Error::dim("zero_shot_synthesize", dim, ref_latents.dim()));
    }
    let duration = estimate_duration(ref_latents.frames(), ref_tokens.len(), gen_tokens.len())?;
    let total = ref_latents.frames() + duration.d;
    let tokens = ref_tokens.concat(gen_tokens);
    let mut x_ref = ref_latents.data().to_vec();
    x_ref.resize(total * dim, 0.0);
    let inputs = ConditionInputs {
        x_ref: &x_ref,
        tokens: &tokens,
        speaker,
    };
    let mut field = ConditionedModel::new(model, params, inputs, total, plan.uncond)?;
    let out = sample(&mut field, total * dim, plan)?;
    let latents = LatentSequence::new(dim, out.latents[ref_latents.frames() * dim..].to_vec())?;
    let decoded = codec.decode(&latents);
    Ok(Synthesis {
        latents,
        decoded,
        duration,
        encoder_evals: out.encoder_evals,
        decoder_evals: out.decoder_evals,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Synthesis report written next to the generated latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub plan: SamplerPlan,
    pub sharing_ratio: f64,
    pub duration: DurationEstimate,
    pub encoder_evals: usize,
    pub decoder_evals: usize,
    pub wall_time: f64,
    pub decoded_tokens: Vec<u32>,
    pub token_error_rate: Option<f64>,
}
