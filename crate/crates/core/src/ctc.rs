//! Connectionist Temporal Classification.
//!
//! Blank is label 0; codec token `k` is CTC label `k + 1`. The loss is the
//! negative log of the total probability of all blank-augmented alignments
//! that collapse to the target, computed with the extended-label forward
//! recursion in log space. The backward recursion yields per-frame label
//! occupancies, which are exactly the gradient with respect to the
//! log-probabilities.

use rand::Rng;

use crate::codec::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

pub const BLANK: u32 = 0;

/// Frame log-probabilities (rows normalized) and a blank-free target.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcInstance {
    frames: usize,
    vocab: usize,
    log_probs: Vec<f64>,
    target: Vec<u32>,
}

impl CtcInstance {
    pub fn new(frames: usize, vocab: usize, log_probs: Vec<f64>, target: Vec<u32>) -> Result<Self> {
        if log_probs.len() != frames * vocab {
            return Err(Error::dim("CtcInstance", format!("{frames}x{vocab}"), log_probs.len()));
        }
        if vocab < 2 {
            return Err(Error::Validation("CTC needs blank plus at least one label".into()));
        }
        if let Some(&l) = target.iter().find(|&&l| l == BLANK || l as usize >= vocab) {
            return Err(Error::Validation(format!("target label {l} must be in [1, {vocab})")));
        }
        for (t, row) in log_probs.chunks(vocab).enumerate() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("frame {t} probabilities sum to {s}")));
            }
        }
        Ok(Self {
            frames,
            vocab,
            log_probs,
            target,
        })
    }

    /// Instance from probabilities (taking logs).
    pub fn from_probs(frames: usize, vocab: usize, probs: &[f64], target: Vec<u32>) -> Result<Self> {
        Self::new(frames, vocab, probs.iter().map(|p| p.ln()).collect(), target)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn target(&self) -> &[u32] {
        &self.target
    }

    fn lp(&self, t: usize, k: u32) -> f64 {
        self.log_probs[t * self.vocab + k as usize]
    }
}

/// Minimum frames needed to emit `target`: one per label plus a blank between repeats.
pub fn required_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended(target: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Loss and gradient with respect to the log-probabilities (row-major `T × V`).
pub fn ctc_loss_and_grad(inst: &CtcInstance) -> Result<(f64, Vec<f64>)> {
    let t_len = inst.frames;
    let need = required_frames(&inst.target);
    if t_len < need || t_len == 0 {
        return Err(Error::InfeasibleAlignment {
            target_len: inst.target.len(),
            frames: t_len,
            required: need.max(1),
        });
    }
    let ext = extended(&inst.target);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = inst.lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = inst.lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + inst.lp(t, ext[s]) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 { lse2(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment {
            target_len: inst.target.len(),
            frames: t_len,
            required: need,
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + inst.lp(t + 1, ext[s]);
            if s + 1 < s_len {
                b = lse2(b, beta[next + s + 1] + inst.lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, beta[next + s + 2] + inst.lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    let v = inst.vocab;
    let mut occ = vec![ninf; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            let k = ext[s] as usize;
            occ[t * v + k] = lse2(occ[t * v + k], ab);
        }
    }
    let grad = occ.into_iter().map(|o| -(o - log_p).exp()).collect();
    Ok((-log_p, grad))
}

pub fn ctc_loss(inst: &CtcInstance) -> Result<f64> {
    ctc_loss_and_grad(inst).map(|r| r.0)
}

/// Collapses a frame-label path: merge repeats, then drop blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Exhaustive marginalization over all `Vᵀ` label paths. Limited to `T ≤ 8`, `V ≤ 4`.
pub fn ctc_brute_force(inst: &CtcInstance) -> Result<f64> {
    if inst.frames > 8 || inst.vocab > 4 {
        return Err(Error::EnumerationBound(format!(
            "T={} V={} exceeds T<=8, V<=4",
            inst.frames, inst.vocab
        )));
    }
    let (t_len, v) = (inst.frames, inst.vocab);
    let total = v.pow(t_len as u32);
    let mut path = vec![0u32; t_len];
    let mut prob = 0.0f64;
    for code in 0..total {
        let mut c = code;
        for p in path.iter_mut() {
            *p = (c % v) as u32;
            c /= v;
        }
        if collapse(&path) == inst.target {
            prob += path.iter().enumerate().map(|(t, &k)| inst.lp(t, k)).sum::<f64>().exp();
        }
    }
    Ok(-prob.ln())
}

/// Per-frame argmax, collapse repeats, strip blanks. Returns CTC-space labels.
pub fn greedy_decode(log_probs: &[f64], vocab: usize) -> Vec<u32> {
    let path: Vec<u32> = log_probs
        .chunks(vocab)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as u32
        })
        .collect();
    collapse(&path)
}

/// Codec tokens to CTC labels (`+1`).
pub fn to_ctc_labels(tokens: &TokenSequence) -> Vec<u32> {
    tokens.ids().iter().map(|t| t + 1).collect()
}

/// CTC labels back to codec tokens (`-1`); blanks are dropped.
pub fn from_ctc_labels(labels: &[u32]) -> TokenSequence {
    TokenSequence(labels.iter().filter(|&&l| l != BLANK).map(|l| l - 1).collect())
}

/// Random normalized instance with `T = frames`, `V = vocab` and a target of
/// `target_len` non-blank labels (possibly infeasible).
pub fn random_instance(rng: &mut impl Rng, frames: usize, vocab: usize, target_len: usize) -> CtcInstance {
    let mut lp = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        lp.extend(logits.iter().map(|x| x - lse));
    }
    let target = (0..target_len).map(|_| rng.random_range(1..vocab as u32)).collect();
    CtcInstance {
        frames,
        vocab,
        log_probs: lp,
        target,
    }
}

/// CTC loss of a `T × V` log-probability node as a differentiable scalar.
pub fn ctc_loss_on_tape<F: Scalar>(tape: &mut Tape<'_, F>, log_probs: Var, target: &[u32]) -> Result<Var> {
    let (t_len, v) = tape.shape(log_probs);
    let lp: Vec<f64> = tape.value(log_probs).iter().map(|x| x.as_f64()).collect();
    // rows come from log_softmax; skip the normalization re-check done by `CtcInstance::new`
    let inst = CtcInstance {
        frames: t_len,
        vocab: v,
        log_probs: lp,
        target: target.to_vec(),
    };
    if let Some(&l) = target.iter().find(|&&l| l == BLANK || l as usize >= v) {
        return Err(Error::Validation(format!("target label {l} must be in [1, {v})")));
    }
    let (loss, grad) = ctc_loss_and_grad(&inst)?;
    let grad = grad.into_iter().map(F::from_f64_lossy).collect();
    tape.precomputed(F::from_f64_lossy(loss), vec![(log_probs, grad)])
}
