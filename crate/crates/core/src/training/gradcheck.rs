//! Whole-objective gradient check on a tiny double-precision model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{item_losses_on_tape, ItemGraph, TrainingConfig, TrainingItem};
use crate::codec::{CodecConfig, LatentCodec, TokenSequence, Utterance};
use crate::error::Result;
use crate::model::{ArchiTts, ModelConfig};
use crate::numerics::{finite_difference_grad, relative_error, ParamSet, Tape};

pub const OBJECTIVE_TERMS: [&str; 4] = ["cfm", "direction", "ctc", "total"];

/// Gives zero-initialized tensors deterministic non-zero values so every
/// path through the network carries gradient.
pub fn perturb_zero_inits(params: &mut ParamSet<f64>) {
    for (k, t) in params.tensors_mut().enumerate() {
        if t.data().iter().all(|&v| v == 0.0) {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (((i * 31 + k * 7) % 17) as f64 - 8.0) * 0.02;
            }
        }
    }
}

/// Reverse-mode vs central differences for each loss term and the total, on
/// three random coordinates of every parameter tensor. Returns the relative
/// error per term, in [`OBJECTIVE_TERMS`] order.
pub fn objective_gradient_errors(seed: u64) -> Result<[f64; 4]> {
    let mcfg = ModelConfig {
        latent_dim: 4,
        speaker_dim: 2,
        vocab_size: 4,
        ..ModelConfig::tiny(16, 2, 2, 1)
    };
    let (model, params32) = ArchiTts::build::<f32>(&mcfg, seed)?;
    let mut params = params32.cast::<f64>();
    perturb_zero_inits(&mut params);
    let codec = LatentCodec::new(CodecConfig {
        vocab_size: 4,
        latent_dim: 4,
        speaker_dim: 2,
        speaker_count: 2,
        ..CodecConfig::default()
    })?;
    let tokens = TokenSequence(vec![1, 3, 0]);
    let utt = Utterance {
        id: 0,
        speaker: 1,
        latents: codec.encode(&tokens, 1, &[2, 2, 3], seed)?,
        tokens,
    };
    let spk = codec.speaker(1)?.values().to_vec();
    let cfg = TrainingConfig {
        p_all_drop: 0.0,
        p_joint_drop: 0.0,
        ..TrainingConfig::default()
    };
    let item = TrainingItem::sample(&utt, &spk, &cfg, seed.wrapping_add(11))?;

    let terms = |g: &ItemGraph| [g.cfm, g.dir, g.ctc, g.total];
    let mut tape = Tape::with_params(&params);
    let g = item_losses_on_tape(&model, &mut tape, &item, cfg.eta)?;
    let nodes = terms(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(k, (_, _, t))| {
            let mut picks: Vec<usize> = (0..3).map(|_| rng.random_range(0..t.len())).collect();
            // a repeated coordinate would be perturbed twice by the finite differences
            picks.sort_unstable();
            picks.dedup();
            picks.into_iter().map(move |i| (k, i))
        })
        .collect();
    let ids: Vec<_> = params.ids().collect();
    let mut errors = [0.0; 4];
    for (term, &node) in nodes.iter().enumerate() {
        let grads = tape.backward(node)?;
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&(k, i)| tape.param_grad(&grads, ids[k]).map_or(0.0, |g| g[i]))
            .collect();
        let x0: Vec<f64> = coords.iter().map(|&(k, i)| params.get(ids[k]).data()[i]).collect();
        let numeric = finite_difference_grad(
            |x: &[f64]| -> Result<f64> {
                let mut p = params.clone();
                for (&(k, i), &v) in coords.iter().zip(x) {
                    p.get_mut(ids[k]).data_mut()[i] = v;
                }
                let mut t = Tape::with_params(&p);
                let g = item_losses_on_tape(&model, &mut t, &item, cfg.eta)?;
                Ok(t.scalar_value(terms(&g)[term]))
            },
            &x0,
            1e-6,
        )?;
        errors[term] = relative_error(&analytic, &numeric);
    }
    Ok(errors)
}
