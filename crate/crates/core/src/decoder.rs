//! Velocity decoder: a small DiT stack whose per-frame conditioning is the
//! timestep embedding plus the encoder's hidden states `h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::default_mlp_ratio;
use crate::error::{Error, Result};
use crate::nn::{frame_positions, AdaptiveOutput, DitBlock, Linear, TimestepEmbedder};
use crate::numerics::{ParamBuilder, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub head_count: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            model_dim: 128,
            head_count: 4,
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "decoder model_dim {} must be a positive multiple of head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if (self.model_dim / self.head_count) % 2 != 0 {
            return Err(Error::Config("decoder head width must be even for rotary positions".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VelocityDecoder {
    latent_dim: usize,
    model_dim: usize,
    input: Linear,
    time: TimestepEmbedder,
    blocks: Vec<DitBlock>,
    output: AdaptiveOutput,
}

impl VelocityDecoder {
    /// `cond_dim` is the width of the encoder hidden states and must equal `model_dim`.
    pub fn new<F: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, F, R>,
        config: &DecoderConfig,
        latent_dim: usize,
        cond_dim: usize,
        rope_base: f64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        if cond_dim != d {
            return Err(Error::Config(format!(
                "decoder model_dim {d} must equal encoder model_dim {cond_dim}"
            )));
        }
        pb.scope("decoder", |pb| {
            Ok(Self {
                latent_dim,
                model_dim: d,
                input: Linear::new(pb, "input", latent_dim, d, true)?,
                time: TimestepEmbedder::new(pb, "time", d)?,
                blocks: (0..config.blocks)
                    .map(|i| DitBlock::new(pb, &format!("block{i}"), d, config.head_count, config.mlp_ratio, rope_base))
                    .collect::<Result<Vec<_>>>()?,
                output: AdaptiveOutput::new(pb, "output", d, latent_dim)?,
            })
        })
    }

    /// Predicted velocity, same shape as `x_t`.
    pub fn decode_velocity<F: Scalar>(&self, tape: &mut Tape<'_, F>, x_t: Var, t: f64, h: Var) -> Result<Var> {
        let (frames, d) = tape.shape(x_t);
        if d != self.latent_dim {
            return Err(Error::dim("decode_velocity", self.latent_dim, d));
        }
        if tape.shape(h) != (frames, self.model_dim) {
            return Err(Error::Validation(format!(
                "h is {:?}, expected {frames}x{}",
                tape.shape(h),
                self.model_dim
            )));
        }
        let temb = self.time.forward(tape, t)?;
        let temb = tape.broadcast_rows(temb, frames)?;
        let cond = tape.add(temb, h)?;
        let mut x = self.input.forward(tape, x_t)?;
        let pos = frame_positions(frames);
        for block in &self.blocks {
            x = block.forward(tape, x, cond, &pos)?;
        }
        self.output.forward(tape, x, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(perturb: bool) -> (VelocityDecoder, ParamSet<f64>) {
        let cfg = DecoderConfig {
            blocks: 1,
            model_dim: 4,
            head_count: 2,
            mlp_ratio: 2,
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = VelocityDecoder::new(&mut ParamBuilder::new(&mut params, &mut rng), &cfg, 3, 4, 10_000.0).unwrap();
        if perturb {
            for t in params.tensors_mut() {
                if t.data().iter().all(|&v| v == 0.0) {
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        *v = ((i * 29 % 13) as f64 - 6.0) * 0.04;
                    }
                }
            }
        }
        (d, params)
    }

    fn velocity(d: &VelocityDecoder, params: &ParamSet<f64>, x: &[f64], t: f64, h: &[f64]) -> Vec<f64> {
        let frames = x.len() / 3;
        let mut tape = Tape::with_params(params);
        let xv = tape.constant(frames, 3, x.to_vec()).unwrap();
        let hv = tape.constant(frames, 4, h.to_vec()).unwrap();
        let v = d.decode_velocity(&mut tape, xv, t, hv).unwrap();
        tape.value(v).to_vec()
    }

    #[test]
    fn fresh_decoder_predicts_zero_with_latent_shape() {
        let (d, params) = tiny(false);
        for frames in [1usize, 5, 33] {
            let v = velocity(&d, &params, &vec![0.4; frames * 3], 0.3, &vec![0.1; frames * 4]);
            assert_eq!(v.len(), frames * 3);
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn deterministic_finite_and_sensitive_to_h() {
        let (d, params) = tiny(true);
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).sin()).collect();
        let h1: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).cos()).collect();
        let h2: Vec<f64> = h1.iter().map(|v| v + 0.5).collect();
        let a = velocity(&d, &params, &x, 0.6, &h1);
        assert_eq!(a, velocity(&d, &params, &x, 0.6, &h1));
        assert!(a.iter().all(|v| v.is_finite()));
        let b = velocity(&d, &params, &x, 0.6, &h2);
        let diff: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        assert!(diff > 0.0);
        for t in [0.0, 1.0] {
            assert!(velocity(&d, &params, &x, t, &h1).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let (d, params) = tiny(false);
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(3, 3, vec![0.0; 9]).unwrap();
        let h = tape.constant(2, 4, vec![0.0; 8]).unwrap();
        assert!(d.decode_velocity(&mut tape, x, 0.5, h).is_err());
    }

    #[test]
    fn squared_norm_gradient_matches_finite_differences() {
        let (d, params) = tiny(true);
        let x0: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin()).collect();
        let h: Vec<f64> = (0..16).map(|i| (i as f64 * 0.9).cos()).collect();
        let f = |x: &[f64]| -> Result<f64> { Ok(velocity(&d, &params, x, 0.4, &h).iter().map(|v| v * v).sum()) };
        let mut tape = Tape::with_params(&params);
        let xv = tape.input(4, 3, x0.clone()).unwrap();
        let hv = tape.constant(4, 4, h.clone()).unwrap();
        let v = d.decode_velocity(&mut tape, xv, 0.4, hv).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let fd = crate::numerics::finite_difference_grad(f, &x0, 1e-6).unwrap();
        let err = crate::numerics::relative_error(g.wrt(xv).unwrap(), &fd);
        assert!(err < 1e-4, "{err}");
    }
}
