//! Reverse-mode vs finite-difference checks for every tape primitive.
//!
//! Each check draws random double-precision inputs, reduces the primitive's
//! output to a scalar through a fixed random projection, and compares the
//! tape gradient with central differences over all input coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_difference_grad, relative_error};
use super::tape::{Tape, Var};
use crate::error::Result;

type Build = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

/// One primitive under test: input shapes, an optional positivity requirement, and the graph.
pub struct PrimitiveCase {
    pub name: &'static str,
    shapes: &'static [(usize, usize)],
    positive: bool,
    build: Build,
}

const ROPE_POS: [f64; 3] = [0.0, 1.5, 4.0];

pub fn cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase { name: "matmul", shapes: &[(3, 4), (4, 2)], positive: false, build: |t, v| t.matmul(v[0], v[1]) },
        PrimitiveCase {
            name: "attention",
            shapes: &[(3, 4), (3, 4), (3, 4)],
            positive: false,
            build: |t, v| t.attention(v[0], v[1], v[2], 2, false),
        },
        PrimitiveCase {
            name: "attention_causal",
            shapes: &[(3, 2), (3, 2), (3, 2)],
            positive: false,
            build: |t, v| t.attention(v[0], v[1], v[2], 1, true),
        },
        PrimitiveCase {
            name: "layer_norm",
            shapes: &[(2, 4), (1, 4), (1, 4)],
            positive: false,
            build: |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5),
        },
        PrimitiveCase { name: "gelu", shapes: &[(2, 3)], positive: false, build: |t, v| Ok(t.gelu(v[0])) },
        PrimitiveCase {
            name: "depthwise_conv1d",
            shapes: &[(5, 2), (3, 2)],
            positive: false,
            build: |t, v| t.depthwise_conv1d(v[0], v[1]),
        },
        PrimitiveCase {
            name: "embedding",
            shapes: &[(4, 3)],
            positive: false,
            build: |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]),
        },
        PrimitiveCase { name: "softmax", shapes: &[(2, 4)], positive: false, build: |t, v| t.softmax(v[0]) },
        PrimitiveCase { name: "log_softmax", shapes: &[(2, 4)], positive: false, build: |t, v| t.log_softmax(v[0]) },
        PrimitiveCase {
            name: "rope",
            shapes: &[(3, 4)],
            positive: false,
            build: |t, v| t.rope(v[0], 1, &ROPE_POS, 100.0),
        },
        PrimitiveCase {
            name: "elementwise",
            shapes: &[(2, 3), (2, 3), (2, 3)],
            positive: true,
            build: |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, v[1])?;
                let d = t.div(c, v[2])?;
                let e = t.sqrt(v[0]);
                let f = t.scale(e, 0.7);
                let g = t.add_scalar(f, 0.3);
                t.add(d, g)
            },
        },
        PrimitiveCase {
            name: "row_broadcast",
            shapes: &[(3, 2), (1, 2), (1, 2)],
            positive: false,
            build: |t, v| {
                let a = t.mul_row(v[0], v[1])?;
                let b = t.add_row(a, v[2])?;
                let c = t.broadcast_rows(v[2], 3)?;
                t.mul(b, c)
            },
        },
        PrimitiveCase {
            name: "reductions",
            shapes: &[(3, 2)],
            positive: false,
            build: |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let r = t.row_sum(sq);
                let s = t.sum(r);
                let m = t.mean(v[0])?;
                let sm = t.mul(s, m)?;
                Ok(sm)
            },
        },
        PrimitiveCase {
            name: "concat_slice",
            shapes: &[(2, 3), (2, 1), (1, 4)],
            positive: false,
            build: |t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let r = t.concat_rows(&[c, v[2]])?;
                let s = t.slice_rows(r, 1, 2)?;
                let sc = t.slice_cols(s, 1, 2)?;
                t.mul(sc, sc)
            },
        },
    ]
}

/// Outcome of one primitive check.
#[derive(Clone, Debug)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub seed: u64,
    pub relative_error: f64,
}

fn scalar_of(tape: &mut Tape<'_, f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let w = tape.constant(r, c, weights[..r * c].to_vec())?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Runs one primitive at one seed, returning the relative gradient error.
pub fn check(case: &PrimitiveCase, seed: u64, eps: f64) -> Result<PrimitiveReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|&(r, c)| {
            (0..r * c)
                .map(|_| {
                    if case.positive {
                        rng.random_range(0.5..2.0)
                    } else {
                        rng.random_range(-1.5..1.5)
                    }
                })
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();

    let eval = |flat: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for &(r, c) in case.shapes {
            vars.push(tape.input(r, c, flat[off..off + r * c].to_vec())?);
            off += r * c;
        }
        let out = (case.build)(&mut tape, &vars)?;
        let loss = scalar_of(&mut tape, out, &weights)?;
        let value = tape.scalar_value(loss);
        let mut grad = Vec::new();
        if want_grad {
            let g = tape.backward(loss)?;
            for (&v, &(r, c)) in vars.iter().zip(case.shapes) {
                match g.wrt(v) {
                    Some(gv) => grad.extend_from_slice(gv),
                    None => grad.extend(std::iter::repeat_n(0.0, r * c)),
                }
            }
        }
        Ok((value, grad))
    };

    let flat: Vec<f64> = inputs.concat();
    let (_, analytic) = eval(&flat, true)?;
    let numeric = finite_difference_grad(|x| eval(x, false).map(|r| r.0), &flat, eps)?;
    Ok(PrimitiveReport {
        name: case.name,
        seed,
        relative_error: relative_error(&analytic, &numeric),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences_on_twenty_seeds() {
        for case in cases() {
            for seed in 0..20 {
                let r = check(&case, seed, 1e-5).unwrap();
                assert!(
                    r.relative_error < 1e-5,
                    "{} seed {} rel err {:e}",
                    r.name,
                    seed,
                    r.relative_error
                );
            }
        }
    }
}
