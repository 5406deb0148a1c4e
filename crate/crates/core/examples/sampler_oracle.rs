//! The Euler solver on an analytic field, the timeshifted schedule, guidance
//! arithmetic and the encoder-sharing plan.

use architts::sampler::{build_schedule, cfg_velocity, estimate_duration, initial_noise, plan_sharing, sample, Branch, FlowModel, SamplerPlan};

/// `v(x, t) = x`: the exact flow is `x(1) = e·x(0)`.
struct Linear;

impl FlowModel for Linear {
    type State = ();

    fn encode(&mut self, _: &[f32], _: f64, _: Branch) -> architts::Result<()> {
        Ok(())
    }

    fn decode(&mut self, x: &[f32], _: f64, _: &()) -> architts::Result<Vec<f32>> {
        Ok(x.to_vec())
    }
}

pub fn main() -> architts::Result<()> {
    let e = std::f64::consts::E;
    let mut prev: Option<f64> = None;
    for n in [16, 32, 64] {
        let plan = SamplerPlan {
            nfe: n,
            recompute: n,
            cfg_strength: 0.0,
            timeshift: 1.0,
            ..SamplerPlan::default()
        };
        let x0 = initial_noise(8, plan.seed);
        let x1 = sample(&mut Linear, 8, &plan)?.latents;
        let err = x1.iter().zip(&x0).map(|(&a, &b)| (a as f64 - e * b as f64).abs()).sum::<f64>()
            / x0.iter().map(|&b| (e * b as f64).abs()).sum::<f64>();
        match prev {
            Some(p) => println!("N={n:>2}: relative error {err:.4}, ratio to N/2 {:.3}", p / err),
            None => println!("N={n:>2}: relative error {err:.4}"),
        }
        prev = Some(err);
    }

    let ts = build_schedule(8, 3.0)?;
    println!("timeshift 3 schedule: {:?}", ts.iter().map(|t| (t * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("guidance (2, 1, omega 4) -> {:?}", cfg_velocity(&[2.0], &[1.0], 4.0)?);
    println!("duration for T_ref=7, L_ref=3, L_gen=5: {}", estimate_duration(7, 3, 5)?.d);
    let plan = SamplerPlan::default().with_sharing_ratio(0.75)?;
    println!(
        "N=32 at sharing ratio 0.75: K={} recomputes at {:?}",
        plan.recompute,
        plan_sharing(plan.nfe, plan.recompute)?
    );
    Ok(())
}
