//! CTC forward-backward against exhaustive path enumeration, plus its gradient
//! against finite differences.

use architts::ctc::{ctc_brute_force, ctc_loss, ctc_loss_and_grad, random_instance, CtcInstance};
use architts::numerics::{finite_difference_grad, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn main() -> architts::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut infeasible = 0;
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(2..=3);
        let u = rng.random_range(0..=3usize.min(t));
        let inst = random_instance(&mut rng, t, v, u);
        let brute = ctc_brute_force(&inst)?;
        match ctc_loss(&inst) {
            Ok(l) => worst = worst.max((l - brute).abs()),
            Err(_) => {
                assert!(brute.is_infinite());
                infeasible += 1;
            }
        }
    }
    println!("200 instances: max |dynamic programming - enumeration| = {worst:.2e}, {infeasible} unreachable targets");

    let inst = random_instance(&mut rng, 6, 3, 2);
    let (loss, grad) = ctc_loss_and_grad(&inst)?;
    let numeric = finite_difference_grad(
        |lp: &[f64]| ctc_loss(&CtcInstance::new(6, 3, lp.to_vec(), inst.target().to_vec())?),
        inst.log_probs(),
        1e-6,
    )?;
    println!("loss {loss:.6}, gradient relative error {:.2e}", relative_error(&grad, &numeric));
    Ok(())
}
