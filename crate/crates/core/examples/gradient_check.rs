//! Reverse-mode gradients against central differences: every tape primitive,
//! then the whole training objective of a tiny double-precision model.

use architts::numerics::primitive_checks;
use architts::training::{objective_gradient_errors, OBJECTIVE_TERMS};

pub fn main() -> architts::Result<()> {
    for case in primitive_checks::cases() {
        let worst = (0..5)
            .map(|seed| primitive_checks::check(&case, seed, 1e-5).map(|r| r.relative_error))
            .collect::<architts::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!("{:<16} {worst:.2e}", case.name);
    }
    let errors = objective_gradient_errors(7)?;
    for (name, err) in OBJECTIVE_TERMS.iter().zip(errors) {
        println!("objective {name:<10} {err:.2e}");
    }
    Ok(())
}
