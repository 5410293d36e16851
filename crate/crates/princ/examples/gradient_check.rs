//! Audit every analytic gradient against central finite differences: the
//! three contrastive/classification losses, the anchor penalty, the
//! distillation loss, and both forward maps (encoder and projection).
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use princ::gradcheck::{self, GradcheckConfig};

fn main() -> princ::Result<()> {
    let cfg = GradcheckConfig::default();
    println!(
        "step {:e}, dims up to {}, {} fixtures per target, tolerance {:e}\n",
        cfg.step, cfg.dim, cfg.fixtures, cfg.tolerance
    );
    let report = gradcheck::run(&cfg)?;
    print!("{report}");
    if report.all_pass() {
        println!("\nall gradients agree with the finite-difference oracle");
        Ok(())
    } else {
        Err(princ::Error::InvalidConfig(
            "gradient check failed".into(),
        ))
    }
}
