//! Compare the three second-phase regimes on identical data at 1-shot:
//! no preservation, parameter anchoring (dakp), and replay with
//! distillation (ddkp). Prints the seen/novel accuracy deltas against the
//! unpreserved baseline, the effect the preservation machinery exists to
//! produce.
//!
//! ```bash
//! cargo run --example preservation_comparison
//! ```

use princ::data::generate_synthetic;
use princ::evaluation::{eval_nonepisodic, forgetting_diagnostics, make_split, EvalReport};
use princ::training::{prepare_phase2, run_phase1, run_phase2};
use princ::{ModelConfig, Preservation, Rng, TrainConfig, Vocab};

fn main() -> princ::Result<()> {
    let seed = 1;
    let (data, seen, novel) = generate_synthetic(8, 4, 50, &mut Rng::new(seed))?;
    let split = make_split(&data, &seen, &novel, 1, &mut Rng::new(seed))?;
    let vocab = Vocab::build(data.iter().map(|u| u.text.as_str()))?;

    let base = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let seen_train = split.seen_train_data(&data);
    let (phase1, _) = run_phase1(
        &seen_train,
        vocab,
        ModelConfig::default(),
        &base,
        &mut Rng::new(seed),
    )?;

    let mut reports: Vec<(Preservation, EvalReport)> = Vec::new();
    for mode in [Preservation::None, Preservation::Dakp, Preservation::Ddkp] {
        let cfg = TrainConfig {
            preservation: mode,
            ..base
        };
        let mut rng = Rng::new(seed);
        let joint = split.sample_joint_support(&data, &mut rng)?;
        let (snapshot, memory) = prepare_phase2(&phase1, &seen_train, &cfg, &mut rng)?;
        let (model, _) = run_phase2(
            &joint,
            phase1.clone(),
            &cfg,
            snapshot.as_ref(),
            memory.as_ref(),
            &mut rng,
        )?;
        let view = model.frozen_view()?;
        let report = eval_nonepisodic(&view, &data, &split)?;
        println!(
            "{mode:<5} joint {:.4}  seen {:.4}  novel {:.4}",
            report.overall_accuracy,
            report.seen_accuracy.unwrap(),
            report.novel_accuracy.unwrap()
        );
        reports.push((mode, report));
    }

    let refs: Vec<(Preservation, &EvalReport)> =
        reports.iter().map(|(m, r)| (*m, r)).collect();
    let comparison = forgetting_diagnostics(&refs)?;
    println!();
    print!("{comparison}");
    Ok(())
}
