//! End-to-end walkthrough: synthesize an intent corpus, learn the seen
//! intents from abundant data, bring in novel intents from five supports
//! each, and score the final model over the joint test set.
//!
//! ```bash
//! cargo run --example two_phase_training
//! ```

use princ::data::generate_synthetic;
use princ::evaluation::{eval_nonepisodic, make_split};
use princ::training::{prepare_phase2, run_phase1, run_phase2};
use princ::{ModelConfig, Preservation, Rng, TrainConfig, Vocab};

fn main() -> princ::Result<()> {
    let seed = 1;

    // a desk-scale corpus: 8 data-rich intents, 4 that arrive later
    let (data, seen, novel) = generate_synthetic(8, 4, 50, &mut Rng::new(seed))?;
    println!(
        "corpus: {} utterances, {} seen + {} novel intents",
        data.len(),
        seen.len(),
        novel.len()
    );

    // 80/20 split per seen intent; 5 pre-selected supports per novel intent
    let split = make_split(&data, &seen, &novel, 5, &mut Rng::new(seed))?;
    let vocab = Vocab::build(data.iter().map(|u| u.text.as_str()))?;

    let cfg = TrainConfig {
        preservation: Preservation::Ddkp,
        seed,
        ..TrainConfig::desk()
    };

    // phase 1: seen intents only
    let seen_train = split.seen_train_data(&data);
    let (model, report) = run_phase1(
        &seen_train,
        vocab,
        ModelConfig::default(),
        &cfg,
        &mut Rng::new(seed),
    )?;
    let last = report.epochs.last().unwrap();
    println!(
        "phase 1: {} epochs in {:.2}s, final loss {:.4} (cls {:.4} ii {:.4} is {:.4})",
        report.epochs.len(),
        report.wall_clock_secs,
        last.total,
        last.loss_cls,
        last.loss_ii,
        last.loss_is
    );

    // phase 2: joint few-shot fine-tuning with replay + distillation
    let mut rng = Rng::new(seed);
    let joint = split.sample_joint_support(&data, &mut rng)?;
    let (snapshot, memory) = prepare_phase2(&model, &seen_train, &cfg, &mut rng)?;
    println!(
        "phase 2: {} joint supports, replay memory of {} utterances",
        joint.len(),
        memory.as_ref().map_or(0, |m| m.len())
    );
    let (model, report) = run_phase2(
        &joint,
        model,
        &cfg,
        snapshot.as_ref(),
        memory.as_ref(),
        &mut rng,
    )?;
    let last = report.epochs.last().unwrap();
    println!(
        "phase 2: {} epochs in {:.2}s, final loss {:.4} (kd {:.4})",
        report.epochs.len(),
        report.wall_clock_secs,
        last.total,
        last.loss_kd
    );
    println!(
        "prototype store now holds {} seen + {} novel intents",
        model.store.seen_count(),
        model.store.novel_count()
    );

    // one pass over the joint test set
    let view = model.frozen_view()?;
    let report = eval_nonepisodic(&view, &data, &split)?;
    println!();
    print!("{}", report.table());
    Ok(())
}
