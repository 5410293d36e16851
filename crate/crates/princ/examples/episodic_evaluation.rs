//! Episodic protocol: 1000 sampled 4-way 1-shot tasks, each scored against
//! prototypes built from that episode's own supports. Reports the mean and
//! standard deviation of per-episode accuracy, plus the novel-only variant.
//!
//! ```bash
//! cargo run --example episodic_evaluation
//! ```

use princ::data::generate_synthetic;
use princ::evaluation::{eval_episodic, make_split, EpisodeSpec};
use princ::training::{prepare_phase2, run_phase1, run_phase2};
use princ::{ModelConfig, Preservation, Rng, TrainConfig, Vocab};

fn main() -> princ::Result<()> {
    let seed = 1;
    let (data, seen, novel) = generate_synthetic(8, 4, 50, &mut Rng::new(seed))?;
    let split = make_split(&data, &seen, &novel, 1, &mut Rng::new(seed))?;
    let vocab = Vocab::build(data.iter().map(|u| u.text.as_str()))?;

    let cfg = TrainConfig {
        preservation: Preservation::Ddkp,
        seed,
        ..TrainConfig::desk()
    };
    let seen_train = split.seen_train_data(&data);
    let (model, _) = run_phase1(
        &seen_train,
        vocab,
        ModelConfig::default(),
        &cfg,
        &mut Rng::new(seed),
    )?;
    let mut rng = Rng::new(seed);
    let joint = split.sample_joint_support(&data, &mut rng)?;
    let (snapshot, memory) = prepare_phase2(&model, &seen_train, &cfg, &mut rng)?;
    let (model, _) = run_phase2(
        &joint,
        model,
        &cfg,
        snapshot.as_ref(),
        memory.as_ref(),
        &mut rng,
    )?;

    let view = model.frozen_view()?;
    let spec = EpisodeSpec::new(4, 1);
    let report = eval_episodic(&view, &data, &split, &spec, &Rng::new(2024))?;
    println!(
        "4-way 1-shot, {} episodes, {} queries: accuracy {:.4} +- {:.4}",
        report.episodes.unwrap(),
        report.total_queries,
        report.episode_accuracy_mean.unwrap(),
        report.episode_accuracy_std.unwrap()
    );

    // restrict episode classes to the novel intents
    let novel_spec = EpisodeSpec {
        novel_only: true,
        ..EpisodeSpec::new(4, 1)
    };
    let novel_report = eval_episodic(&view, &data, &split, &novel_spec, &Rng::new(2024))?;
    println!(
        "novel-only variant: accuracy {:.4} +- {:.4}",
        novel_report.episode_accuracy_mean.unwrap(),
        novel_report.episode_accuracy_std.unwrap()
    );
    Ok(())
}
