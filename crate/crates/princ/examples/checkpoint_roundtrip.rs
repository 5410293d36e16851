//! Persist a trained model with its replay memory and hyperparameters to
//! the binary checkpoint format, reload it, and verify the round trip is
//! bit-exact.
//!
//! ```bash
//! cargo run --example checkpoint_roundtrip
//! ```

use princ::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint};
use princ::data::generate_synthetic;
use princ::evaluation::make_split;
use princ::training::{prepare_phase2, run_phase1, run_phase2};
use princ::{ModelConfig, Preservation, Rng, TrainConfig, Vocab};

fn main() -> princ::Result<()> {
    let seed = 3;
    let (data, seen, novel) = generate_synthetic(4, 2, 20, &mut Rng::new(seed))?;
    let split = make_split(&data, &seen, &novel, 2, &mut Rng::new(seed))?;
    let vocab = Vocab::build(data.iter().map(|u| u.text.as_str()))?;
    let cfg = TrainConfig {
        phase1_epochs: 10,
        phase2_epochs: 5,
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

    let ckpt = Checkpoint {
        model,
        snapshot: None,
        memory,
        config: cfg,
    };

    let bytes = to_bytes(&ckpt);
    println!(
        "checkpoint: {} bytes ({} tensors, {} prototypes, {} vocab tokens, memory of {})",
        bytes.len(),
        ckpt.model.params.len(),
        ckpt.model.store.len(),
        ckpt.model.vocab.len(),
        ckpt.memory.as_ref().map_or(0, |m| m.len()),
    );

    let reloaded = from_bytes(&bytes)?;
    assert_eq!(to_bytes(&reloaded), bytes);
    assert_eq!(reloaded.model.checksum(), ckpt.model.checksum());
    println!("in-memory round trip is bit-exact");

    let dir = std::env::temp_dir().join("princ_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.princ");
    save_checkpoint(&ckpt, &path)?;
    let from_disk = load_checkpoint(&path)?;
    assert_eq!(to_bytes(&from_disk), bytes);
    println!("file round trip is bit-exact: {}", path.display());
    Ok(())
}
