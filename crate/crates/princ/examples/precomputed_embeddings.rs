//! Drive evaluation with hidden vectors produced offline instead of the
//! built-in encoder. Anything that maps an utterance to a fixed-size vector
//! can sit behind the [`princ::text::Encoder`] trait; here the "offline
//! model" is simulated by exporting the desk encoder's own vectors to the
//! embedding file format, reloading them, and checking that evaluation
//! through the table matches evaluation through the live encoder exactly.
//!
//! ```bash
//! cargo run --example precomputed_embeddings
//! ```

use princ::data::{generate_synthetic, load_embeddings, save_embeddings};
use princ::evaluation::{eval_nonepisodic, make_split, FrozenView};
use princ::prototypes::PARAM_PROJECTION;
use princ::text::Encoder;
use princ::training::{run_phase1, run_phase2};
use princ::{ModelConfig, Rng, TrainConfig, Vocab};

fn main() -> princ::Result<()> {
    let seed = 4;
    let (data, seen, novel) = generate_synthetic(4, 2, 20, &mut Rng::new(seed))?;
    let split = make_split(&data, &seen, &novel, 2, &mut Rng::new(seed))?;
    let vocab = Vocab::build(data.iter().map(|u| u.text.as_str()))?;
    let cfg = TrainConfig {
        phase1_epochs: 10,
        phase2_epochs: 5,
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
    let (model, _) = run_phase2(&joint, model, &cfg, None, None, &mut rng)?;

    // "offline" export: one hidden vector per dataset index
    let dir = std::env::temp_dir().join("princ_embeddings_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("hidden.txt");
    let hidden_dim = model.cfg.encoder.hidden_dim;
    let rows: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(i, u)| Ok((i, model.hidden(&u.text)?)))
        .collect::<princ::Result<_>>()?;
    save_embeddings(rows, hidden_dim, &path)?;
    println!("wrote {} hidden vectors (h={hidden_dim}) to {}", data.len(), path.display());

    // reload and plug the table in as the encoder
    let table = load_embeddings(&path)?;
    table.check_complete(data.len())?;
    println!("table covers the dataset, hidden_dim {}", table.hidden_dim());

    let projection = &model.params.get(PARAM_PROJECTION)?.value;
    let table_view = FrozenView {
        encoder: table,
        projection,
        store: &model.store,
    };
    let table_report = eval_nonepisodic(&table_view, &data, &split)?;

    let live_view = model.frozen_view()?;
    let live_report = eval_nonepisodic(&live_view, &data, &split)?;

    println!(
        "table-driven accuracy {:.4}, live-encoder accuracy {:.4}",
        table_report.overall_accuracy, live_report.overall_accuracy
    );
    assert_eq!(table_report, live_report);
    println!("identical reports: the encoder is swappable behind the trait");
    Ok(())
}
