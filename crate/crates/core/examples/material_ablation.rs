//! Learned atom frames against identity frames on a synthetic atomic corpus.
//!
//! cargo run --release --example material_ablation -- [epochs] [seeds]

use blockfold::featurizer::FrameMode;
use blockfold::graph::EntityKind;
use blockfold::io::toy::{generate_toy_corpus, ToyConfig};
use blockfold::training::{evaluate, prepare_samples, TaskSpec, TrainConfig, Trainer};
use blockfold::ModelConfig;

fn main() -> blockfold::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(20);
    let seeds = args.get(1).copied().unwrap_or(3) as u64;

    let ds = generate_toy_corpus(&ToyConfig::new(EntityKind::Atomic, 20, 7))?;
    let task = TaskSpec::from_header(&ds.header);
    for mode in [FrameMode::RotationVector, FrameMode::GramSchmidt, FrameMode::Identity] {
        let mut model = ModelConfig::for_entity(EntityKind::Atomic, task.num_classes());
        model.featurizer.frame_mode = mode;
        model.gat.layers = 2;
        model.gat.hidden = 32;
        model.gat.virtual_atoms = 4;
        model.gat.n_virtual = 1;
        let (samples, _) = prepare_samples(&ds, model.k, model.gat.n_virtual)?;
        let mut total = 0.0;
        for seed in 0..seeds {
            let config = TrainConfig {
                learning_rate: 3e-3,
                batch_size: 1,
                epochs,
                seed,
                threads: 1,
            };
            let mut trainer = Trainer::new(model.clone(), task.clone(), config)?;
            trainer.fit(&samples, &samples, None)?;
            let r = evaluate(&trainer.model, &samples, 1)?.median_recovery.unwrap_or(0.0);
            println!("{mode:?} seed {seed}: training recovery {r:.3}");
            total += r;
        }
        println!("{mode:?} mean over {seeds} seeds: {:.3}", total / seeds as f64);
    }
    Ok(())
}
