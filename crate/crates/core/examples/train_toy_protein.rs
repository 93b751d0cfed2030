//! Overfits a 2-layer model on a synthetic protein corpus and reports
//! training and held-out recovery.
//!
//! cargo run --release --example train_toy_protein -- [epochs] [batch] [k] [lr] [seed]

use std::time::Instant;

use blockfold::graph::EntityKind;
use blockfold::io::toy::{generate_toy_corpus, ToyConfig};
use blockfold::training::{evaluate, prepare_samples, TaskSpec, TrainConfig, Trainer};
use blockfold::ModelConfig;

fn main() -> blockfold::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (epochs, batch, k, lr) = (arg(0, 25.0) as usize, arg(1, 1.0) as usize, arg(2, 12.0) as usize, arg(3, 3e-3));

    let mut model = ModelConfig::for_entity(EntityKind::Protein, 20);
    model.k = k;
    model.gat.layers = 2;
    model.gat.hidden = 32;
    model.gat.virtual_atoms = 4;
    model.gat.n_virtual = 1;

    let train_ds = generate_toy_corpus(&ToyConfig::new(EntityKind::Protein, 20, 1))?;
    let valid_ds = generate_toy_corpus(&ToyConfig::new(EntityKind::Protein, 10, 2))?;
    let (train, _) = prepare_samples(&train_ds, model.k, model.gat.n_virtual)?;
    let (valid, _) = prepare_samples(&valid_ds, model.k, model.gat.n_virtual)?;

    let config = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        seed: arg(4, 0.0) as u64,
        threads: 1,
    };
    let mut trainer = Trainer::new(model, TaskSpec::for_entity(EntityKind::Protein)?, config)?;
    let start = Instant::now();
    for rec in trainer.fit(&train, &valid, None)? {
        println!(
            "epoch {:>3} {:<5} loss {:.4} median recovery {:.3}",
            rec.epoch,
            rec.split,
            rec.loss,
            rec.median_recovery.unwrap_or(f64::NAN)
        );
    }
    let train_report = evaluate(&trainer.model, &train, 1)?;
    let valid_report = evaluate(&trainer.model, &valid, 1)?;
    println!(
        "{} steps in {:.1}s; train median {:.3}, held-out median {:.3}",
        trainer.state.steps_done,
        start.elapsed().as_secs_f64(),
        train_report.median_recovery.unwrap_or(0.0),
        valid_report.median_recovery.unwrap_or(0.0)
    );
    Ok(())
}
