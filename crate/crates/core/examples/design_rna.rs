//! Trains a small RNA model on synthetic data, saves a checkpoint, reloads it
//! and prints designed sequences next to the native ones.

use blockfold::io::toy::{generate_toy_corpus, ToyConfig};
use blockfold::training::{argmax, prepare_samples};
use blockfold::{Checkpoint, EntityKind, ModelConfig, TaskSpec, TrainConfig, Trainer};

fn main() -> blockfold::Result<()> {
    let mut toy = ToyConfig::new(EntityKind::Rna, 12, 3);
    toy.min_len = 20;
    toy.max_len = 30;
    let train_ds = generate_toy_corpus(&toy)?;
    toy.molecules = 3;
    toy.seed = 4;
    let valid_ds = generate_toy_corpus(&toy)?;

    let mut model = ModelConfig::for_entity(EntityKind::Rna, 4);
    model.k = 10;
    model.gat.layers = 2;
    model.gat.hidden = 24;
    model.gat.virtual_atoms = 4;
    model.gat.n_virtual = 1;
    let (train, _) = prepare_samples(&train_ds, model.k, model.gat.n_virtual)?;
    let (valid, _) = prepare_samples(&valid_ds, model.k, model.gat.n_virtual)?;

    let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 1, epochs: 25, seed: 1, threads: 1 };
    let mut trainer = Trainer::new(model, TaskSpec::for_entity(EntityKind::Rna)?, cfg)?;
    let dir = std::env::temp_dir().join("blockfold-design-rna");
    trainer.fit(&train, &valid, Some(&dir))?;
    println!("best held-out median recovery {:.3}", trainer.state.best_valid_median.unwrap_or(0.0));

    let ck = Checkpoint::load(&dir.join("best.ckpt"))?;
    let net = ck.to_model()?;
    let names = &ck.header.class_names;
    for s in &valid {
        let logits = net.predict(&s.graph)?;
        let designed: String = logits.rows().into_iter().map(|r| names[argmax(r)].as_str()).collect();
        let native: String = s.targets().iter().map(|t| t.map_or("X", |i| names[i].as_str())).collect();
        println!("{}\n  native   {native}\n  designed {designed}", s.id);
    }
    Ok(())
}
