//! Imports backbone atoms from a PDB file into a dataset and builds its graph.
//!
//! cargo run --example import_pdb -- FILE.pdb [protein|rna] [out.jsonl]

use std::path::PathBuf;

use blockfold::io::dataset::Dataset;
use blockfold::io::import_backbone;
use blockfold::training::prepare_samples;
use blockfold::EntityKind;

fn main() -> blockfold::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(path) = args.next().map(PathBuf::from) else {
        eprintln!("usage: import_pdb FILE.pdb [protein|rna] [out.jsonl]");
        std::process::exit(2);
    };
    let entity: EntityKind = match args.next() {
        Some(e) => e.parse()?,
        None => EntityKind::Protein,
    };
    let rec = import_backbone(&path, entity)?;
    println!("{}: {} chains, {} blocks", rec.id, rec.chains.len(), rec.num_blocks());
    for c in &rec.chains {
        let seq: Vec<&str> = c.blocks.iter().map(|b| b.label.as_str()).collect();
        println!("  chain {}: {}", c.chain_id, seq.join(""));
    }

    let mut ds = Dataset::new(entity, entity.default_classes());
    ds.records.push(rec);
    let (samples, skipped) = prepare_samples(&ds, entity.default_k(), 3)?;
    for s in &skipped {
        println!("skipped: {s}");
    }
    if let Some(s) = samples.first() {
        println!("graph: {} kNN edges, {} virtual edges", s.graph.knn_edge_count(), s.graph.virtual_edge_count());
    }
    if let Some(out) = args.next() {
        ds.write(&PathBuf::from(&out))?;
        println!("wrote {out}");
    }
    Ok(())
}
