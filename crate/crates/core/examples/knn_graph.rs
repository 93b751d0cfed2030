//! Builds block graphs for a synthetic RNA corpus and prints their shape.
//!
//! cargo run --example knn_graph -- [k] [n_virtual]

use blockfold::graph::EdgeKind;
use blockfold::io::toy::{generate_toy_corpus, ToyConfig};
use blockfold::training::prepare_samples;
use blockfold::EntityKind;

fn main() -> blockfold::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let k = args.first().copied().unwrap_or(8);
    let n_virtual = args.get(1).copied().unwrap_or(3);

    let mut cfg = ToyConfig::new(EntityKind::Rna, 3, 5);
    cfg.min_len = 12;
    cfg.max_len = 20;
    let ds = generate_toy_corpus(&cfg)?;
    let (samples, _) = prepare_samples(&ds, k, n_virtual)?;
    for s in &samples {
        let g = &s.graph;
        let mut by_kind = [0usize; 3];
        for e in &g.edges {
            by_kind[match e.kind {
                EdgeKind::Knn => 0,
                EdgeKind::ToVirtual => 1,
                EdgeKind::FromVirtual => 2,
            }] += 1;
        }
        let deg = g.in_degrees();
        println!(
            "{}: {} blocks + {} virtual, edges knn {} to-virtual {} from-virtual {}, in-degree real {}, virtual {}",
            s.id,
            g.num_real(),
            g.n_virtual,
            by_kind[0],
            by_kind[1],
            by_kind[2],
            deg[0],
            deg[g.num_blocks() - 1]
        );
    }
    Ok(())
}
