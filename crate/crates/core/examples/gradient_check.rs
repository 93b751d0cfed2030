//! Compares backpropagated gradients of a small model against central
//! finite differences.

use blockfold::featurizer::{make_block, FrameMode};
use blockfold::graph::{attach_virtual_blocks, build_knn_graph, Atom};
use blockfold::training::cross_entropy_loss;
use blockfold::{EntityKind, Mode, Model, ModelConfig};
use nalgebra::Vector3;

fn main() -> blockfold::Result<()> {
    let positions = [[0.0, 0.0, 0.0], [1.9, 0.3, -0.4], [0.2, 2.1, 0.5], [-1.5, 0.8, 1.7], [1.1, -1.6, 2.2], [-0.7, -1.8, -1.1]];
    let blocks = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let atom = Atom { position: Vector3::from(*p), element: 7, slot: 0 };
            make_block(EntityKind::Atomic, vec![Some(atom)], Some(i % 3))
        })
        .collect::<blockfold::Result<Vec<_>>>()?;
    let graph = attach_virtual_blocks(build_knn_graph(blocks, 3)?, 1)?;

    let mut cfg = ModelConfig::for_entity(EntityKind::Atomic, 3);
    cfg.featurizer.frame_mode = FrameMode::RotationVector;
    cfg.gat.layers = 2;
    cfg.gat.hidden = 6;
    cfg.gat.virtual_atoms = 2;
    cfg.gat.n_virtual = 1;
    let mut model = Model::new(cfg, 1)?;
    // freshly initialised residual outputs are zero; perturb so every path carries gradient
    model.params.randomize(2, 0.5);

    let inputs = model.inputs(&graph)?;
    let targets = graph.real_labels();
    model.params.zero_grad();
    model.backward(&inputs, &targets, Mode::Eval)?;
    let analytic = model.params.clone();

    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = analytic.iter().map(|(_, p)| p.name.clone()).collect();
    for name in &names {
        let id = model.params.id(name).expect("registered");
        let idx = (0, 0);
        let orig = model.params.get(id).value[idx];
        let mut loss_at = |v: f64| -> blockfold::Result<f64> {
            model.params.get_mut(id).value[idx] = v;
            let pass = model.forward(&inputs, Mode::Eval)?;
            Ok(cross_entropy_loss(pass.logits(), &targets)?.0)
        };
        let numeric = (loss_at(orig + h)? - loss_at(orig - h)?) / (2.0 * h);
        model.params.get_mut(id).value[idx] = orig;
        let a = analytic.get(id).grad[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    println!("{} tensors checked, worst relative error {:.2e} in {}", names.len(), worst.0, worst.1);
    Ok(())
}
