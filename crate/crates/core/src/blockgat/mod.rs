//! The BlockGAT network: featurizer, optional frame learner, `L` layers and
//! a linear readout over real blocks.

pub mod checkpoint;
pub mod layer;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::featurizer::{
    init_edge_features, init_node_features, rotation_vectors, FeaturizerConfig, FeaturizerParams, FrameLearnerParams,
    FrameMode, GraphInputs,
};
use crate::frame::{Frame, Mat3};
use crate::graph::{BlockGraph, EntityKind};
use crate::params::{Binder, Linear, ParamStore};

pub use layer::{
    apply_dropout, block_gat_layer, ffn_and_edge_update, gated_edge_attention, geometric_interaction, EdgeGeometry,
    LayerCtx, LayerParams, LayerState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockGatConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Virtual atoms decoded per feature in the interaction extractor.
    pub virtual_atoms: usize,
    pub dropout: f64,
    pub n_virtual: usize,
}

impl Default for BlockGatConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            hidden: 128,
            virtual_atoms: 8,
            dropout: 0.05,
            n_virtual: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub entity: EntityKind,
    pub num_classes: usize,
    /// Neighbours per block in the kNN graph.
    pub k: usize,
    pub featurizer: FeaturizerConfig,
    pub gat: BlockGatConfig,
}

impl ModelConfig {
    pub fn for_entity(entity: EntityKind, num_classes: usize) -> Self {
        Self {
            entity,
            num_classes,
            k: entity.default_k(),
            featurizer: FeaturizerConfig::for_entity(entity),
            gat: BlockGatConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gat;
        if g.hidden == 0 || g.virtual_atoms == 0 || self.k == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "hidden, virtual_atoms, k and num_classes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&g.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", g.dropout)));
        }
        self.featurizer.validate(self.entity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from the given seed.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub featurizer: FeaturizerParams,
    pub frame_learner: Option<(LayerParams, FrameLearnerParams)>,
    pub layers: Vec<LayerParams>,
    pub readout: Linear,
}

/// Recorded forward computation.
pub struct ForwardPass {
    pub tape: Tape,
    /// `n_real × C`.
    pub logits: Var,
    /// Attention weights of each main layer, `E × 1`.
    pub attention: Vec<Var>,
    /// Block rotations used by the main stack, `n × 9`.
    pub rotations: Var,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub handles: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let d = config.gat.hidden;
        let m = config.gat.virtual_atoms;
        let featurizer = FeaturizerParams::register(&mut store, config.entity, d, config.gat.n_virtual);
        let frame_learner = match config.featurizer.frame_mode {
            FrameMode::RotationVector | FrameMode::GramSchmidt => {
                let heads = if config.featurizer.frame_mode == FrameMode::GramSchmidt { 2 } else { 1 };
                Some((
                    LayerParams::register(&mut store, "frame_learner.layer", d, m),
                    FrameLearnerParams::register(&mut store, d, heads),
                ))
            }
            _ => None,
        };
        let layers = (0..config.gat.layers)
            .map(|l| LayerParams::register(&mut store, &format!("layers.{l}"), d, m))
            .collect();
        let readout = store.add_linear("readout", d, config.num_classes, false);
        Ok(Self {
            config,
            params: store,
            handles: ModelParams {
                featurizer,
                frame_learner,
                layers,
                readout,
            },
        })
    }

    /// Geometry constants for `graph` under this model's featurizer settings.
    pub fn inputs(&self, graph: &BlockGraph) -> Result<GraphInputs> {
        if graph.entity != self.config.entity {
            return Err(Error::EntityMismatch {
                expected: self.config.entity.to_string(),
                found: graph.entity.to_string(),
            });
        }
        Ok(GraphInputs::new(graph, &self.config.featurizer))
    }

    /// Evaluates the network on a tape.
    pub fn forward(&self, inputs: &GraphInputs, mode: Mode) -> Result<ForwardPass> {
        let mut in_deg = vec![0usize; inputs.n_nodes];
        for &d in inputs.edge_dst.iter() {
            in_deg[d] += 1;
        }
        if let Some(&isolated) = inputs.real.iter().find(|&&i| in_deg[i] == 0) {
            return Err(Error::IsolatedNode(isolated));
        }
        let (dropout, mut rng) = match mode {
            Mode::Eval => (0.0, ChaCha8Rng::seed_from_u64(0)),
            Mode::Train { seed } => (self.config.gat.dropout, ChaCha8Rng::seed_from_u64(seed)),
        };

        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let h = &self.handles;
        let base_rot = tape.leaf(inputs.rotations.clone());

        let rotations = match &h.frame_learner {
            None => base_rot,
            Some((boot, learner)) => {
                let node = init_node_features(&mut tape, &mut binder, &h.featurizer, inputs, base_rot);
                let edge = init_edge_features(&mut tape, &mut binder, &h.featurizer, inputs, base_rot);
                let geometry = EdgeGeometry::new(&mut tape, inputs, base_rot);
                let mut ctx = LayerCtx {
                    tape: &mut tape,
                    binder: &mut binder,
                    inputs,
                    geometry,
                };
                let state = LayerState {
                    node,
                    edge,
                    layer_index: 0,
                };
                let state = apply_dropout(ctx.tape, state, dropout, &mut rng);
                let out = block_gat_layer(&mut ctx, boot, state);
                let z = tape.gather(out.state.node, inputs.real.clone());
                let heads = rotation_vectors(&mut tape, &mut binder, learner, inputs, z);
                let real_rot = match heads.as_slice() {
                    [r] => tape.rotvec_to_rot(*r),
                    [u, v] => tape.gram_schmidt_rot(*u, *v),
                    _ => unreachable!("frame learner has one or two heads"),
                };
                let placed = tape.scatter_add(real_rot, inputs.real.clone(), inputs.n_nodes);
                let mut virt_only = inputs.rotations.clone();
                for &r in inputs.real.iter() {
                    virt_only.row_mut(r).fill(0.0);
                }
                let virt_rot = tape.leaf(virt_only);
                tape.add(placed, virt_rot)
            }
        };

        let node = init_node_features(&mut tape, &mut binder, &h.featurizer, inputs, rotations);
        let edge = init_edge_features(&mut tape, &mut binder, &h.featurizer, inputs, rotations);
        let geometry = EdgeGeometry::new(&mut tape, inputs, rotations);
        let mut ctx = LayerCtx {
            tape: &mut tape,
            binder: &mut binder,
            inputs,
            geometry,
        };
        let mut state = LayerState {
            node,
            edge,
            layer_index: 0,
        };
        let mut attention = Vec::with_capacity(h.layers.len());
        for p in &h.layers {
            state = apply_dropout(ctx.tape, state, dropout, &mut rng);
            let out = block_gat_layer(&mut ctx, p, state);
            state = out.state;
            attention.push(out.attention);
        }
        let real = tape.gather(state.node, inputs.real.clone());
        let logits = binder.linear(&mut tape, &h.readout, real);
        Ok(ForwardPass {
            tape,
            logits,
            attention,
            rotations,
        })
    }

    /// Eval-mode logits for the real blocks of `graph`.
    pub fn predict(&self, graph: &BlockGraph) -> Result<Tensor> {
        let inputs = self.inputs(graph)?;
        Ok(self.forward(&inputs, Mode::Eval)?.logits().clone())
    }

    /// Mean cross-entropy of the real-block labels; gradients are added to
    /// the parameter store. Returns the loss and the logits.
    pub fn backward(&mut self, inputs: &GraphInputs, targets: &[Option<usize>], mode: Mode) -> Result<(f64, Tensor)> {
        self.backward_scaled(inputs, targets, mode, 1.0)
    }

    /// Like [`Model::backward`] for the loss multiplied by `scale`.
    pub fn backward_scaled(
        &mut self,
        inputs: &GraphInputs,
        targets: &[Option<usize>],
        mode: Mode,
        scale: f64,
    ) -> Result<(f64, Tensor)> {
        if targets.len() != inputs.n_real() {
            return Err(Error::Config(format!(
                "{} targets for {} real blocks",
                targets.len(),
                inputs.n_real()
            )));
        }
        if targets.iter().all(Option::is_none) {
            return Err(Error::AllMasked);
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= self.config.num_classes) {
            return Err(Error::Config(format!("label {bad} outside {} classes", self.config.num_classes)));
        }
        let mut pass = self.forward(inputs, mode)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, Arc::from(targets.to_vec()));
        let out = if scale == 1.0 { loss } else { pass.tape.scale(loss, scale) };
        let grads = pass.tape.backward(out);
        grads.accumulate_into(&pass.tape, &mut self.params);
        Ok((pass.tape.value(loss)[(0, 0)], pass.logits().clone()))
    }

    /// Frames of the real blocks as seen by the main layer stack.
    pub fn block_frames(&self, graph: &BlockGraph) -> Result<Vec<Frame>> {
        let inputs = self.inputs(graph)?;
        let pass = self.forward(&inputs, Mode::Eval)?;
        let rot = pass.tape.value(pass.rotations);
        Ok(inputs
            .real
            .iter()
            .map(|&i| {
                let r = rot.row(i);
                let m = Mat3::from_row_slice(r.as_slice().unwrap());
                Frame::new(m, graph.blocks[i].position())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Vec3;
    use crate::graph::{attach_virtual_blocks, build_knn_graph, Atom};
    use crate::featurizer::make_block;
    use rand::Rng;

    fn toy_protein(n: usize, seed: u64) -> BlockGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..n)
            .map(|i| {
                let ca = Vec3::new(i as f64 * 3.8, rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let jitter = |rng: &mut ChaCha8Rng| Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
                let atoms = [jitter(&mut rng), Vec3::zeros(), jitter(&mut rng), jitter(&mut rng)]
                    .iter()
                    .enumerate()
                    .map(|(s, d)| Some(Atom { position: ca + d, element: EntityKind::Protein.slot_element(s), slot: s }))
                    .collect();
                make_block(EntityKind::Protein, atoms, Some(rng.gen_range(0..20))).unwrap()
            })
            .collect();
        attach_virtual_blocks(build_knn_graph(blocks, 4).unwrap(), 2).unwrap()
    }

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::for_entity(EntityKind::Protein, 20);
        c.gat = BlockGatConfig {
            layers: 2,
            hidden: 16,
            virtual_atoms: 3,
            dropout: 0.05,
            n_virtual: 2,
        };
        c
    }

    #[test]
    fn logits_cover_real_blocks_only() {
        let g = toy_protein(7, 1);
        let model = Model::new(small_config(), 3).unwrap();
        let logits = model.predict(&g).unwrap();
        assert_eq!(logits.dim(), (7, 20));
    }

    #[test]
    fn zero_layers_is_readout_of_initial_features() {
        let g = toy_protein(6, 2);
        let mut cfg = small_config();
        cfg.gat.layers = 0;
        let model = Model::new(cfg, 4).unwrap();
        let inputs = model.inputs(&g).unwrap();
        let pass = model.forward(&inputs, Mode::Eval).unwrap();

        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let rot = tape.leaf(inputs.rotations.clone());
        let node = init_node_features(&mut tape, &mut binder, &model.handles.featurizer, &inputs, rot);
        let real = tape.gather(node, inputs.real.clone());
        let logits = binder.linear(&mut tape, &model.handles.readout, real);
        assert_eq!(pass.logits(), tape.value(logits));
    }

    #[test]
    fn residual_identity_with_zero_initialised_branches() {
        let g = toy_protein(8, 5);
        let model = Model::new(small_config(), 6).unwrap();
        let inputs = model.inputs(&g).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let rot = tape.leaf(inputs.rotations.clone());
        let node = init_node_features(&mut tape, &mut binder, &model.handles.featurizer, &inputs, rot);
        let edge = init_edge_features(&mut tape, &mut binder, &model.handles.featurizer, &inputs, rot);
        let geometry = EdgeGeometry::new(&mut tape, &inputs, rot);
        let initial = tape.value(node).clone();
        let mut ctx = LayerCtx { tape: &mut tape, binder: &mut binder, inputs: &inputs, geometry };
        let mut state = LayerState { node, edge, layer_index: 0 };
        for p in &model.handles.layers {
            state = block_gat_layer(&mut ctx, p, state).state;
        }
        assert_eq!(tape.value(state.node), &initial);
    }

    #[test]
    fn isolated_real_block_is_rejected() {
        let g = toy_protein(5, 7);
        let model = Model::new(small_config(), 1).unwrap();
        let mut inputs = model.inputs(&g).unwrap();
        let keep: Vec<usize> = (0..inputs.n_edges()).filter(|&e| inputs.edge_dst[e] != 0).collect();
        let pick = |a: &Arc<[usize]>| -> Arc<[usize]> { keep.iter().map(|&e| a[e]).collect::<Vec<_>>().into() };
        inputs.edge_dst = pick(&inputs.edge_dst);
        inputs.edge_src = pick(&inputs.edge_src);
        assert!(matches!(model.forward(&inputs, Mode::Eval), Err(Error::IsolatedNode(0))));
    }

    #[test]
    fn train_mode_is_deterministic_per_seed() {
        let g = toy_protein(9, 8);
        let model = Model::new(small_config(), 2).unwrap();
        let inputs = model.inputs(&g).unwrap();
        let a = model.forward(&inputs, Mode::Train { seed: 11 }).unwrap().logits().clone();
        let b = model.forward(&inputs, Mode::Train { seed: 11 }).unwrap().logits().clone();
        assert_eq!(a, b);
        let e1 = model.forward(&inputs, Mode::Eval).unwrap().logits().clone();
        let e2 = model.forward(&inputs, Mode::Eval).unwrap().logits().clone();
        assert_eq!(e1, e2);
    }
}
