//! Block frames and the initial invariant node/edge features.
//!
//! Macromolecule blocks get predefined Gram-Schmidt frames from backbone
//! atoms. Atomic blocks start from the identity rotation and have their
//! frames learned by attention over neighbour directions (see
//! [`rotation_vectors`]).
//!
//! Node features pool an MLP over `(slot one-hot, local atom coordinates)`;
//! edge features linearly embed the local coordinates of both blocks' atoms
//! expressed in the receiving block's frame.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frame::{gram_schmidt_frame, Frame, Vec3};
use crate::graph::{Atom, Block, BlockGraph, EdgeKind, EntityKind};
use crate::params::{Binder, Linear, Mlp, ParamId, ParamStore};

/// Distance regulariser inside the neighbour-direction normalisation.
pub const DIRECTION_EPS: f64 = 1e-8;

/// How block rotations are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameMode {
    /// Backbone Gram-Schmidt frames (proteins, RNA).
    Predefined,
    /// Learned axis-angle rotation per atom.
    RotationVector,
    /// Learned pair of directions, orthogonalised.
    GramSchmidt,
    /// Identity rotation everywhere.
    Identity,
}

impl FrameMode {
    pub fn default_for(entity: EntityKind) -> Self {
        if entity.has_predefined_frames() {
            FrameMode::Predefined
        } else {
            FrameMode::RotationVector
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, FrameMode::RotationVector | FrameMode::GramSchmidt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub frame_mode: FrameMode,
    /// Length unit (Å) applied to all coordinates before they enter the network.
    pub coord_scale: f64,
}

impl FeaturizerConfig {
    pub fn for_entity(entity: EntityKind) -> Self {
        Self {
            frame_mode: FrameMode::default_for(entity),
            coord_scale: 10.0,
        }
    }

    pub fn validate(&self, entity: EntityKind) -> Result<()> {
        if self.coord_scale.is_nan() || self.coord_scale <= 0.0 {
            return Err(Error::Config("coord_scale must be positive".into()));
        }
        if entity.has_predefined_frames() && self.frame_mode.is_learned() {
            return Err(Error::Config(format!("{entity} blocks use predefined frames")));
        }
        if !entity.has_predefined_frames() && self.frame_mode == FrameMode::Predefined {
            return Err(Error::Config("atomic blocks have no predefined frame".into()));
        }
        Ok(())
    }
}

fn slot_position(atoms: &[Option<Atom>], kind: EntityKind, name: &str) -> Result<Vec3> {
    let idx = kind.slot_index(name).expect("known slot");
    atoms[idx]
        .map(|a| a.position)
        .ok_or_else(|| Error::DegenerateGeometry(format!("{kind} block is missing atom {name}")))
}

/// Frame at C1 (Cα) with first axis towards C2 (C) and the N atom in the `(e1, e2)` plane.
pub fn build_protein_frame(atoms: &[Option<Atom>]) -> Result<Frame> {
    let k = EntityKind::Protein;
    let n = slot_position(atoms, k, "N")?;
    let ca = slot_position(atoms, k, "C1")?;
    let c = slot_position(atoms, k, "C2")?;
    gram_schmidt_frame(ca, c - ca, n - ca)
}

/// Frame at C1' with first axis towards C4' and O4' in the `(e1, e2)` plane.
pub fn build_rna_frame(atoms: &[Option<Atom>]) -> Result<Frame> {
    let k = EntityKind::Rna;
    let c1 = slot_position(atoms, k, "C1")?;
    let c4 = slot_position(atoms, k, "C4")?;
    let o4 = slot_position(atoms, k, "O4")?;
    gram_schmidt_frame(c1, c4 - c1, o4 - c1)
}

/// Builds a real block with its initial frame. Atomic blocks start at the
/// identity rotation; their rotations are learned by the network.
pub fn make_block(kind: EntityKind, atoms: Vec<Option<Atom>>, label: Option<usize>) -> Result<Block> {
    let frame = match kind {
        EntityKind::Protein => build_protein_frame(&atoms)?,
        EntityKind::Rna => build_rna_frame(&atoms)?,
        EntityKind::Atomic => {
            let a = atoms
                .first()
                .copied()
                .flatten()
                .ok_or_else(|| Error::DegenerateGeometry("atomic block without atom".into()))?;
            Frame::from_translation(a.position)
        }
    };
    Block::new(kind, atoms, frame, label)
}

/// Local coordinates `Rᵀ (x_i - t)` of every present atom of `block`.
pub fn local_atom_coordinates(block: &Block, frame: &Frame) -> Vec<Option<Vec3>> {
    block.atoms.iter().map(|a| a.map(|a| frame.to_local(&a.position))).collect()
}

/// Atom slots of a block for edge features. Virtual blocks expose a single
/// pseudo-atom at their translation in the representative slot.
fn edge_atoms(block: &Block) -> Vec<Option<Vec3>> {
    if block.is_virtual() {
        let mut out = vec![None; block.kind.arity()];
        out[block.kind.representative_slot()] = Some(block.position());
        out
    } else {
        block.atoms.iter().map(|a| a.map(|a| a.position)).collect()
    }
}

/// Raw edge geometry for `s ← t` in `s`'s frame: `2·arity` local coordinates
/// (zero where masked) and the parallel presence mask. Coordinates in Å.
pub fn raw_edge_coordinates(s: &Block, t: &Block, frame_s: &Frame) -> (Vec<f64>, Vec<f64>) {
    let slots: Vec<Option<Vec3>> = edge_atoms(s).into_iter().chain(edge_atoms(t)).collect();
    let mut coords = Vec::with_capacity(slots.len() * 3);
    let mut mask = Vec::with_capacity(slots.len());
    for slot in slots {
        match slot {
            Some(x) => {
                coords.extend(frame_s.to_local(&x).iter());
                mask.push(1.0);
            }
            None => {
                coords.extend([0.0; 3]);
                mask.push(0.0);
            }
        }
    }
    (coords, mask)
}

/// Width of the raw edge vector before embedding.
pub fn raw_edge_width(entity: EntityKind) -> usize {
    let a = entity.arity();
    2 * a * 3 + 2 * a + 3
}

/// Flattens a rotation into a row-major 9-vector.
pub(crate) fn rot_row(f: &Frame) -> [f64; 9] {
    f.rotation_row_major()
}

/// Geometry constants of a block graph, precomputed once per graph.
///
/// Differences are stored in the global frame; the network rotates them into
/// block frames on the tape so learned rotations receive gradients.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub entity: EntityKind,
    pub n_nodes: usize,
    pub real: Arc<[usize]>,
    pub virt: Arc<[usize]>,
    pub virt_embed: Arc<[usize]>,
    /// Current block rotations, `n × 9`.
    pub rotations: Tensor,
    pub atom_block: Arc<[usize]>,
    pub atom_slot: Tensor,
    /// `x_i - t_s`, scaled.
    pub atom_diff: Tensor,
    /// `1 / |B_s|` per atom row.
    pub atom_weight: Tensor,
    pub edge_dst: Arc<[usize]>,
    pub edge_src: Arc<[usize]>,
    /// `[X_s ‖ X_t] - t_s`, scaled, zero where masked.
    pub edge_diff: Tensor,
    /// Slot mask followed by the edge-kind one-hot.
    pub edge_flags: Tensor,
    /// `t_t - t_s`, scaled.
    pub edge_trans: Tensor,
    /// `|t_s - t_t|`, scaled.
    pub edge_dist: Tensor,
    /// Real-to-real neighbour pairs for frame learning, in real-block indices.
    pub knn_dst: Arc<[usize]>,
    pub knn_src: Arc<[usize]>,
    /// Unit directions `(x_k - x_s) / (|x_k - x_s| + ε)`.
    pub knn_dirs: Tensor,
}

impl GraphInputs {
    pub fn new(g: &BlockGraph, cfg: &FeaturizerConfig) -> Self {
        let entity = g.entity;
        let arity = entity.arity();
        let scale = 1.0 / cfg.coord_scale;
        let n = g.blocks.len();
        let real: Vec<usize> = g.real_indices();
        let virt: Vec<usize> = g.virtual_indices();
        let virt_embed: Vec<usize> = virt.iter().map(|&v| g.blocks[v].virtual_index.unwrap()).collect();

        let mut rotations = Tensor::zeros((n, 9));
        for (i, b) in g.blocks.iter().enumerate() {
            let f = if cfg.frame_mode == FrameMode::Identity || (cfg.frame_mode.is_learned() && !b.is_virtual()) {
                Frame::from_translation(b.position())
            } else {
                b.frame
            };
            for (k, v) in rot_row(&f).iter().enumerate() {
                rotations[(i, k)] = *v;
            }
        }

        let mut atom_block = Vec::new();
        let mut slot_rows = Vec::new();
        let mut diff_rows = Vec::new();
        let mut weight_rows = Vec::new();
        for &i in &real {
            let b = &g.blocks[i];
            let count = b.atom_count() as f64;
            for (slot, atom) in b.atoms.iter().enumerate() {
                if let Some(a) = atom {
                    atom_block.push(i);
                    let mut onehot = vec![0.0; arity];
                    onehot[slot] = 1.0;
                    slot_rows.extend(onehot);
                    diff_rows.extend((a.position - b.position()).iter().map(|v| v * scale));
                    weight_rows.push(1.0 / count);
                }
            }
        }
        let n_atoms = atom_block.len();

        let n_edges = g.edges.len();
        let mut edge_diff = Tensor::zeros((n_edges, 6 * arity));
        let mut edge_flags = Tensor::zeros((n_edges, 2 * arity + 3));
        let mut edge_trans = Tensor::zeros((n_edges, 3));
        let mut edge_dist = Tensor::zeros((n_edges, 1));
        for (e, edge) in g.edges.iter().enumerate() {
            let (s, t) = (&g.blocks[edge.dst], &g.blocks[edge.src]);
            let slots: Vec<Option<Vec3>> = edge_atoms(s).into_iter().chain(edge_atoms(t)).collect();
            for (k, slot) in slots.iter().enumerate() {
                if let Some(x) = slot {
                    let d = (x - s.position()) * scale;
                    for c in 0..3 {
                        edge_diff[(e, 3 * k + c)] = d[c];
                    }
                    edge_flags[(e, k)] = 1.0;
                }
            }
            edge_flags[(e, 2 * arity + edge.kind.index())] = 1.0;
            let dt = (t.position() - s.position()) * scale;
            for c in 0..3 {
                edge_trans[(e, c)] = dt[c];
            }
            edge_dist[(e, 0)] = dt.norm();
        }

        let mut local = vec![usize::MAX; n];
        for (r, &i) in real.iter().enumerate() {
            local[i] = r;
        }
        let (mut knn_dst, mut knn_src, mut dirs) = (Vec::new(), Vec::new(), Vec::new());
        for edge in g.edges.iter().filter(|e| e.kind == EdgeKind::Knn) {
            let d = g.blocks[edge.src].position() - g.blocks[edge.dst].position();
            let len = d.norm();
            if len < 1e-12 {
                log::warn!("coincident atoms {} and {}; direction skipped", edge.dst, edge.src);
                continue;
            }
            knn_dst.push(local[edge.dst]);
            knn_src.push(local[edge.src]);
            dirs.extend((d / (len + DIRECTION_EPS)).iter());
        }
        let n_knn = knn_dst.len();

        Self {
            entity,
            n_nodes: n,
            real: real.into(),
            virt: virt.into(),
            virt_embed: virt_embed.into(),
            rotations,
            atom_block: atom_block.into(),
            atom_slot: Tensor::from_shape_vec((n_atoms, arity), slot_rows).unwrap(),
            atom_diff: Tensor::from_shape_vec((n_atoms, 3), diff_rows).unwrap(),
            atom_weight: Tensor::from_shape_vec((n_atoms, 1), weight_rows).unwrap(),
            edge_dst: g.edges.iter().map(|e| e.dst).collect::<Vec<_>>().into(),
            edge_src: g.edges.iter().map(|e| e.src).collect::<Vec<_>>().into(),
            edge_diff,
            edge_flags,
            edge_trans,
            edge_dist,
            knn_dst: knn_dst.into(),
            knn_src: knn_src.into(),
            knn_dirs: Tensor::from_shape_vec((n_knn, 3), dirs).unwrap(),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edge_dst.len()
    }

    pub fn n_real(&self) -> usize {
        self.real.len()
    }
}

/// Featurizer parameters.
#[derive(Debug, Clone)]
pub struct FeaturizerParams {
    pub node_mlp: Mlp,
    pub edge_embed: Linear,
    pub virtual_embed: Option<ParamId>,
}

impl FeaturizerParams {
    pub fn register(store: &mut ParamStore, entity: EntityKind, hidden: usize, n_virtual: usize) -> Self {
        let arity = entity.arity();
        Self {
            node_mlp: store.add_mlp("featurizer.node", arity + 3, hidden, hidden, false),
            edge_embed: store.add_linear("featurizer.edge", raw_edge_width(entity), hidden, false),
            virtual_embed: (n_virtual > 0)
                .then(|| store.add_uniform("featurizer.virtual", n_virtual, hidden, false)),
        }
    }
}

/// Learned-frame attention parameters: `MLP(z_s, z_k)` split over the pair.
#[derive(Debug, Clone)]
pub struct FrameLearnerParams {
    pub w_self: ParamId,
    pub w_neighbor: ParamId,
    pub bias: ParamId,
    /// One scoring head per learned direction.
    pub heads: Vec<Linear>,
}

impl FrameLearnerParams {
    pub fn register(store: &mut ParamStore, hidden: usize, heads: usize) -> Self {
        Self {
            w_self: store.add_uniform("frame_learner.att.self", hidden, hidden, false),
            w_neighbor: store.add_uniform("frame_learner.att.neighbor", hidden, hidden, false),
            bias: store.add("frame_learner.att.bias", Tensor::zeros((1, hidden))),
            heads: (0..heads)
                .map(|h| store.add_linear(&format!("frame_learner.att.head{h}"), hidden, 1, false))
                .collect(),
        }
    }
}

/// Node features `f_s = mean_i MLP(slot_i, Rᵀ(x_i - t_s))`, virtual rows from
/// the index embedding. `rot` is the `n × 9` rotation tensor.
pub fn init_node_features(
    tape: &mut Tape,
    binder: &mut Binder,
    p: &FeaturizerParams,
    inputs: &GraphInputs,
    rot: Var,
) -> Var {
    let atom_rot = tape.gather(rot, inputs.atom_block.clone());
    let diff = tape.leaf(inputs.atom_diff.clone());
    let local = tape.rot_apply_t(atom_rot, diff);
    let slot = tape.leaf(inputs.atom_slot.clone());
    let x = tape.concat(&[slot, local]);
    let h = binder.mlp(tape, &p.node_mlp, x);
    let w = tape.leaf(inputs.atom_weight.clone());
    let h = tape.mul_col(h, w);
    let mut out = tape.scatter_add(h, inputs.atom_block.clone(), inputs.n_nodes);
    if !inputs.virt.is_empty() {
        let table = binder.bind(tape, p.virtual_embed.expect("virtual embedding registered"));
        let rows = tape.gather(table, inputs.virt_embed.clone());
        let placed = tape.scatter_add(rows, inputs.virt.clone(), inputs.n_nodes);
        out = tape.add(out, placed);
    }
    out
}

/// Edge features: linear embedding of `[Rₛᵀ([X_s ‖ X_t] - t_s) ‖ mask ‖ kind]`.
pub fn init_edge_features(
    tape: &mut Tape,
    binder: &mut Binder,
    p: &FeaturizerParams,
    inputs: &GraphInputs,
    rot: Var,
) -> Var {
    let rs = tape.gather(rot, inputs.edge_dst.clone());
    let diff = tape.leaf(inputs.edge_diff.clone());
    let local = tape.rot_apply_t(rs, diff);
    let flags = tape.leaf(inputs.edge_flags.clone());
    let raw = tape.concat(&[local, flags]);
    binder.linear(tape, &p.edge_embed, raw)
}

/// Attention-weighted sums of neighbour directions,
/// `r_s = Σ_k softmax_k(MLP(z_s, z_k)) · (x_k - x_s)/|x_k - x_s|`, one
/// `n_real × 3` output per attention head.
///
/// `z` holds real-block features (`n_real × d`).
pub fn rotation_vectors(
    tape: &mut Tape,
    binder: &mut Binder,
    p: &FrameLearnerParams,
    inputs: &GraphInputs,
    z: Var,
) -> Vec<Var> {
    let n_real = inputs.n_real();
    let ps = binder.project(tape, p.w_self, z);
    let pk = binder.project(tape, p.w_neighbor, z);
    let ps = tape.gather(ps, inputs.knn_dst.clone());
    let pk = tape.gather(pk, inputs.knn_src.clone());
    let h = tape.add(ps, pk);
    let b = binder.bind(tape, p.bias);
    let h = tape.add(h, b);
    let h = tape.silu(h);
    let dirs = tape.leaf(inputs.knn_dirs.clone());
    p.heads
        .iter()
        .map(|head| {
            let logits = binder.linear(tape, head, h);
            let a = tape.segment_softmax(logits, inputs.knn_dst.clone(), n_real);
            let weighted = tape.mul_col(dirs, a);
            tape.scatter_add(weighted, inputs.knn_dst.clone(), n_real)
        })
        .collect()
}
