//! One BlockGAT layer: geometric interaction extractor, gated edge attention,
//! feed-forward and edge update.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::featurizer::GraphInputs;
use crate::params::{Binder, Linear, Mlp, ParamId, ParamStore};

/// Node and edge features entering or leaving a layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    /// `n × d`.
    pub node: Var,
    /// `E × d`.
    pub edge: Var,
    pub layer_index: usize,
}

/// Per-edge frame quantities, fixed across layers.
#[derive(Debug, Clone, Copy)]
pub struct EdgeGeometry {
    /// `R_s`, `E × 9`.
    pub rot_dst: Var,
    /// `R_sᵀ R_t`, `E × 9`.
    pub rel_rot: Var,
    /// `R_sᵀ (t_t - t_s)`, `E × 3`.
    pub rel_trans: Var,
    /// `|t_s - t_t|`, `E × 1`.
    pub dist: Var,
}

impl EdgeGeometry {
    pub fn new(tape: &mut Tape, inputs: &GraphInputs, rot: Var) -> Self {
        let rot_dst = tape.gather(rot, inputs.edge_dst.clone());
        let rot_src = tape.gather(rot, inputs.edge_src.clone());
        let rel_rot = tape.rot_t_mul(rot_dst, rot_src);
        let trans = tape.leaf(inputs.edge_trans.clone());
        let rel_trans = tape.rot_apply_t(rot_dst, trans);
        let dist = tape.leaf(inputs.edge_dist.clone());
        Self {
            rot_dst,
            rel_rot,
            rel_trans,
            dist,
        }
    }
}

/// First layer of an MLP over `[f_s ‖ f_st ‖ f_t]`, split so the node terms
/// are projected once per node and gathered per edge.
#[derive(Debug, Clone, Copy)]
pub struct TripleInput {
    pub w_dst: ParamId,
    pub w_edge: ParamId,
    pub w_src: ParamId,
    pub bias: ParamId,
    pub out: Linear,
}

impl TripleInput {
    fn register(store: &mut ParamStore, name: &str, d: usize, out: usize, zero_out: bool) -> Self {
        Self {
            w_dst: store.add_uniform(format!("{name}.0.dst"), d, d, false),
            w_edge: store.add_uniform(format!("{name}.0.edge"), d, d, false),
            w_src: store.add_uniform(format!("{name}.0.src"), d, d, false),
            bias: store.add(format!("{name}.0.bias"), Tensor::zeros((1, d))),
            out: store.add_linear(&format!("{name}.1"), d, out, zero_out),
        }
    }

    fn apply(&self, tape: &mut Tape, binder: &mut Binder, inputs: &GraphInputs, state: &LayerState) -> Var {
        let pd = binder.project(tape, self.w_dst, state.node);
        let ps = binder.project(tape, self.w_src, state.node);
        let pd = tape.gather(pd, inputs.edge_dst.clone());
        let ps = tape.gather(ps, inputs.edge_src.clone());
        let pe = binder.project(tape, self.w_edge, state.edge);
        let h = tape.add(pd, ps);
        let h = tape.add(h, pe);
        let b = binder.bind(tape, self.bias);
        let h = tape.add(h, b);
        let h = tape.silu(h);
        binder.linear(tape, &self.out, h)
    }
}

/// Parameters of one layer. Residual branches end in zero-initialised maps.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub virtual_atoms: usize,
    pub vatom_edge: Mlp,
    pub vatom_node: Mlp,
    pub geo: Mlp,
    pub edge_fuse: Mlp,
    pub attention: TripleInput,
    pub value: Mlp,
    pub gate: Mlp,
    pub ffn: Mlp,
    pub edge_update: TripleInput,
}

impl LayerParams {
    pub fn register(store: &mut ParamStore, name: &str, d: usize, m: usize) -> Self {
        let geo_in = 6 * m + 9 + 1 + m * m;
        Self {
            virtual_atoms: m,
            vatom_edge: store.add_mlp(&format!("{name}.geo.vatom_edge"), d, d, 3 * m, false),
            vatom_node: store.add_mlp(&format!("{name}.geo.vatom_node"), d, d, 3 * m, false),
            geo: store.add_mlp(&format!("{name}.geo.interaction"), geo_in, d, d, false),
            edge_fuse: store.add_mlp(&format!("{name}.geo.fuse"), 2 * d, d, d, true),
            attention: TripleInput::register(store, &format!("{name}.attn.score"), d, 1, false),
            value: store.add_mlp(&format!("{name}.attn.value"), d, d, d, true),
            gate: store.add_mlp(&format!("{name}.attn.gate"), d, d, d, false),
            ffn: store.add_mlp(&format!("{name}.ffn"), d, 2 * d, d, true),
            edge_update: TripleInput::register(store, &format!("{name}.edge_update"), d, d, true),
        }
    }
}

/// Shared state for evaluating layers on one graph.
pub struct LayerCtx<'t, 'b, 'p> {
    pub tape: &'t mut Tape,
    pub binder: &'b mut Binder<'p>,
    pub inputs: &'t GraphInputs,
    pub geometry: EdgeGeometry,
}

/// Virtual-atom geometry of each edge, the invariant interaction features
/// `g_st`, and the fused edge update `f_st ← f_st + MLP(f_st, g_st)`.
///
/// Returns the new edge features and `g_st`.
pub fn geometric_interaction(ctx: &mut LayerCtx, p: &LayerParams, state: &LayerState) -> (Var, Var) {
    let tape = &mut *ctx.tape;
    let geo = ctx.geometry;
    // virtual inter-atoms from edges, intra-atoms from nodes
    let h_edge = ctx.binder.mlp(tape, &p.vatom_edge, state.edge);
    let h_node = ctx.binder.mlp(tape, &p.vatom_node, state.node);
    let h_dst = tape.gather(h_node, ctx.inputs.edge_dst.clone());
    let h_src = tape.gather(h_node, ctx.inputs.edge_src.clone());

    let moved = tape.rot_apply(geo.rel_rot, h_edge);
    let moved = tape.add_points(moved, geo.rel_trans);
    let src_in_dst = tape.rot_apply(geo.rel_rot, h_src);
    let dots = tape.pair_dots(h_dst, src_in_dst);

    let g_in = tape.concat(&[moved, h_edge, geo.rel_rot, geo.dist, dots]);
    let g = ctx.binder.mlp(tape, &p.geo, g_in);
    let fuse_in = tape.concat(&[state.edge, g]);
    let delta = ctx.binder.mlp(tape, &p.edge_fuse, fuse_in);
    (tape.add(state.edge, delta), g)
}

/// Attention over incoming edges with values conditioned on edge features
/// only, injected through a sigmoid gate.
///
/// Returns the updated node features and the `E × 1` attention weights.
pub fn gated_edge_attention(ctx: &mut LayerCtx, p: &LayerParams, state: &LayerState) -> (Var, Var) {
    let n = ctx.inputs.n_nodes;
    let scores = p.attention.apply(ctx.tape, ctx.binder, ctx.inputs, state);
    let tape = &mut *ctx.tape;
    let att = tape.segment_softmax(scores, ctx.inputs.edge_dst.clone(), n);
    let values = ctx.binder.mlp(tape, &p.value, state.edge);
    let weighted = tape.mul_col(values, att);
    let delta = tape.scatter_add(weighted, ctx.inputs.edge_dst.clone(), n);
    let gate = ctx.binder.mlp(tape, &p.gate, delta);
    let gate = tape.sigmoid(gate);
    let update = tape.mul(gate, delta);
    (tape.add(state.node, update), att)
}

/// Residual node FFN, then `f_st ← f_st + EdgeMLP(f_s ‖ f_st ‖ f_t)` using the
/// updated node features.
pub fn ffn_and_edge_update(ctx: &mut LayerCtx, p: &LayerParams, state: &LayerState) -> LayerState {
    let tape = &mut *ctx.tape;
    let ff = ctx.binder.mlp(tape, &p.ffn, state.node);
    let node = tape.add(state.node, ff);
    let updated = LayerState { node, ..*state };
    let delta = p.edge_update.apply(ctx.tape, ctx.binder, ctx.inputs, &updated);
    let edge = ctx.tape.add(state.edge, delta);
    LayerState {
        node,
        edge,
        layer_index: state.layer_index,
    }
}

/// Row keep-mask: each row dropped with probability `p`, survivors scaled by `1/(1-p)`.
pub fn dropout_mask(rows: usize, p: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_shape_fn((rows, 1), |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Zeroes whole node and edge rows. A no-op when `p == 0`.
pub fn apply_dropout(tape: &mut Tape, state: LayerState, p: f64, rng: &mut impl Rng) -> LayerState {
    if p <= 0.0 {
        return state;
    }
    let node_mask = dropout_mask(tape.shape(state.node).0, p, rng);
    let edge_mask = dropout_mask(tape.shape(state.edge).0, p, rng);
    LayerState {
        node: tape.mul_const(state.node, Arc::new(node_mask)),
        edge: tape.mul_const(state.edge, Arc::new(edge_mask)),
        layer_index: state.layer_index,
    }
}

/// Output of a full layer evaluation.
pub struct LayerOutput {
    pub state: LayerState,
    pub attention: Var,
}

pub fn block_gat_layer(ctx: &mut LayerCtx, p: &LayerParams, state: LayerState) -> LayerOutput {
    let (edge, _) = geometric_interaction(ctx, p, &state);
    let state = LayerState { edge, ..state };
    let (node, attention) = gated_edge_attention(ctx, p, &state);
    let state = LayerState { node, ..state };
    let mut state = ffn_and_edge_update(ctx, p, &state);
    state.layer_index += 1;
    LayerOutput { state, attention }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_rate_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = dropout_mask(100_000, 0.05, &mut rng);
        let dropped = mask.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((dropped - 0.05).abs() < 0.005, "rate {dropped}");
        assert!(mask.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.95).abs() < 1e-15));
        let again = dropout_mask(100_000, 0.05, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(mask, again);
    }

    #[test]
    fn zero_dropout_is_identity() {
        let mut tape = Tape::new();
        let node = tape.leaf(Tensor::ones((3, 2)));
        let edge = tape.leaf(Tensor::ones((5, 2)));
        let s = LayerState {
            node,
            edge,
            layer_index: 0,
        };
        let out = apply_dropout(&mut tape, s, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((out.node, out.edge), (node, edge));
    }
}
