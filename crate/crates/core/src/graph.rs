//! Blocks, molecules and block graphs.
//!
//! A molecule is a list of fixed-arity blocks (amino acids, nucleotides or
//! single atoms). Each block carries a frame whose translation is the
//! representative atom. Graphs connect every real block to its `k` nearest
//! neighbours by frame-translation distance and optionally attach virtual
//! blocks that talk to every real block in both directions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{principal_frame, Frame, Vec3};

pub const NUM_ELEMENTS: usize = 118;

/// Periodic table symbols, indexed by `atomic number - 1`.
pub const ELEMENT_SYMBOLS: [&str; NUM_ELEMENTS] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Element id (`atomic number - 1`) for a symbol, case-insensitive.
pub fn element_id(symbol: &str) -> Option<u8> {
    ELEMENT_SYMBOLS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(symbol.trim()))
        .map(|i| i as u8)
}

pub const PROTEIN_ALPHABET: [&str; 20] = [
    "A", "R", "N", "D", "C", "Q", "E", "G", "H", "I", "L", "K", "M", "F", "P", "S", "T", "W", "Y", "V",
];

pub const RNA_ALPHABET: [&str; 4] = ["A", "U", "C", "G"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Protein,
    Rna,
    Atomic,
}

impl EntityKind {
    pub fn slot_names(self) -> &'static [&'static str] {
        match self {
            EntityKind::Protein => &["N", "C1", "C2", "O"],
            EntityKind::Rna => &["P", "C5", "C4", "C3", "C2", "C1", "O5", "O4", "O3", "O2"],
            EntityKind::Atomic => &["atom"],
        }
    }

    pub fn arity(self) -> usize {
        self.slot_names().len()
    }

    pub fn slot_index(self, name: &str) -> Option<usize> {
        self.slot_names().iter().position(|s| *s == name)
    }

    /// Slot holding the atom that anchors the block frame.
    pub fn representative_slot(self) -> usize {
        match self {
            EntityKind::Protein => 1,
            EntityKind::Rna => 5,
            EntityKind::Atomic => 0,
        }
    }

    /// Chemical element of each slot (unknown for atomic blocks).
    pub fn slot_element(self, slot: usize) -> u8 {
        let sym = match self {
            EntityKind::Protein => ["N", "C", "C", "O"][slot],
            EntityKind::Rna => ["P", "C", "C", "C", "C", "C", "O", "O", "O", "O"][slot],
            EntityKind::Atomic => return 0,
        };
        element_id(sym).unwrap()
    }

    pub fn default_k(self) -> usize {
        match self {
            EntityKind::Atomic => 12,
            _ => 30,
        }
    }

    /// Default class names; atomic vocabularies come from the dataset header.
    pub fn default_classes(self) -> Vec<String> {
        match self {
            EntityKind::Protein => PROTEIN_ALPHABET.iter().map(|s| s.to_string()).collect(),
            EntityKind::Rna => RNA_ALPHABET.iter().map(|s| s.to_string()).collect(),
            EntityKind::Atomic => Vec::new(),
        }
    }

    pub fn has_predefined_frames(self) -> bool {
        !matches!(self, EntityKind::Atomic)
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Protein => "protein",
            EntityKind::Rna => "rna",
            EntityKind::Atomic => "atomic",
        })
    }
}

impl std::str::FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "protein" => Ok(EntityKind::Protein),
            "rna" => Ok(EntityKind::Rna),
            "atomic" | "material" => Ok(EntityKind::Atomic),
            other => Err(Error::UnsupportedEntity(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub position: Vec3,
    /// `atomic number - 1`.
    pub element: u8,
    /// Slot index within the block kind.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: EntityKind,
    /// One entry per slot; missing atoms are `None`.
    pub atoms: Vec<Option<Atom>>,
    pub frame: Frame,
    /// Class id, `None` when unknown or masked.
    pub label: Option<usize>,
    /// Embedding index for virtual blocks.
    pub virtual_index: Option<usize>,
}

impl Block {
    /// Real block with a frame supplied by the caller.
    ///
    /// Fails when the representative atom is missing or the frame is not
    /// anchored on it.
    pub fn new(kind: EntityKind, atoms: Vec<Option<Atom>>, frame: Frame, label: Option<usize>) -> Result<Self> {
        if atoms.len() != kind.arity() {
            return Err(Error::Config(format!(
                "{kind} block needs {} slots, got {}",
                kind.arity(),
                atoms.len()
            )));
        }
        let rep = atoms[kind.representative_slot()]
            .ok_or_else(|| Error::DegenerateGeometry(format!("{kind} block without representative atom")))?;
        if (rep.position - frame.translation).amax() > 1e-9 {
            return Err(Error::DegenerateGeometry(
                "frame translation is not the representative atom".into(),
            ));
        }
        Ok(Self {
            kind,
            atoms,
            frame,
            label,
            virtual_index: None,
        })
    }

    pub fn is_virtual(&self) -> bool {
        self.virtual_index.is_some()
    }

    pub fn position(&self) -> Vec3 {
        self.frame.translation
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.iter().flatten().count()
    }
}

/// Direction of information flow along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// Real neighbour to real block.
    Knn,
    /// Virtual block to real block.
    FromVirtual,
    /// Real block to virtual block.
    ToVirtual,
}

impl EdgeKind {
    pub fn index(self) -> usize {
        match self {
            EdgeKind::Knn => 0,
            EdgeKind::FromVirtual => 1,
            EdgeKind::ToVirtual => 2,
        }
    }
}

/// Directed edge `dst ← src` (the receiving block `s` gathers from `t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub dst: usize,
    pub src: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGraph {
    pub entity: EntityKind,
    pub blocks: Vec<Block>,
    pub edges: Vec<Edge>,
    pub k: usize,
    pub n_virtual: usize,
    /// Molecule index of every block (all zero for an unbatched graph).
    pub graph_id: Vec<usize>,
    pub num_graphs: usize,
}

impl BlockGraph {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| !self.blocks[i].is_virtual()).collect()
    }

    pub fn virtual_indices(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].is_virtual()).collect()
    }

    pub fn num_real(&self) -> usize {
        self.blocks.iter().filter(|b| !b.is_virtual()).count()
    }

    pub fn knn_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Knn).count()
    }

    pub fn virtual_edge_count(&self) -> usize {
        self.edges.len() - self.knn_edge_count()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.blocks.len()];
        for e in &self.edges {
            deg[e.dst] += 1;
        }
        deg
    }

    /// Labels of real blocks in block order.
    pub fn real_labels(&self) -> Vec<Option<usize>> {
        self.blocks.iter().filter(|b| !b.is_virtual()).map(|b| b.label).collect()
    }

    /// Molecule index of every real block in block order.
    pub fn real_graph_ids(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .zip(&self.graph_id)
            .filter(|(b, _)| !b.is_virtual())
            .map(|(_, &g)| g)
            .collect()
    }

    /// Drops virtual blocks and every edge touching them.
    pub fn without_virtual(&self) -> BlockGraph {
        let mut remap = vec![usize::MAX; self.blocks.len()];
        let mut blocks = Vec::new();
        let mut graph_id = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if !b.is_virtual() {
                remap[i] = blocks.len();
                blocks.push(b.clone());
                graph_id.push(self.graph_id[i]);
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Knn)
            .map(|e| Edge {
                dst: remap[e.dst],
                src: remap[e.src],
                kind: e.kind,
            })
            .collect();
        BlockGraph {
            entity: self.entity,
            blocks,
            edges,
            k: self.k,
            n_virtual: 0,
            graph_id,
            num_graphs: self.num_graphs,
        }
    }
}

/// Indices of the `k` nearest blocks to `s` (excluding `s`), nearest first,
/// ties broken by the lower index.
pub fn nearest_neighbors(positions: &[Vec3], s: usize, k: usize) -> Vec<usize> {
    let origin = positions[s];
    let mut cand: Vec<(f64, usize)> = positions
        .iter()
        .enumerate()
        .filter(|&(t, _)| t != s)
        .map(|(t, p)| ((p - origin).norm_squared(), t))
        .collect();
    let k = k.min(cand.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() && k > 0 {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.truncate(k);
    cand.into_iter().map(|(_, t)| t).collect()
}

/// kNN block graph over real blocks.
pub fn build_knn_graph(blocks: Vec<Block>, k: usize) -> Result<BlockGraph> {
    if blocks.len() < 2 {
        return Err(Error::EmptyMolecule(blocks.len()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if blocks.iter().any(Block::is_virtual) {
        return Err(Error::Config("kNN graph input contains virtual blocks".into()));
    }
    let entity = blocks[0].kind;
    if blocks.iter().any(|b| b.kind != entity) {
        return Err(Error::Config("mixed entity kinds in one molecule".into()));
    }
    let positions: Vec<Vec3> = blocks.iter().map(Block::position).collect();
    let mut edges = Vec::with_capacity(blocks.len() * k.min(blocks.len() - 1));
    for s in 0..blocks.len() {
        for t in nearest_neighbors(&positions, s, k) {
            edges.push(Edge {
                dst: s,
                src: t,
                kind: EdgeKind::Knn,
            });
        }
    }
    let n = blocks.len();
    Ok(BlockGraph {
        entity,
        blocks,
        edges,
        k,
        n_virtual: 0,
        graph_id: vec![0; n],
        num_graphs: 1,
    })
}

/// Frame shared by all virtual blocks of one molecule: principal axes of the
/// real block translations at their centroid, or the identity rotation at
/// the centroid when the axes are ambiguous.
pub fn virtual_frame(positions: &[Vec3]) -> Frame {
    match principal_frame(positions) {
        Ok(f) => f,
        Err(e) => {
            log::debug!("virtual frame falls back to identity: {e}");
            let c = positions.iter().fold(Vec3::zeros(), |a, p| a + p) / positions.len().max(1) as f64;
            Frame::from_translation(c)
        }
    }
}

/// Appends `n_virtual` virtual blocks per molecule, each wired to every real
/// block of that molecule in both directions.
pub fn attach_virtual_blocks(g: BlockGraph, n_virtual: usize) -> Result<BlockGraph> {
    if g.blocks.iter().any(Block::is_virtual) {
        return Err(Error::Config("graph already has virtual blocks".into()));
    }
    if n_virtual == 0 {
        return Ok(g);
    }
    let mut g = g;
    let arity = g.entity.arity();
    for mol in 0..g.num_graphs {
        let members: Vec<usize> = (0..g.blocks.len())
            .filter(|&i| g.graph_id[i] == mol && !g.blocks[i].is_virtual())
            .collect();
        let positions: Vec<Vec3> = members.iter().map(|&i| g.blocks[i].position()).collect();
        let frame = virtual_frame(&positions);
        for v in 0..n_virtual {
            let vid = g.blocks.len();
            g.blocks.push(Block {
                kind: g.entity,
                atoms: vec![None; arity],
                frame,
                label: None,
                virtual_index: Some(v),
            });
            g.graph_id.push(mol);
            for &s in &members {
                g.edges.push(Edge {
                    dst: s,
                    src: vid,
                    kind: EdgeKind::FromVirtual,
                });
                g.edges.push(Edge {
                    dst: vid,
                    src: s,
                    kind: EdgeKind::ToVirtual,
                });
            }
        }
    }
    g.n_virtual = n_virtual;
    Ok(g)
}

/// Disjoint union; block and edge indices of later graphs are offset.
pub fn batch_graphs(gs: &[BlockGraph]) -> Result<BlockGraph> {
    let first = gs.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut out = BlockGraph {
        entity: first.entity,
        blocks: Vec::new(),
        edges: Vec::new(),
        k: first.k,
        n_virtual: first.n_virtual,
        graph_id: Vec::new(),
        num_graphs: 0,
    };
    for g in gs {
        if g.entity != first.entity {
            return Err(Error::Config("cannot batch different entity kinds".into()));
        }
        let offset = out.blocks.len();
        out.blocks.extend(g.blocks.iter().cloned());
        out.graph_id.extend(g.graph_id.iter().map(|&m| m + out.num_graphs));
        out.edges.extend(g.edges.iter().map(|e| Edge {
            dst: e.dst + offset,
            src: e.src + offset,
            kind: e.kind,
        }));
        out.num_graphs += g.num_graphs;
    }
    Ok(out)
}
