//! Synthetic corpora whose labels are a deterministic function of local
//! geometry, so a model can learn to recover them from structure alone.
//!
//! * protein: the label picks one of five bend angles along the Cα trace and
//!   one of four rotations of the carbonyl oxygen about the C1-C2 bond.
//! * rna: the label picks one of two bend angles and one of two phosphate
//!   orientations about the sugar.
//! * atomic: random clusters; the label is the quantile bucket of each
//!   atom's local density within its molecule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::Vec3;
use crate::graph::{EntityKind, ELEMENT_SYMBOLS};

use super::dataset::{AtomRecord, BlockRecord, ChainRecord, Dataset, MoleculeRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub entity: EntityKind,
    pub molecules: usize,
    pub seed: u64,
    /// Inclusive block-count range per molecule.
    pub min_len: usize,
    pub max_len: usize,
    /// Class count for atomic corpora (elements named from the periodic table).
    pub atomic_classes: usize,
}

impl ToyConfig {
    pub fn new(entity: EntityKind, molecules: usize, seed: u64) -> Self {
        Self {
            entity,
            molecules,
            seed,
            min_len: 30,
            max_len: 50,
            atomic_classes: 4,
        }
    }
}

const CA_BOND: f64 = 3.8;
const C1_BOND: f64 = 5.9;

pub fn generate_toy_corpus(cfg: &ToyConfig) -> Result<Dataset> {
    if cfg.min_len < 4 || cfg.max_len < cfg.min_len {
        return Err(Error::Config(format!(
            "toy length range {}..={} must satisfy 4 <= min <= max",
            cfg.min_len, cfg.max_len
        )));
    }
    let classes = match cfg.entity {
        EntityKind::Atomic => {
            if cfg.atomic_classes < 2 || cfg.atomic_classes > ELEMENT_SYMBOLS.len() {
                return Err(Error::Config(format!("atomic class count {} out of range", cfg.atomic_classes)));
            }
            atomic_vocabulary(cfg.atomic_classes)
        }
        e => e.default_classes(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = Dataset::new(cfg.entity, classes.clone());
    for m in 0..cfg.molecules {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let labels = stratified_labels(len, classes.len(), &mut rng);
        let blocks = match cfg.entity {
            EntityKind::Protein => protein_blocks(&labels, &mut rng),
            EntityKind::Rna => rna_blocks(&labels, &mut rng),
            EntityKind::Atomic => atomic_blocks(len, classes.len(), &mut rng),
        };
        let blocks = blocks
            .into_iter()
            .map(|(label, atoms)| BlockRecord {
                label: classes[label].clone(),
                atoms: atoms
                    .into_iter()
                    .map(|(slot, p)| AtomRecord {
                        slot: slot.to_string(),
                        xyz: [p.x, p.y, p.z],
                    })
                    .collect(),
            })
            .collect();
        let mut rec = MoleculeRecord {
            id: format!("toy-{}-{m:04}", cfg.entity),
            entity: cfg.entity,
            chains: vec![ChainRecord {
                chain_id: "A".into(),
                blocks,
            }],
        };
        rec.quantize();
        ds.records.push(rec);
    }
    Ok(ds)
}

/// Oxygen first, then metals in periodic-table order.
fn atomic_vocabulary(n: usize) -> Vec<String> {
    let metals = ELEMENT_SYMBOLS
        .iter()
        .filter(|s| !matches!(**s, "H" | "He" | "B" | "C" | "N" | "O" | "F" | "Ne" | "Si" | "P" | "S" | "Cl" | "Ar"));
    std::iter::once("O")
        .chain(metals.copied())
        .take(n)
        .map(String::from)
        .collect()
}

/// Every class appears `len / classes` or one more times, in random order.
fn stratified_labels(len: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let offset = rng.gen_range(0..classes);
    let mut labels: Vec<usize> = (0..len).map(|i| (offset + i) % classes).collect();
    labels.shuffle(rng);
    labels
}

fn unit(v: Vec3) -> Vec3 {
    v / v.norm()
}

/// Any unit vector orthogonal to `v`.
fn orthogonal(v: &Vec3) -> Vec3 {
    let helper = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    unit(v.cross(&helper))
}

/// Places `d` from `c` with bond length, bond angle at `c` and dihedral
/// `a-b-c-d`.
fn place(a: &Vec3, b: &Vec3, c: &Vec3, bond: f64, angle: f64, torsion: f64) -> Vec3 {
    let bc = unit(c - b);
    let n = (b - a).cross(&bc);
    let n = if n.norm() < 1e-9 { orthogonal(&bc) } else { unit(n) };
    let m = n.cross(&bc);
    let local = Vec3::new(-bond * angle.cos(), bond * angle.sin() * torsion.cos(), bond * angle.sin() * torsion.sin());
    c + bc * local.x + m * local.y + n * local.z
}

/// Chain trace with the bend at every interior point and the dihedral
/// ending at it taken from `bend` and `twist`.
fn trace(bend: &[f64], twist: &[f64], bond: f64) -> Vec<Vec3> {
    let n = bend.len();
    let mut pts = vec![Vec3::zeros(), Vec3::new(bond, 0.0, 0.0)];
    let a = bend[1];
    pts.push(pts[1] + Vec3::new(-a.cos(), a.sin(), 0.0) * bond);
    for i in 3..n {
        let p = place(&pts[i - 3], &pts[i - 2], &pts[i - 1], bond, bend[i - 1], twist[i - 1]);
        pts.push(p);
    }
    pts.truncate(n);
    pts
}

/// Unit directions from point `i` towards its chain neighbours. End points
/// get a synthetic neighbour at angle `bend[i]`.
fn neighbour_directions(pts: &[Vec3], bend: &[f64], i: usize) -> (Vec3, Vec3) {
    let n = pts.len();
    let synth = |known: Vec3, other: Vec3, angle: f64| {
        let q = other - known * known.dot(&other);
        let q = if q.norm() < 1e-9 { orthogonal(&known) } else { unit(q) };
        known * angle.cos() + q * angle.sin()
    };
    match i {
        0 => {
            let w = unit(pts[1] - pts[0]);
            (synth(w, pts[2] - pts[1], bend[0]), w)
        }
        _ if i == n - 1 => {
            let u = unit(pts[i - 1] - pts[i]);
            (u, synth(u, pts[i - 2] - pts[i - 1], bend[i]))
        }
        _ => (unit(pts[i - 1] - pts[i]), unit(pts[i + 1] - pts[i])),
    }
}

fn jitter(rng: &mut ChaCha8Rng, degrees: f64) -> f64 {
    rng.gen_range(-degrees..=degrees).to_radians()
}

type ToyBlock = (usize, Vec<(&'static str, Vec3)>);

fn protein_blocks(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<ToyBlock> {
    let bend: Vec<f64> = labels
        .iter()
        .map(|&c| (85.0 + 12.0 * (c / 4) as f64).to_radians() + jitter(rng, 2.0))
        .collect();
    let twist: Vec<f64> = labels.iter().map(|_| rng.gen_range(-180.0f64..180.0).to_radians()).collect();
    let ca = trace(&bend, &twist, CA_BOND);
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (u, w) = neighbour_directions(&ca, &bend, i);
            let normal = unit(u.cross(&w));
            let n = ca[i] + unit(u + normal * 0.35) * 1.46;
            let cc = ca[i] + unit(w + normal * 0.35) * 1.52;
            let axis = unit(cc - ca[i]);
            let a = unit((n - ca[i]) - axis * axis.dot(&(n - ca[i])));
            let b = axis.cross(&a);
            let alpha = (45.0 + 90.0 * (c % 4) as f64).to_radians() + jitter(rng, 5.0);
            let o = cc + (axis * 0.5 + (a * alpha.cos() + b * alpha.sin()) * 0.75f64.sqrt()) * 1.23;
            (c, vec![("N", n), ("C1", ca[i]), ("C2", cc), ("O", o)])
        })
        .collect()
}

fn rna_blocks(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<ToyBlock> {
    let bend: Vec<f64> = labels
        .iter()
        .map(|&c| (100.0 + 30.0 * (c / 2) as f64).to_radians() + jitter(rng, 3.0))
        .collect();
    let twist: Vec<f64> = labels.iter().map(|_| rng.gen_range(-180.0f64..180.0).to_radians()).collect();
    let c1 = trace(&bend, &twist, C1_BOND);
    // sugar template in the (tangent, bisector, normal) basis at C1'
    let template: [(&str, [f64; 3]); 8] = [
        ("O4", [1.0, 1.0, 0.2]),
        ("C4", [2.2, 0.4, 0.5]),
        ("C3", [2.0, -1.0, 0.9]),
        ("C2", [0.6, -1.2, 0.4]),
        ("O2", [0.0, -2.3, 1.0]),
        ("C5", [3.5, 1.0, 0.2]),
        ("O5", [4.0, 2.2, 0.8]),
        ("O3", [2.6, -1.8, 2.0]),
    ];
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (u, w) = neighbour_directions(&c1, &bend, i);
            let t = unit(w - u);
            let bis = unit(u + w - t * t.dot(&(u + w)));
            let nrm = t.cross(&bis);
            let to_global = |p: [f64; 3]| c1[i] + t * p[0] + bis * p[1] + nrm * p[2];
            let mut atoms: Vec<(&'static str, Vec3)> = vec![("C1", c1[i])];
            atoms.extend(template.iter().map(|(s, p)| (*s, to_global(*p))));
            let phi = (90.0 + 180.0 * (c % 2) as f64).to_radians() + jitter(rng, 5.0);
            let p = [4.6, 2.6 + 1.5 * phi.cos(), 0.8 + 1.5 * phi.sin()];
            atoms.push(("P", to_global(p)));
            (c, atoms)
        })
        .collect()
}

fn atomic_blocks(len: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<ToyBlock> {
    const MIN_DIST: f64 = 1.9;
    let side = (len as f64 * 15.0).cbrt();
    let mut pts: Vec<Vec3> = Vec::with_capacity(len);
    while pts.len() < len {
        let p = Vec3::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side));
        if pts.iter().all(|q| (q - p).norm() >= MIN_DIST) {
            pts.push(p);
        }
    }
    let density: Vec<f64> = pts
        .iter()
        .map(|p| pts.iter().map(|q| (-(p - q).norm_squared() / 8.0).exp()).sum::<f64>())
        .collect();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| density[a].total_cmp(&density[b]).then(a.cmp(&b)));
    let mut labels = vec![0; len];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * classes / len;
    }
    pts.into_iter()
        .zip(labels)
        .map(|(p, c)| (c, vec![("atom", p)]))
        .collect()
}
