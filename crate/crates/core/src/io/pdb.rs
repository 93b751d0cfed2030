//! Backbone extraction from fixed-column PDB coordinate files.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::EntityKind;

use super::dataset::{AtomRecord, BlockRecord, ChainRecord, MoleculeRecord, MASK_LABEL};

const THREE_LETTER: [(&str, &str); 20] = [
    ("ALA", "A"),
    ("ARG", "R"),
    ("ASN", "N"),
    ("ASP", "D"),
    ("CYS", "C"),
    ("GLN", "Q"),
    ("GLU", "E"),
    ("GLY", "G"),
    ("HIS", "H"),
    ("ILE", "I"),
    ("LEU", "L"),
    ("LYS", "K"),
    ("MET", "M"),
    ("PHE", "F"),
    ("PRO", "P"),
    ("SER", "S"),
    ("THR", "T"),
    ("TRP", "W"),
    ("TYR", "Y"),
    ("VAL", "V"),
];

/// Maps a PDB atom name onto a block slot, or `None` for atoms outside the
/// backbone set.
fn slot_for(entity: EntityKind, atom: &str) -> Option<&'static str> {
    match entity {
        EntityKind::Protein => match atom {
            "N" => Some("N"),
            "CA" => Some("C1"),
            "C" => Some("C2"),
            "O" => Some("O"),
            _ => None,
        },
        EntityKind::Rna => {
            let name = atom.replace('*', "'");
            let slot = match name.as_str() {
                "P" => "P",
                "C5'" => "C5",
                "C4'" => "C4",
                "C3'" => "C3",
                "C2'" => "C2",
                "C1'" => "C1",
                "O5'" => "O5",
                "O4'" => "O4",
                "O3'" => "O3",
                "O2'" => "O2",
                _ => return None,
            };
            Some(slot)
        }
        EntityKind::Atomic => None,
    }
}

fn residue_label(entity: EntityKind, res_name: &str) -> String {
    let label = match entity {
        EntityKind::Protein => THREE_LETTER.iter().find(|(t, _)| *t == res_name).map(|(_, o)| *o),
        _ => match res_name {
            "A" | "U" | "C" | "G" => Some(res_name),
            "RA" | "ADE" => Some("A"),
            "RU" | "URA" | "URI" => Some("U"),
            "RC" | "CYT" => Some("C"),
            "RG" | "GUA" => Some("G"),
            _ => None,
        },
    };
    label.unwrap_or(MASK_LABEL).to_string()
}

fn column(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        ""
    } else {
        line.get(start..end).unwrap_or("")
    }
}

fn number(line: &str, no: usize, start: usize, end: usize, what: &str) -> Result<f64> {
    let s = column(line, start, end).trim();
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(Some(no), format!("bad {what} {s:?}")))
}

struct Candidate {
    slot: &'static str,
    altloc: char,
    occupancy: f64,
    xyz: [f64; 3],
}

struct Residue {
    chain: String,
    name: String,
    atoms: Vec<Candidate>,
}

/// Reads the first model of a PDB file into a record, keeping only the
/// backbone slots of `entity`. Alternate locations resolve to the highest
/// occupancy, ties to the earliest altloc identifier.
pub fn parse_pdb(text: &str, entity: EntityKind, id: &str) -> Result<MoleculeRecord> {
    if entity == EntityKind::Atomic {
        return Err(Error::UnsupportedEntity(
            "backbone import covers protein and rna only".into(),
        ));
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut residues: HashMap<(String, String), Residue> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        let record = column(line, 0, 6).trim_end();
        if record == "ENDMDL" {
            break;
        }
        if record != "ATOM" {
            continue;
        }
        if line.len() < 54 {
            return Err(Error::parse(Some(no), "ATOM record shorter than 54 columns"));
        }
        let atom_name = column(line, 12, 16).trim();
        let Some(slot) = slot_for(entity, atom_name) else {
            continue;
        };
        let altloc = column(line, 16, 17).chars().next().unwrap_or(' ');
        let res_name = column(line, 17, 20).trim().to_string();
        let chain = column(line, 21, 22).trim().to_string();
        let res_key = column(line, 22, 27).trim().to_string();
        if res_key.is_empty() {
            return Err(Error::parse(Some(no), "missing residue number"));
        }
        let xyz = [
            number(line, no, 30, 38, "x")?,
            number(line, no, 38, 46, "y")?,
            number(line, no, 46, 54, "z")?,
        ];
        let occupancy = if column(line, 54, 60).trim().is_empty() {
            1.0
        } else {
            number(line, no, 54, 60, "occupancy")?
        };
        let key = (chain.clone(), res_key);
        let res = residues.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Residue {
                chain,
                name: res_name,
                atoms: Vec::new(),
            }
        });
        res.atoms.push(Candidate {
            slot,
            altloc,
            occupancy,
            xyz,
        });
    }
    if order.is_empty() {
        return Err(Error::parse(None, "no backbone atoms found"));
    }

    let mut chains: Vec<ChainRecord> = Vec::new();
    for key in &order {
        let res = &residues[key];
        let mut atoms = Vec::new();
        for &slot in entity.slot_names() {
            let best = res
                .atoms
                .iter()
                .filter(|c| c.slot == slot)
                .min_by(|a, b| b.occupancy.total_cmp(&a.occupancy).then(a.altloc.cmp(&b.altloc)));
            if let Some(c) = best {
                atoms.push(AtomRecord {
                    slot: slot.to_string(),
                    xyz: c.xyz,
                });
            }
        }
        let block = BlockRecord {
            label: residue_label(entity, &res.name),
            atoms,
        };
        match chains.last_mut() {
            Some(c) if c.chain_id == res.chain => c.blocks.push(block),
            _ => chains.push(ChainRecord {
                chain_id: res.chain.clone(),
                blocks: vec![block],
            }),
        }
    }
    Ok(MoleculeRecord {
        id: id.to_string(),
        entity,
        chains,
    })
}

/// Imports a PDB file; the record id is the file stem.
pub fn import_backbone(path: &Path, entity: EntityKind) -> Result<MoleculeRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("structure");
    parse_pdb(&text, entity, id)
}

/// One fixed-column ATOM line.
#[allow(clippy::too_many_arguments)]
pub fn format_atom_line(
    serial: usize,
    atom: &str,
    altloc: char,
    res_name: &str,
    chain: char,
    res_seq: i32,
    xyz: [f64; 3],
    occupancy: f64,
    element: &str,
) -> String {
    let name = if atom.len() < 4 { format!(" {atom:<3}") } else { atom.to_string() };
    format!(
        "ATOM  {serial:>5} {name:<4}{altloc}{res_name:>3} {chain}{res_seq:>4}    {:>8.3}{:>8.3}{:>8.3}{occupancy:>6.2}{:>6.2}          {element:>2}",
        xyz[0], xyz[1], xyz[2], 0.0
    )
}
