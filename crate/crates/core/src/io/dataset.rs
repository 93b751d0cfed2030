//! Line-delimited dataset files.
//!
//! The first line is a JSON header naming the format, the entity kind and the
//! class vocabulary. Every following non-empty line is one molecule:
//!
//! ```text
//! {"format":"blockfold-ds/1","entity":"protein","classes":["A","R",...]}
//! {"id":"m0","entity":"protein","chains":[{"chain_id":"A","blocks":[{"label":"G","atoms":[{"slot":"N","xyz":[0.0,1.5,0.0]}, ...]}]}]}
//! ```
//!
//! Coordinates are stored with six decimals.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::make_block;
use crate::frame::Vec3;
use crate::graph::{element_id, Atom, Block, EntityKind};

pub const DATASET_FORMAT: &str = "blockfold-ds/1";

/// Label marking a block whose identity is unknown.
pub const MASK_LABEL: &str = "X";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub entity: EntityKind,
    pub classes: Vec<String>,
}

impl DatasetHeader {
    pub fn new(entity: EntityKind, classes: Vec<String>) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            entity,
            classes,
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomRecord {
    pub slot: String,
    pub xyz: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRecord {
    pub label: String,
    pub atoms: Vec<AtomRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRecord {
    pub chain_id: String,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeRecord {
    pub id: String,
    pub entity: EntityKind,
    pub chains: Vec<ChainRecord>,
}

impl MoleculeRecord {
    pub fn num_blocks(&self) -> usize {
        self.chains.iter().map(|c| c.blocks.len()).sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockRecord> {
        self.chains.iter().flat_map(|c| c.blocks.iter())
    }

    /// Rounds every coordinate to the stored precision.
    pub fn quantize(&mut self) {
        for b in self.chains.iter_mut().flat_map(|c| c.blocks.iter_mut()) {
            for a in &mut b.atoms {
                for v in &mut a.xyz {
                    *v = quantize(*v);
                }
            }
        }
    }
}

/// Value obtained after writing `x` with six decimals and reading it back.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.6}").parse().unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<MoleculeRecord>,
}

/// Non-fatal problem found while reading a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl Dataset {
    pub fn new(entity: EntityKind, classes: Vec<String>) -> Self {
        Self {
            header: DatasetHeader::new(entity, classes),
            records: Vec::new(),
        }
    }

    pub fn to_string(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header).map_err(|e| Error::parse(None, e.to_string()))?;
        out.push('\n');
        for r in &self.records {
            let mut r = r.clone();
            r.quantize();
            out.push_str(&serde_json::to_string(&r).map_err(|e| Error::parse(None, e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_string()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses dataset text. Malformed records, unknown slots, unknown labels
    /// and blocks without their representative atom are reported as warnings
    /// and skipped; a bad header or an empty result is an error.
    pub fn parse_str(text: &str) -> Result<(Self, Vec<ParseWarning>)> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (header_no, header_line) = lines.next().ok_or_else(|| Error::parse(None, "no records"))?;
        let header: DatasetHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::parse(Some(header_no + 1), format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::parse(
                Some(header_no + 1),
                format!("unsupported format {:?}, expected {DATASET_FORMAT:?}", header.format),
            ));
        }
        if header.classes.is_empty() {
            return Err(Error::parse(Some(header_no + 1), "header lists no classes"));
        }
        let body: Vec<(usize, &str)> = lines.map(|(i, l)| (i + 1, l)).collect();
        let parsed = parse_parallel(&header, &body);
        let mut records = Vec::new();
        let mut warnings = Vec::new();
        for (rec, w) in parsed {
            warnings.extend(w);
            records.extend(rec);
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        if records.is_empty() {
            return Err(Error::parse(None, "no records"));
        }
        Ok((Self { header, records }, warnings))
    }

    pub fn read(path: &Path) -> Result<(Self, Vec<ParseWarning>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }
}

type LineResult = (Option<MoleculeRecord>, Vec<ParseWarning>);

fn parse_parallel(header: &DatasetHeader, body: &[(usize, &str)]) -> Vec<LineResult> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads <= 1 || body.len() < 64 {
        return body.iter().map(|&(no, l)| parse_record_line(header, no, l)).collect();
    }
    let chunk = body.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = body
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(no, l)| parse_record_line(header, no, l))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

fn parse_record_line(header: &DatasetHeader, line: usize, text: &str) -> LineResult {
    let mut warnings = Vec::new();
    let mut warn = |message: String| warnings.push(ParseWarning { line, message });
    let mut rec: MoleculeRecord = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => {
            warn(format!("malformed record skipped: {e}"));
            return (None, warnings);
        }
    };
    if rec.entity != header.entity {
        warn(format!(
            "record {} is {}, dataset is {}; skipped",
            rec.id, rec.entity, header.entity
        ));
        return (None, warnings);
    }
    let entity = header.entity;
    let rep = entity.slot_names()[entity.representative_slot()];
    for chain in &mut rec.chains {
        let mut kept = Vec::with_capacity(chain.blocks.len());
        for (bi, mut block) in std::mem::take(&mut chain.blocks).into_iter().enumerate() {
            let at = format!("{} chain {} block {bi}", rec.id, chain.chain_id);
            let mut seen = Vec::new();
            block.atoms.retain(|a| {
                if entity.slot_index(&a.slot).is_none() {
                    warn(format!("{at}: unknown slot {:?} ignored", a.slot));
                    false
                } else if !a.xyz.iter().all(|v| v.is_finite()) {
                    warn(format!("{at}: non-finite coordinate for {:?} ignored", a.slot));
                    false
                } else if seen.contains(&a.slot) {
                    warn(format!("{at}: duplicate slot {:?} ignored", a.slot));
                    false
                } else {
                    seen.push(a.slot.clone());
                    true
                }
            });
            if block.label != MASK_LABEL && header.class_index(&block.label).is_none() {
                warn(format!("{at}: unknown label {:?} masked", block.label));
                block.label = MASK_LABEL.to_string();
            }
            if !seen.iter().any(|s| s == rep) {
                warn(format!("{at}: missing representative atom {rep}; block dropped"));
                continue;
            }
            kept.push(block);
        }
        chain.blocks = kept;
    }
    rec.chains.retain(|c| !c.blocks.is_empty());
    if rec.num_blocks() == 0 {
        warn(format!("record {} has no usable blocks; skipped", rec.id));
        return (None, warnings);
    }
    (Some(rec), warnings)
}

/// Graph blocks of a validated record in chain order. Blocks whose frame
/// cannot be built are dropped and reported.
pub fn record_blocks(rec: &MoleculeRecord, header: &DatasetHeader) -> (Vec<Block>, Vec<String>) {
    let entity = header.entity;
    let mut blocks = Vec::with_capacity(rec.num_blocks());
    let mut warnings = Vec::new();
    for (i, b) in rec.blocks().enumerate() {
        let element = if entity == EntityKind::Atomic {
            element_id(&b.label).unwrap_or(0)
        } else {
            0
        };
        let mut atoms = vec![None; entity.arity()];
        for a in &b.atoms {
            if let Some(slot) = entity.slot_index(&a.slot) {
                atoms[slot] = Some(Atom {
                    position: Vec3::from(a.xyz),
                    element: if entity == EntityKind::Atomic {
                        element
                    } else {
                        entity.slot_element(slot)
                    },
                    slot,
                });
            }
        }
        match make_block(entity, atoms, header.class_index(&b.label)) {
            Ok(block) => blocks.push(block),
            Err(e) => warnings.push(format!("{} block {i}: {e}; dropped", rec.id)),
        }
    }
    (blocks, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> DatasetHeader {
        DatasetHeader::new(EntityKind::Protein, EntityKind::Protein.default_classes())
    }

    fn block(label: &str, shift: f64) -> BlockRecord {
        let atoms = [("N", [-0.5, 1.4, 0.0]), ("C1", [0.0, 0.0, 0.0]), ("C2", [1.5, 0.0, 0.0]), ("O", [2.1, 1.0, 0.3])]
            .iter()
            .map(|(s, p)| AtomRecord {
                slot: s.to_string(),
                xyz: [p[0] + shift, p[1] * 1.0000001, p[2] - shift / 3.0],
            })
            .collect();
        BlockRecord {
            label: label.into(),
            atoms,
        }
    }

    fn dataset() -> Dataset {
        let mut ds = Dataset::new(EntityKind::Protein, EntityKind::Protein.default_classes());
        for m in 0..3 {
            ds.records.push(MoleculeRecord {
                id: format!("m{m}"),
                entity: EntityKind::Protein,
                chains: vec![ChainRecord {
                    chain_id: "A".into(),
                    blocks: (0..4).map(|i| block(["G", "A", "X", "W"][i], 3.8 * i as f64 + 0.1234567 * m as f64)).collect(),
                }],
            });
        }
        ds
    }

    #[test]
    fn empty_input_has_no_records() {
        for text in ["", "\n\n", &format!("{}\n", serde_json::to_string(&header()).unwrap())] {
            match Dataset::parse_str(text) {
                Err(Error::Parse { msg, .. }) => assert_eq!(msg, "no records"),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn write_parse_round_trip_is_exact() {
        let ds = dataset();
        let text = ds.to_string().unwrap();
        let (back, warnings) = Dataset::parse_str(&text).unwrap();
        assert!(warnings.is_empty());
        let mut expected = ds.clone();
        expected.records.iter_mut().for_each(MoleculeRecord::quantize);
        assert_eq!(back, expected);
        let (again, _) = Dataset::parse_str(&back.to_string().unwrap()).unwrap();
        assert_eq!(again, back);
        assert_eq!(back.to_string().unwrap(), text);
    }

    #[test]
    fn bad_header_is_fatal() {
        assert!(matches!(Dataset::parse_str("{\"format\":\"other/1\",\"entity\":\"rna\",\"classes\":[\"A\"]}\n"), Err(Error::Parse { line: Some(1), .. })));
        assert!(matches!(Dataset::parse_str("not json\n"), Err(Error::Parse { line: Some(1), .. })));
    }

    #[test]
    fn unknown_slot_warns_and_is_ignored() {
        let mut ds = dataset();
        ds.records[1].chains[0].blocks[2].atoms.push(AtomRecord {
            slot: "CB".into(),
            xyz: [0.0; 3],
        });
        let text = ds.to_string().unwrap();
        let (back, warnings) = Dataset::parse_str(&text).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].line, 3);
        assert!(warnings[0].message.contains("CB"));
        assert_eq!(back.records[1].chains[0].blocks[2].atoms.len(), 4);
    }

    #[test]
    fn missing_representative_and_malformed_lines() {
        let mut ds = dataset();
        ds.records[0].chains[0].blocks[1].atoms.retain(|a| a.slot != "C1");
        let mut text = ds.to_string().unwrap();
        text.push_str("{\"id\": 3\n");
        let (back, warnings) = Dataset::parse_str(&text).unwrap();
        assert_eq!(back.records.len(), 3);
        assert_eq!(back.records[0].num_blocks(), 3);
        let lines: Vec<usize> = warnings.iter().map(|w| w.line).collect();
        assert_eq!(lines, vec![2, 5]);
    }

    #[test]
    fn masked_and_unknown_labels() {
        let mut ds = dataset();
        ds.records[0].chains[0].blocks[0].label = "Z".into();
        let (back, warnings) = Dataset::parse_str(&ds.to_string().unwrap()).unwrap();
        assert_eq!(warnings.len(), 1);
        let (blocks, w) = record_blocks(&back.records[0], &back.header);
        assert!(w.is_empty());
        let labels: Vec<Option<usize>> = blocks.iter().map(|b| b.label).collect();
        assert_eq!(labels, vec![None, Some(0), None, Some(17)]);
    }
}
