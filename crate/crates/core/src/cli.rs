//! Command-line surface: `train`, `eval`, `design`, `inspect` and `gen-toy`.
//!
//! Usage errors exit with 2, runtime errors with 1.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::blockgat::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::EntityKind;
use crate::io::config::RunConfig;
use crate::io::dataset::Dataset;
use crate::io::toy::{generate_toy_corpus, ToyConfig};
use crate::training::{evaluate, prepare_samples, Sample, TaskSpec, Trainer};

#[derive(Debug, Parser)]
#[command(name = "blockfold", version, about = "Inverse folding on frame-based block graphs")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Neighbours per block.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Virtual blocks per molecule.
    #[arg(long, global = true)]
    pub n_virtual: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub device_threads: Option<usize>,
}

impl Overrides {
    /// Config file (if any) with command-line values applied on top.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let m = &mut rc.model;
        m.k = self.k.or(m.k);
        m.n_virtual = self.n_virtual.or(m.n_virtual);
        m.layers = self.layers.or(m.layers);
        m.hidden = self.hidden.or(m.hidden);
        m.dropout = self.dropout.or(m.dropout);
        let t = &mut rc.train;
        t.epochs = self.epochs.or(t.epochs);
        t.lr = self.lr.or(t.lr);
        t.batch = self.batch.or(t.batch);
        t.seed = self.seed.or(t.seed);
        t.device_threads = self.device_threads.or(t.device_threads);
        Ok(rc)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.jsonl, last.ckpt and best.ckpt to --out.
    Train {
        #[arg(long, value_name = "PATH")]
        train: PathBuf,
        #[arg(long, value_name = "PATH")]
        valid: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Per-molecule recovery and medians of a checkpoint on a dataset (JSON).
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Predicted sequence and per-position class probabilities (JSON lines).
    Design {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Graph statistics for every molecule (JSON lines).
    Inspect {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Write a synthetic corpus.
    GenToy {
        #[arg(long, default_value = "protein")]
        entity: EntityKind,
        #[arg(long, default_value_t = 20)]
        molecules: usize,
        #[arg(long, default_value_t = 30)]
        min_len: usize,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
        /// Class count for atomic corpora.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn load_for_checkpoint(ck: &Checkpoint, data: &Path) -> Result<Vec<Sample>> {
    let (ds, _) = Dataset::read(data)?;
    let cfg = &ck.header.model;
    if ds.header.entity != cfg.entity {
        return Err(Error::EntityMismatch {
            expected: cfg.entity.to_string(),
            found: ds.header.entity.to_string(),
        });
    }
    if ds.header.classes != ck.header.class_names {
        return Err(Error::Config("dataset classes differ from the checkpoint's".into()));
    }
    Ok(prepare_samples(&ds, cfg.k, cfg.gat.n_virtual)?.0)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let rc = cli.overrides.run_config()?;
    match &cli.command {
        Command::Train {
            train,
            valid,
            out: dir,
            resume,
        } => {
            let tc = rc.train_config()?;
            let (train_ds, _) = Dataset::read(train)?;
            let (valid_ds, _) = Dataset::read(valid)?;
            if train_ds.header.entity != valid_ds.header.entity || train_ds.header.classes != valid_ds.header.classes {
                return Err(Error::Config("train and valid datasets have different headers".into()));
            }
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&Checkpoint::load(path)?, tc)?,
                None => {
                    let task = TaskSpec::from_header(&train_ds.header);
                    let mc = rc.model_config(task.entity, task.num_classes())?;
                    Trainer::new(mc, task, tc)?
                }
            };
            let mc = &trainer.model.config;
            let (train_s, _) = prepare_samples(&train_ds, mc.k, mc.gat.n_virtual)?;
            let (valid_s, _) = prepare_samples(&valid_ds, mc.k, mc.gat.n_virtual)?;
            let records = trainer.fit(&train_s, &valid_s, Some(dir))?;
            let last_valid = records.iter().rev().find(|r| r.split == "valid");
            write_json(
                out,
                &serde_json::json!({
                    "epochs": trainer.state.epochs_done,
                    "steps": trainer.state.steps_done,
                    "final_valid_median": last_valid.and_then(|r| r.median_recovery),
                    "best_valid_median": trainer.state.best_valid_median,
                    "best_epoch": trainer.state.best_epoch,
                }),
            )
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::load(checkpoint)?;
            let samples = load_for_checkpoint(&ck, data)?;
            let model = ck.to_model()?;
            let threads = rc.train.device_threads.unwrap_or(1).max(1);
            let report = evaluate(&model, &samples, threads)?;
            write_json(out, &report)
        }
        Command::Design { checkpoint, data } => {
            let ck = Checkpoint::load(checkpoint)?;
            let samples = load_for_checkpoint(&ck, data)?;
            let model = ck.to_model()?;
            let names = &ck.header.class_names;
            let sep = if names.iter().all(|n| n.chars().count() == 1) { "" } else { " " };
            for s in &samples {
                let logits = model.predict(&s.graph)?;
                let mut sequence = Vec::with_capacity(logits.nrows());
                let mut probabilities = Vec::with_capacity(logits.nrows());
                for row in logits.rows() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    sequence.push(names[crate::training::argmax(row)].as_str());
                    probabilities.push(e.iter().map(|v| v / z).collect::<Vec<f64>>());
                }
                write_json(
                    out,
                    &serde_json::json!({
                        "id": s.id,
                        "sequence": sequence.join(sep),
                        "classes": names,
                        "probabilities": probabilities,
                    }),
                )?;
            }
            Ok(())
        }
        Command::Inspect { data } => {
            let (ds, _) = Dataset::read(data)?;
            let mc = rc.model_config(ds.header.entity, ds.header.classes.len())?;
            let (samples, _) = prepare_samples(&ds, mc.k, mc.gat.n_virtual)?;
            for s in &samples {
                let g = &s.graph;
                write_json(
                    out,
                    &serde_json::json!({
                        "id": s.id,
                        "n": g.num_real(),
                        "n_virtual": g.n_virtual,
                        "k": g.k,
                        "edges": g.edges.len(),
                        "knn_edges": g.knn_edge_count(),
                        "virtual_edges": g.virtual_edge_count(),
                    }),
                )?;
            }
            Ok(())
        }
        Command::GenToy {
            entity,
            molecules,
            min_len,
            max_len,
            classes,
            out: path,
        } => {
            let cfg = ToyConfig {
                entity: *entity,
                molecules: *molecules,
                seed: rc.train.seed.unwrap_or(0),
                min_len: *min_len,
                max_len: *max_len,
                atomic_classes: *classes,
            };
            generate_toy_corpus(&cfg)?.write(path)?;
            writeln!(out, "wrote {molecules} {entity} molecules to {}", path.display())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}
