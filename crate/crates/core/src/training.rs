//! Objective, metrics, optimiser and the train / evaluate loops.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::blockgat::checkpoint::{Checkpoint, TrainingState};
use crate::blockgat::{Mode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{attach_virtual_blocks, batch_graphs, build_knn_graph, BlockGraph, EntityKind};
use crate::io::dataset::{record_blocks, Dataset, DatasetHeader};

/// Label vocabulary of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub entity: EntityKind,
    pub class_names: Vec<String>,
}

impl TaskSpec {
    /// Protein (20 amino acids) or RNA (A, U, C, G). Atomic vocabularies
    /// come from the dataset.
    pub fn for_entity(entity: EntityKind) -> Result<Self> {
        let class_names = entity.default_classes();
        if class_names.is_empty() {
            return Err(Error::Config(format!("{entity} tasks take their classes from the dataset header")));
        }
        Ok(Self { entity, class_names })
    }

    pub fn from_header(header: &DatasetHeader) -> Self {
        Self {
            entity: header.entity,
            class_names: header.classes.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn check_samples(&self, samples: &[Sample]) -> Result<()> {
        for s in samples {
            if s.graph.entity != self.entity {
                return Err(Error::EntityMismatch {
                    expected: self.entity.to_string(),
                    found: s.graph.entity.to_string(),
                });
            }
            if let Some(bad) = s.targets().into_iter().flatten().find(|&t| t >= self.num_classes()) {
                return Err(Error::Config(format!("{}: label {bad} outside {} classes", s.id, self.num_classes())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads for evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch size and threads must be positive".into()));
        }
        Ok(())
    }
}

/// One molecule ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Number of real blocks.
    pub length: usize,
    pub graph: BlockGraph,
}

impl Sample {
    pub fn new(id: impl Into<String>, graph: BlockGraph) -> Self {
        Self {
            id: id.into(),
            length: graph.num_real(),
            graph,
        }
    }

    pub fn targets(&self) -> Vec<Option<usize>> {
        self.graph.real_labels()
    }
}

/// Builds the kNN graph with virtual blocks for every record. Molecules with
/// fewer than two usable blocks are skipped and reported.
pub fn prepare_samples(ds: &Dataset, k: usize, n_virtual: usize) -> Result<(Vec<Sample>, Vec<String>)> {
    let mut samples = Vec::with_capacity(ds.records.len());
    let mut warnings = Vec::new();
    for rec in &ds.records {
        let (blocks, w) = record_blocks(rec, &ds.header);
        warnings.extend(w);
        match build_knn_graph(blocks, k) {
            Ok(g) => samples.push(Sample::new(rec.id.clone(), attach_virtual_blocks(g, n_virtual)?)),
            Err(e @ Error::EmptyMolecule(_)) => warnings.push(format!("{}: {e}; skipped", rec.id)),
            Err(e) => return Err(e),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((samples, warnings))
}

/// Mean negative log-likelihood over labelled rows and its gradient with
/// respect to the logits.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor)> {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::AllMasked);
    }
    let mut grad = Tensor::zeros(logits.dim());
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t];
        for (j, &v) in row.iter().enumerate() {
            grad[(i, j)] = ((v - lse).exp() - if j == t { 1.0 } else { 0.0 }) / count as f64;
        }
    }
    Ok((total / count as f64, grad))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of labelled rows whose argmax equals the label.
pub fn recovery(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    let mut hits = 0usize;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            count += 1;
            hits += usize::from(argmax(logits.row(i)) == t);
        }
    }
    if count == 0 {
        return Err(Error::AllMasked);
    }
    Ok(hits as f64 / count as f64)
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Length bucket boundaries (real blocks).
pub const BUCKET_EDGES: [usize; 3] = [100, 300, 500];

/// Median recovery per length bucket. `long` holds molecules of 500 blocks
/// or more, so the four length buckets partition the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMedians {
    pub lt100: Option<f64>,
    pub lt300: Option<f64>,
    pub lt500: Option<f64>,
    pub long: Option<f64>,
    pub full: Option<f64>,
}

pub fn length_bucket(length: usize) -> usize {
    BUCKET_EDGES.iter().take_while(|&&e| length >= e).count()
}

pub fn bucket_medians(per_molecule: &[(usize, f64)]) -> BucketMedians {
    let mut parts: [Vec<f64>; 4] = Default::default();
    for &(len, r) in per_molecule {
        parts[length_bucket(len)].push(r);
    }
    let all: Vec<f64> = per_molecule.iter().map(|&(_, r)| r).collect();
    BucketMedians {
        lt100: median(&parts[0]),
        lt300: median(&parts[1]),
        lt500: median(&parts[2]),
        long: median(&parts[3]),
        full: median(&all),
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &crate::params::ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut crate::params::ParamStore) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }

    fn export(&self, store: &crate::params::ParamStore, ck: &mut Checkpoint) {
        for (((_, p), m), v) in store.iter().zip(&self.m).zip(&self.v) {
            ck.tensors.insert(format!("adam.m/{}", p.name), m.clone());
            ck.tensors.insert(format!("adam.v/{}", p.name), v.clone());
        }
    }

    fn import(&mut self, store: &crate::params::ParamStore, ck: &Checkpoint, steps: usize) -> Result<()> {
        self.steps = steps;
        for (((_, p), m), v) in store.iter().zip(&mut self.m).zip(&mut self.v) {
            for (prefix, slot) in [("adam.m", m), ("adam.v", v)] {
                let name = format!("{prefix}/{}", p.name);
                let t = ck
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser tensor {name}")))?;
                if t.dim() != slot.dim() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
                }
                slot.assign(t);
            }
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub median_recovery: Option<f64>,
    pub buckets: BucketMedians,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeResult {
    pub id: String,
    pub length: usize,
    pub recovery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub molecules: Vec<MoleculeResult>,
    /// Mean cross-entropy over all labelled blocks.
    pub loss: f64,
    pub median_recovery: Option<f64>,
    pub buckets: BucketMedians,
}

struct MoleculeEval {
    result: Option<MoleculeResult>,
    nll_sum: f64,
    labelled: usize,
}

fn eval_one(model: &Model, s: &Sample) -> Result<MoleculeEval> {
    let logits = model.predict(&s.graph)?;
    let targets = s.targets();
    let labelled = targets.iter().flatten().count();
    if labelled == 0 {
        return Ok(MoleculeEval {
            result: None,
            nll_sum: 0.0,
            labelled,
        });
    }
    let (loss, _) = cross_entropy_loss(&logits, &targets)?;
    Ok(MoleculeEval {
        result: Some(MoleculeResult {
            id: s.id.clone(),
            length: s.length,
            recovery: recovery(&logits, &targets)?,
        }),
        nll_sum: loss * labelled as f64,
        labelled,
    })
}

/// Eval-mode forward of every molecule. Molecules without labels are left
/// out of the report.
pub fn evaluate(model: &Model, samples: &[Sample], threads: usize) -> Result<EvalReport> {
    for s in samples {
        if s.graph.entity != model.config.entity {
            return Err(Error::EntityMismatch {
                expected: model.config.entity.to_string(),
                found: s.graph.entity.to_string(),
            });
        }
    }
    let threads = threads.max(1).min(samples.len().max(1));
    let evals: Vec<MoleculeEval> = if threads == 1 {
        samples.iter().map(|s| eval_one(model, s)).collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| eval_one(model, s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(samples.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    let nll: f64 = evals.iter().map(|e| e.nll_sum).sum();
    let labelled: usize = evals.iter().map(|e| e.labelled).sum();
    let molecules: Vec<MoleculeResult> = evals.into_iter().filter_map(|e| e.result).collect();
    let pairs: Vec<(usize, f64)> = molecules.iter().map(|m| (m.length, m.recovery)).collect();
    let buckets = bucket_medians(&pairs);
    Ok(EvalReport {
        loss: if labelled == 0 { 0.0 } else { nll / labelled as f64 },
        median_recovery: buckets.full,
        buckets,
        molecules,
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Dropout seed of optimiser step `step`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    splitmix(seed ^ splitmix(step as u64))
}

/// Visiting order of the training set in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

/// Model, optimiser and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub task: TaskSpec,
    pub config: TrainConfig,
    pub state: TrainingState,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, task: TaskSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model_config.entity != task.entity || model_config.num_classes != task.num_classes() {
            return Err(Error::Config(format!(
                "model is {} with {} classes, task is {} with {}",
                model_config.entity,
                model_config.num_classes,
                task.entity,
                task.num_classes()
            )));
        }
        let model = Model::new(model_config, config.seed)?;
        let adam = Adam::new(&model.params, config.learning_rate);
        Ok(Self {
            model,
            adam,
            task,
            config,
            state: TrainingState {
                epochs_done: 0,
                steps_done: 0,
                best_valid_median: None,
                best_epoch: None,
            },
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = ck
            .header
            .training
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        if config.seed != ck.header.init_seed {
            log::warn!(
                "resuming with seed {} but the run started with {}",
                config.seed,
                ck.header.init_seed
            );
        }
        let model = ck.to_model()?;
        let mut adam = Adam::new(&model.params, config.learning_rate);
        adam.import(&model.params, ck, state.steps_done)?;
        Ok(Self {
            task: TaskSpec {
                entity: model.config.entity,
                class_names: ck.header.class_names.clone(),
            },
            model,
            adam,
            config,
            state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.task.class_names.clone());
        ck.header.init_seed = self.config.seed;
        ck.header.training = Some(self.state.clone());
        self.adam.export(&self.model.params, &mut ck);
        ck
    }

    /// One pass over `train` in shuffled batches. Returns the mean batch loss
    /// and the per-molecule recoveries seen during training.
    pub fn train_epoch(&mut self, train: &[Sample], out_dir: Option<&Path>) -> Result<(f64, Vec<(usize, f64)>)> {
        let epoch = self.state.epochs_done;
        let order = epoch_order(self.config.seed, epoch, train.len());
        let mut losses = Vec::new();
        let mut per_molecule = Vec::with_capacity(train.len());
        for chunk in order.chunks(self.config.batch_size) {
            let members: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let graphs: Vec<BlockGraph> = members.iter().map(|s| s.graph.clone()).collect();
            let batch = batch_graphs(&graphs)?;
            let targets = batch.real_labels();
            if targets.iter().all(Option::is_none) {
                log::warn!("epoch {epoch}: batch without labels skipped");
                continue;
            }
            let inputs = self.model.inputs(&batch)?;
            let step = self.state.steps_done;
            self.model.params.zero_grad();
            let (loss, logits) = self.model.backward(
                &inputs,
                &targets,
                Mode::Train {
                    seed: step_seed(self.config.seed, step),
                },
            )?;
            if !loss.is_finite() {
                let ids: Vec<&str> = members.iter().map(|s| s.id.as_str()).collect();
                let detail = format!("epoch {epoch}, batch {ids:?}, loss {loss}");
                log::error!("non-finite loss: {detail}");
                if let Some(dir) = out_dir {
                    self.dump_diagnostic(dir, epoch, step, &ids, loss)?;
                }
                return Err(Error::NonFiniteLoss { step, detail });
            }
            self.adam.step(&mut self.model.params);
            self.state.steps_done += 1;
            losses.push(loss);

            let gids = batch.real_graph_ids();
            for (m, s) in members.iter().enumerate() {
                let rows: Vec<usize> = (0..gids.len()).filter(|&r| gids[r] == m).collect();
                let sub = logits.select(ndarray::Axis(0), &rows);
                let t: Vec<Option<usize>> = rows.iter().map(|&r| targets[r]).collect();
                if let Ok(r) = recovery(&sub, &t) {
                    per_molecule.push((s.length, r));
                }
            }
        }
        self.state.epochs_done += 1;
        let mean = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        Ok((mean, per_molecule))
    }

    fn dump_diagnostic(&self, dir: &Path, epoch: usize, step: usize, ids: &[&str], loss: f64) -> Result<()> {
        let norms: Vec<(String, f64, f64)> = self
            .model
            .params
            .iter()
            .map(|(_, p)| {
                let v = p.value.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                let g = p.grad.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                (p.name.clone(), v, g)
            })
            .collect();
        let dump = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "molecules": ids,
            "loss": loss.to_string(),
            "max_abs_value_and_grad": norms,
        });
        let path = dir.join(DIAGNOSTIC_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap()).map_err(|e| Error::io(&path, e))
    }

    /// Trains until `config.epochs`, evaluating `valid` after every epoch.
    /// With `out_dir`, metric records are appended to `metrics.jsonl` and
    /// `last.ckpt` / `best.ckpt` are rewritten as the run progresses.
    pub fn fit(&mut self, train: &[Sample], valid: &[Sample], out_dir: Option<&Path>) -> Result<Vec<MetricRecord>> {
        if train.is_empty() || valid.is_empty() {
            return Err(Error::Config("training needs non-empty train and valid splits".into()));
        }
        self.task.check_samples(train)?;
        self.task.check_samples(valid)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.state.epochs_done == 0 {
                let path = dir.join(METRICS_FILE);
                std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                let ck = self.checkpoint();
                ck.save(&dir.join(LAST_CHECKPOINT))?;
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        let mut records = Vec::new();
        while self.state.epochs_done < self.config.epochs {
            let (loss, per_molecule) = self.train_epoch(train, out_dir)?;
            let epoch = self.state.epochs_done;
            let buckets = bucket_medians(&per_molecule);
            let train_rec = MetricRecord {
                epoch,
                split: "train".into(),
                loss,
                median_recovery: buckets.full,
                buckets,
            };
            let report = evaluate(&self.model, valid, self.config.threads)?;
            let valid_rec = MetricRecord {
                epoch,
                split: "valid".into(),
                loss: report.loss,
                median_recovery: report.median_recovery,
                buckets: report.buckets,
            };
            log::info!(
                "epoch {epoch}: train loss {:.4} median {:?}, valid loss {:.4} median {:?}",
                train_rec.loss,
                train_rec.median_recovery,
                valid_rec.loss,
                valid_rec.median_recovery
            );
            let improved = match (report.median_recovery, self.state.best_valid_median) {
                (Some(m), Some(best)) => m > best,
                (Some(_), None) => true,
                _ => false,
            };
            if improved {
                self.state.best_valid_median = report.median_recovery;
                self.state.best_epoch = Some(epoch);
            }
            if let Some(dir) = out_dir {
                let path = dir.join(METRICS_FILE);
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                for r in [&train_rec, &valid_rec] {
                    writeln!(f, "{}", serde_json::to_string(r).unwrap()).map_err(|e| Error::io(&path, e))?;
                }
                let ck = self.checkpoint();
                ck.save(&dir.join(LAST_CHECKPOINT))?;
                if improved {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            records.push(train_rec);
            records.push(valid_rec);
        }
        Ok(records)
    }
}

/// Reads a metric log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(Some(i + 1), e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::toy::{generate_toy_corpus, ToyConfig};
    use crate::params::ParamStore;
    use rand::Rng;

    #[test]
    fn cross_entropy_anchors() {
        let uniform = Tensor::zeros((3, 20));
        let (loss, _) = cross_entropy_loss(&uniform, &[Some(0), Some(5), Some(19)]).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
        let mut sat = Tensor::zeros((2, 4));
        sat[(0, 1)] = 1e6;
        sat[(1, 3)] = 1e6;
        let (loss, _) = cross_entropy_loss(&sat, &[Some(1), Some(3)]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(matches!(cross_entropy_loss(&sat, &[None, None]), Err(Error::AllMasked)));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::from_shape_fn((5, 6), |_| rng.gen_range(-2.0..2.0));
        let targets = [Some(2), None, Some(0), Some(5), Some(2)];
        let (_, grad) = cross_entropy_loss(&logits, &targets).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..6 {
                let mut p = logits.clone();
                p[(i, j)] += h;
                let mut m = logits.clone();
                m[(i, j)] -= h;
                let fd = (cross_entropy_loss(&p, &targets).unwrap().0 - cross_entropy_loss(&m, &targets).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[(i, j)]).abs() < 1e-8, "{i},{j}: {fd} vs {}", grad[(i, j)]);
            }
        }
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn recovery_rules() {
        let mut logits = Tensor::zeros((3, 4));
        logits[(0, 2)] = 1.0;
        logits[(2, 3)] = 5.0;
        // row 1 is a four-way tie, resolved to class 0
        assert_eq!(recovery(&logits, &[Some(2), Some(0), Some(3)]).unwrap(), 1.0);
        assert_eq!(recovery(&logits, &[Some(2), Some(1), None]).unwrap(), 0.5);
        assert!(recovery(&logits, &[None, None, None]).is_err());
    }

    #[test]
    fn random_logits_recover_one_in_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let logits = Tensor::from_shape_fn((n, 4), |_| rng.gen::<f64>());
        let targets: Vec<Option<usize>> = (0..n).map(|_| Some(rng.gen_range(0..4))).collect();
        let r = recovery(&logits, &targets).unwrap();
        assert!((r - 0.25).abs() < 0.01, "{r}");
    }

    #[test]
    fn medians_and_buckets() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[0.3]), Some(0.3));
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.9]), Some(0.30000000000000004));
        let data = [(50, 0.2), (99, 0.4), (100, 0.5), (299, 0.7), (300, 0.1), (499, 0.3), (500, 0.9), (10, 0.6)];
        let b = bucket_medians(&data);
        assert_eq!(b.lt100, median(&[0.2, 0.4, 0.6]));
        assert_eq!(b.lt300, Some(0.6));
        assert_eq!(b.lt500, Some(0.2));
        assert_eq!(b.long, Some(0.9));
        assert_eq!(b.full, median(&data.map(|d| d.1)));
        let mut counts = [0; 4];
        for (len, _) in data {
            counts[length_bucket(len)] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), data.len());
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new(1);
        s.add_uniform("a", 2, 3, false);
        s.add_uniform("b", 1, 4, false);
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(&s, 1e-3);
        for _ in 0..3 {
            adam.step(&mut s);
        }
        assert!(s.same_values(&before));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = store();
        let before = s.clone();
        let g = [0.5, -2.0, 1e-3, 3.0];
        for p in s.iter_mut() {
            p.grad = Tensor::from_shape_fn(p.grad.dim(), |(i, j)| g[(i + j) % 4]);
        }
        let mut adam = Adam::new(&s, 1e-3);
        adam.step(&mut s);
        for ((_, p), (_, q)) in s.iter().zip(before.iter()) {
            for ((w, w0), gr) in p.value.iter().zip(q.value.iter()).zip(p.grad.iter()) {
                let expected = w0 - 1e-3 * gr / (gr.abs() + 1e-8);
                assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            }
        }
    }

    fn toy(n: usize, seed: u64) -> Vec<Sample> {
        let mut cfg = ToyConfig::new(EntityKind::Protein, n, seed);
        cfg.min_len = 8;
        cfg.max_len = 12;
        let ds = generate_toy_corpus(&cfg).unwrap();
        prepare_samples(&ds, 6, 1).unwrap().0
    }

    fn small_config() -> (ModelConfig, TaskSpec, TrainConfig) {
        let mut mc = ModelConfig::for_entity(EntityKind::Protein, 20);
        mc.k = 6;
        mc.gat.layers = 1;
        mc.gat.hidden = 8;
        mc.gat.virtual_atoms = 2;
        mc.gat.n_virtual = 1;
        let tc = TrainConfig {
            batch_size: 2,
            epochs: 2,
            seed: 3,
            ..Default::default()
        };
        (mc, TaskSpec::for_entity(EntityKind::Protein).unwrap(), tc)
    }

    #[test]
    fn training_is_deterministic() {
        let train = toy(4, 1);
        let valid = toy(2, 2);
        let (mc, task, tc) = small_config();
        let mut a = Trainer::new(mc.clone(), task.clone(), tc).unwrap();
        let mut b = Trainer::new(mc, task, tc).unwrap();
        let ra = a.fit(&train, &valid, None).unwrap();
        let rb = b.fit(&train, &valid, None).unwrap();
        assert_eq!(ra, rb);
        assert!(a.model.params.same_values(&b.model.params));
        assert_eq!(a.state.steps_done, 4);
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let train = toy(2, 1);
        let (mc, task, mut tc) = small_config();
        tc.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(mc.clone(), task, tc).unwrap();
        assert!(t.fit(&train, &train, Some(dir.path())).unwrap().is_empty());
        let ck = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        let init = Model::new(mc, tc.seed).unwrap();
        assert!(ck.to_model().unwrap().params.same_values(&init.params));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let train = toy(4, 1);
        let valid = toy(2, 2);
        let (mc, task, tc) = small_config();
        let mut full = Trainer::new(mc.clone(), task.clone(), tc).unwrap();
        let uninterrupted = full.fit(&train, &valid, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(mc, task, TrainConfig { epochs: 1, ..tc }).unwrap();
        first.fit(&train, &valid, Some(dir.path())).unwrap();
        let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        let mut resumed = Trainer::resume(&ck, tc).unwrap();
        let rest = resumed.fit(&train, &valid, Some(dir.path())).unwrap();
        assert_eq!(rest, uninterrupted[2..]);
        assert!(resumed.model.params.same_values(&full.model.params));
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), uninterrupted);
    }

    #[test]
    fn batching_does_not_change_eval_logits() {
        let samples = toy(3, 6);
        let (mc, _, _) = small_config();
        let mut model = Model::new(mc, 2).unwrap();
        model.params.randomize(5, 0.3);
        let graphs: Vec<BlockGraph> = samples.iter().map(|s| s.graph.clone()).collect();
        let batched = model.predict(&batch_graphs(&graphs).unwrap()).unwrap();
        let mut row = 0;
        for g in &graphs {
            let single = model.predict(g).unwrap();
            let part = batched.slice(ndarray::s![row..row + single.nrows(), ..]);
            let diff = (&part - &single).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(diff <= 1e-12, "{diff}");
            row += single.nrows();
        }
    }

    #[test]
    fn evaluation_checks_entity_and_threads_agree() {
        let samples = toy(5, 6);
        let (mc, _, _) = small_config();
        let model = Model::new(mc, 2).unwrap();
        let one = evaluate(&model, &samples, 1).unwrap();
        let many = evaluate(&model, &samples, 3).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.molecules.len(), 5);
        let single = evaluate(&model, &samples[..1], 1).unwrap();
        assert_eq!(single.median_recovery, Some(single.molecules[0].recovery));

        let mut rna = ModelConfig::for_entity(EntityKind::Rna, 4);
        rna.gat.layers = 0;
        rna.gat.hidden = 4;
        let rna_model = Model::new(rna, 1).unwrap();
        assert!(matches!(evaluate(&rna_model, &samples, 1), Err(Error::EntityMismatch { .. })));
    }
}
