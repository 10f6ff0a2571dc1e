//! Joint training of the full model and its slices.
//!
//! Every step computes one gradient per objective on the same batch: the
//! original full-model loss, then the compatible loss of each training crop
//! ratio, each on a fresh tape. The per-objective gradients are combined by
//! the configured aggregation (projection by default) and applied with
//! SGD momentum. With no training ratios the whole machinery degenerates to
//! plain single-model training, bit for bit.
//!
//! Batches are identity-balanced: each draws `batch_size / instances_per_
//! class` classes and `instances_per_class` rows per class, so the triplet
//! term always has positives and the evidence head sees balanced labels.

use crate::data::{LabeledVectorSet, Split};
use crate::grad::{aggregate, step_seed, AggregationMode, GradError, GradientSet};
use crate::loss::{
    compatible_loss, original_loss, CompatibleLossConfig, LossError, OriginalLossConfig,
};
use crate::model::{
    save_checkpoint, Architecture, CheckpointError, ModelError, SwitchableModel,
};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{what} must be {requirement}, got {value}")]
    InvalidConfig {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("batch of {batch} with {k} instances per class needs {required} classes, dataset has {available}")]
    TooManyClassesPerBatch {
        batch: usize,
        k: usize,
        required: usize,
        available: usize,
    },
    #[error("dataset has {data} classes, model expects {arch}")]
    ClassMismatch { data: usize, arch: usize },
    #[error("dataset dim {data} does not match model input dim {arch}")]
    InputDimMismatch { data: usize, arch: usize },
    #[error("train split is empty")]
    NoTrainSamples,
    #[error("loss for objective {objective} is {value} at step {step}")]
    NonFiniteLoss {
        objective: String,
        value: f64,
        step: u64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Crop ratios trained jointly with the full model; empty means plain
    /// single-model training.
    pub train_ratios: Vec<f64>,
    pub aggregation: AggregationMode,
    pub compatible: CompatibleLossConfig,
    pub original: OriginalLossConfig,
    pub instances_per_class: usize,
    pub bn_momentum: f64,
    /// Save an intermediate checkpoint every this many epochs; 0 disables
    /// intermediates (the final checkpoint is always written).
    pub checkpoint_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            // 50 classes x 2 instances: every class appears in every batch,
            // which keeps the evidence heads calibrated across the label set
            batch_size: 100,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 42,
            train_ratios: vec![0.25, 0.5, 0.75],
            aggregation: AggregationMode::Project,
            compatible: CompatibleLossConfig::default(),
            original: OriginalLossConfig::default(),
            instances_per_class: 2,
            bn_momentum: 0.1,
            checkpoint_every_epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what, requirement, value| TrainError::InvalidConfig {
            what,
            requirement,
            value,
        };
        if self.epochs == 0 {
            return Err(bad("epochs", ">= 1", 0.0));
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", ">= 2", self.batch_size as f64));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad("learning_rate", "finite and > 0", self.learning_rate));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(bad("momentum", "in [0, 1)", self.momentum));
        }
        if self.instances_per_class == 0 {
            return Err(bad("instances_per_class", ">= 1", 0.0));
        }
        if self.batch_size % self.instances_per_class != 0 {
            return Err(bad(
                "batch_size",
                "a multiple of instances_per_class",
                self.batch_size as f64,
            ));
        }
        if self.original.kind == crate::loss::OriginalLossKind::SoftmaxCePlusTriplet {
            // triplet needs a positive and a negative for every anchor
            if self.instances_per_class < 2 {
                return Err(bad(
                    "instances_per_class",
                    ">= 2 with the triplet term",
                    self.instances_per_class as f64,
                ));
            }
            if self.batch_size / self.instances_per_class < 2 {
                return Err(bad(
                    "batch_size",
                    ">= 2 classes per batch with the triplet term",
                    self.batch_size as f64,
                ));
            }
            if !(self.original.triplet_margin.is_finite() && self.original.triplet_margin >= 0.0) {
                return Err(bad(
                    "triplet_margin",
                    "finite and >= 0",
                    self.original.triplet_margin,
                ));
            }
        }
        if !(self.compatible.lambda.is_finite() && self.compatible.lambda >= 0.0) {
            return Err(bad("lambda", "finite and >= 0", self.compatible.lambda));
        }
        if !(self.bn_momentum.is_finite() && self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(bad("bn_momentum", "in (0, 1)", self.bn_momentum));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub original_loss: f64,
    pub compatible_losses: BTreeMap<String, f64>,
    pub conflict_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_original_loss: f64,
    pub mean_compatible_losses: BTreeMap<String, f64>,
    pub mean_conflict_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub architecture: Architecture,
    pub config: TrainConfig,
    pub steps: u64,
    pub epochs: Vec<EpochSummary>,
    pub final_checkpoint: String,
}

pub(crate) enum Objective<'a> {
    Original(&'a OriginalLossConfig),
    Compatible {
        ratio: f64,
        cfg: &'a CompatibleLossConfig,
    },
}

impl Objective<'_> {
    pub(crate) fn name(&self) -> String {
        match self {
            Objective::Original(_) => String::from("original"),
            Objective::Compatible { ratio, .. } => format!("{ratio}"),
        }
    }

    fn ratio(&self) -> f64 {
        match self {
            Objective::Original(_) => 1.0,
            Objective::Compatible { ratio, .. } => *ratio,
        }
    }
}

/// Loss value and flat gradient of one objective on one batch, train mode.
pub(crate) fn objective_grad(
    model: &mut SwitchableModel,
    x: &Tensor,
    labels: &[usize],
    objective: &Objective,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let (features, mut pass) = model.forward_train(&mut tape, objective.ratio(), x)?;
    let (w, b) = model.bind_classifier(&mut tape, &mut pass)?;
    let loss = match objective {
        Objective::Original(cfg) => original_loss(&mut tape, features, w, b, labels, cfg)?,
        Objective::Compatible { cfg, .. } => {
            compatible_loss(&mut tape, features, w, b, labels, cfg)?
        }
    };
    let value = tape.value(loss).item().expect("loss is scalar");
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            objective: objective.name(),
            value,
            step: model.step(),
        });
    }
    tape.backward(loss)?;
    let mut grad = vec![0.0; model.trainable_len()];
    model.harvest(&tape, &pass, &mut grad);
    Ok((value, grad))
}

/// Loss value only, train mode (batch statistics). Used by the gradient
/// checker; running-stat side effects do not feed back into the value.
pub(crate) fn objective_value(
    model: &mut SwitchableModel,
    x: &Tensor,
    labels: &[usize],
    objective: &Objective,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (features, mut pass) = model.forward_train(&mut tape, objective.ratio(), x)?;
    let (w, b) = model.bind_classifier(&mut tape, &mut pass)?;
    let loss = match objective {
        Objective::Original(cfg) => original_loss(&mut tape, features, w, b, labels, cfg)?,
        Objective::Compatible { cfg, .. } => {
            compatible_loss(&mut tape, features, w, b, labels, cfg)?
        }
    };
    Ok(tape.value(loss).item().expect("loss is scalar"))
}

pub struct Trainer {
    model: SwitchableModel,
    cfg: TrainConfig,
    velocity: Vec<f64>,
    update: Vec<f64>,
}

impl Trainer {
    pub fn new(arch: Architecture, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = SwitchableModel::build(arch, &cfg.train_ratios, cfg.bn_momentum, cfg.seed)?;
        let n = model.trainable_len();
        Ok(Trainer {
            model,
            cfg,
            velocity: vec![0.0; n],
            update: vec![0.0; n],
        })
    }

    pub fn model(&self) -> &SwitchableModel {
        &self.model
    }

    pub fn into_model(self) -> SwitchableModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimization step on one batch: per-objective gradients,
    /// aggregation, momentum update.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        epoch: usize,
    ) -> Result<StepRecord, TrainError> {
        let step = self.model.step();
        let mut set = GradientSet::new();
        let ori = Objective::Original(&self.cfg.original);
        let (ori_loss, g) = objective_grad(&mut self.model, x, labels, &ori)?;
        set.push(ori.name(), g)?;
        let mut compat = BTreeMap::new();
        let ratios: Vec<f64> = self.model.ratios().training().to_vec();
        for ratio in ratios {
            let obj = Objective::Compatible {
                ratio,
                cfg: &self.cfg.compatible,
            };
            let (value, g) = objective_grad(&mut self.model, x, labels, &obj)?;
            set.push(obj.name(), g)?;
            compat.insert(obj.name(), value);
        }
        let conflict_rate = set.conflict_rate();
        let agg = aggregate(&set, self.cfg.aggregation, step_seed(self.cfg.seed, step))?;
        for ((v, u), a) in self.velocity.iter_mut().zip(&mut self.update).zip(&agg) {
            *v = self.cfg.momentum * *v - a;
            *u = self.cfg.learning_rate * *v;
        }
        self.model.apply_update(&self.update);
        self.model.set_step(step + 1);
        Ok(StepRecord {
            step,
            epoch,
            original_loss: ori_loss,
            compatible_losses: compat,
            conflict_rate,
        })
    }
}

// Identity-balanced batches: per batch, P shuffled classes, K rows each,
// buckets cycled when a class runs short.
fn epoch_batches(
    set: &LabeledVectorSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let train_rows = set.rows_of(Split::Train);
    if train_rows.is_empty() {
        return Err(TrainError::NoTrainSamples);
    }
    let k = cfg.instances_per_class;
    let p = cfg.batch_size / k;
    if p > set.num_classes() {
        return Err(TrainError::TooManyClassesPerBatch {
            batch: cfg.batch_size,
            k,
            required: p,
            available: set.num_classes(),
        });
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
    for &r in &train_rows {
        buckets[set.labels()[r]].push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
    let num_batches = (train_rows.len() / cfg.batch_size).max(1);
    let mut classes: Vec<usize> = (0..set.num_classes()).collect();
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        classes.shuffle(&mut rng);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for &class in classes.iter().take(p) {
            let bucket = &mut buckets[class];
            bucket.shuffle(&mut rng);
            for i in 0..k {
                batch.push(bucket[i % bucket.len()]);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // distinct stream from the per-step aggregation seeds
    seed ^ (epoch as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x5EED)
}

/// Full training run: writes `manifest.jsonl`, `summary.json`, and
/// checkpoints under `out_dir`, returns the trained model and the summary.
pub fn train(
    arch: Architecture,
    cfg: TrainConfig,
    set: &LabeledVectorSet,
    out_dir: &Path,
) -> Result<(SwitchableModel, RunSummary), TrainError> {
    if set.num_classes() != arch.num_classes {
        return Err(TrainError::ClassMismatch {
            data: set.num_classes(),
            arch: arch.num_classes,
        });
    }
    if set.dim() != arch.input_dim {
        return Err(TrainError::InputDimMismatch {
            data: set.dim(),
            arch: arch.input_dim,
        });
    }
    let mut trainer = Trainer::new(arch.clone(), cfg.clone())?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io {
            path: path.clone(),
            source,
        }
    };
    let mut manifest = std::io::BufWriter::new(
        std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?,
    );
    let mut epoch_summaries = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(set, &cfg, epoch)?;
        let mut ori_sum = 0.0;
        let mut compat_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut conflict_sum = 0.0;
        for rows in &batches {
            let (x, labels) = set.batch(rows);
            let rec = trainer.train_step(&x, &labels, epoch)?;
            let line = serde_json::to_string(&rec)?;
            writeln!(manifest, "{line}").map_err(io_err(&manifest_path))?;
            ori_sum += rec.original_loss;
            for (name, v) in &rec.compatible_losses {
                *compat_sums.entry(name.clone()).or_insert(0.0) += v;
            }
            conflict_sum += rec.conflict_rate;
        }
        let n = batches.len() as f64;
        epoch_summaries.push(EpochSummary {
            epoch,
            mean_original_loss: ori_sum / n,
            mean_compatible_losses: compat_sums
                .into_iter()
                .map(|(name, s)| (name, s / n))
                .collect(),
            mean_conflict_rate: conflict_sum / n,
        });
        let k = cfg.checkpoint_every_epochs;
        if k > 0 && (epoch + 1) % k == 0 && epoch + 1 != cfg.epochs {
            let path = out_dir.join(format!("checkpoint-epoch{:03}.sfsc", epoch + 1));
            save_checkpoint(trainer.model(), &path)?;
        }
    }
    manifest.flush().map_err(io_err(&manifest_path))?;
    let checkpoint_path = out_dir.join("checkpoint.sfsc");
    save_checkpoint(trainer.model(), &checkpoint_path)?;
    let summary = RunSummary {
        architecture: arch,
        config: cfg,
        steps: trainer.model().step(),
        epochs: epoch_summaries,
        final_checkpoint: checkpoint_path.display().to_string(),
    };
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)
        .map_err(io_err(&summary_path))?;
    Ok((trainer.into_model(), summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::loss::{LossKind, OriginalLossKind};

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 6,
            hidden_widths: vec![8, 8],
            feature_dim: 4,
            num_classes: 3,
        }
    }

    fn tiny_set() -> LabeledVectorSet {
        generate_synthetic(&SyntheticSpec {
            classes: 3,
            samples_per_class: 24,
            dim: 6,
            center_scale: 1.0,
            noise_sigma: 0.3,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 12,
            instances_per_class: 4,
            train_ratios: vec![0.5],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let ok = tiny_cfg();
        ok.validate().unwrap();
        let bad = TrainConfig { epochs: 0, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig { what: "epochs", .. })));
        let bad = TrainConfig { batch_size: 10, ..ok.clone() };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::InvalidConfig { what: "batch_size", .. })
        ));
        // triplet with a single instance per class cannot form positives
        let bad = TrainConfig {
            instances_per_class: 1,
            batch_size: 12,
            ..ok.clone()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::InvalidConfig { what: "instances_per_class", .. })
        ));
        // one class per batch has no negatives
        let bad = TrainConfig {
            batch_size: 4,
            instances_per_class: 4,
            ..ok.clone()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::InvalidConfig { what: "batch_size", .. })
        ));
        // same shape is fine without the triplet term
        let ce_only = TrainConfig {
            batch_size: 4,
            instances_per_class: 4,
            original: OriginalLossConfig {
                kind: OriginalLossKind::SoftmaxCe,
                triplet_margin: 0.3,
            },
            ..ok.clone()
        };
        ce_only.validate().unwrap();
        let bad = TrainConfig { momentum: 1.0, ..ok };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::InvalidConfig { what: "momentum", .. })
        ));
    }

    #[test]
    fn batches_are_identity_balanced_and_seeded() {
        let set = tiny_set();
        let cfg = tiny_cfg();
        let a = epoch_batches(&set, &cfg, 0).unwrap();
        let b = epoch_batches(&set, &cfg, 0).unwrap();
        assert_eq!(a, b);
        let c = epoch_batches(&set, &cfg, 1).unwrap();
        assert_ne!(a, c);
        // 3 classes * 24 * 0.7 = 48 train rows, batch 12 -> 4 batches
        assert_eq!(a.len(), 4);
        for batch in &a {
            assert_eq!(batch.len(), 12);
            let mut counts = std::collections::HashMap::new();
            for &r in batch {
                *counts.entry(set.labels()[r]).or_insert(0usize) += 1;
            }
            assert_eq!(counts.len(), 3);
            assert!(counts.values().all(|&c| c == 4));
            // only train rows are sampled
            for &r in batch {
                assert_eq!(set.split()[r], Split::Train);
            }
        }
    }

    #[test]
    fn class_budget_is_checked_against_dataset() {
        let set = tiny_set();
        let cfg = TrainConfig {
            batch_size: 16,
            instances_per_class: 4,
            ..tiny_cfg()
        };
        assert!(matches!(
            epoch_batches(&set, &cfg, 0),
            Err(TrainError::TooManyClassesPerBatch { required: 4, available: 3, .. })
        ));
    }

    // with no training ratios, the trainer must match a hand-rolled
    // single-model SGD momentum loop exactly
    #[test]
    fn empty_ratio_set_is_plain_training() {
        let set = tiny_set();
        let cfg = TrainConfig {
            train_ratios: vec![],
            epochs: 1,
            ..tiny_cfg()
        };
        let mut trainer = Trainer::new(tiny_arch(), cfg.clone()).unwrap();

        let mut model = SwitchableModel::build(tiny_arch(), &[], cfg.bn_momentum, cfg.seed).unwrap();
        let mut velocity = vec![0.0; model.trainable_len()];
        let batches = epoch_batches(&set, &cfg, 0).unwrap();
        for rows in &batches {
            let (x, labels) = set.batch(rows);
            trainer.train_step(&x, &labels, 0).unwrap();

            let mut tape = Tape::new();
            let (f, mut pass) = model.forward_train(&mut tape, 1.0, &x).unwrap();
            let (w, b) = model.bind_classifier(&mut tape, &mut pass).unwrap();
            let loss = original_loss(&mut tape, f, w, b, &labels, &cfg.original).unwrap();
            tape.backward(loss).unwrap();
            let mut g = vec![0.0; model.trainable_len()];
            model.harvest(&tape, &pass, &mut g);
            let upd: Vec<f64> = velocity
                .iter_mut()
                .zip(&g)
                .map(|(v, &gi)| {
                    *v = cfg.momentum * *v - gi;
                    cfg.learning_rate * *v
                })
                .collect();
            model.apply_update(&upd);
        }
        let got = trainer.model().read_trainable();
        let want = model.read_trainable();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn run_writes_manifest_summary_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set();
        let cfg = TrainConfig {
            checkpoint_every_epochs: 1,
            ..tiny_cfg()
        };
        let (model, summary) = train(tiny_arch(), cfg.clone(), &set, dir.path()).unwrap();
        // 2 epochs * 4 batches
        assert_eq!(summary.steps, 8);
        assert_eq!(model.step(), 8);
        assert_eq!(summary.epochs.len(), 2);

        let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        let records: Vec<StepRecord> = manifest
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 8);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.step, i as u64);
            assert_eq!(r.epoch, i / 4);
            assert!(r.original_loss.is_finite());
            assert_eq!(
                r.compatible_losses.keys().collect::<Vec<_>>(),
                vec!["0.5"]
            );
            assert!((0.0..=1.0).contains(&r.conflict_rate));
        }
        let mean: f64 = records[..4].iter().map(|r| r.original_loss).sum::<f64>() / 4.0;
        assert!((summary.epochs[0].mean_original_loss - mean).abs() < 1e-12);

        let loaded: RunSummary =
            serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(loaded, summary);

        // intermediate at epoch 1 plus the final
        assert!(dir.path().join("checkpoint-epoch001.sfsc").exists());
        let reloaded =
            crate::model::load_checkpoint(&dir.path().join("checkpoint.sfsc")).unwrap();
        assert_eq!(reloaded.step(), 8);
        let a = reloaded.read_trainable();
        let b = model.read_trainable();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let set = tiny_set();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m1, _) = train(tiny_arch(), tiny_cfg(), &set, d1.path()).unwrap();
        let (m2, _) = train(tiny_arch(), tiny_cfg(), &set, d2.path()).unwrap();
        let a = m1.read_trainable();
        let b = m2.read_trainable();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let ma = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let mb = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn joint_step_trains_all_objectives() {
        let set = tiny_set();
        let cfg = TrainConfig {
            train_ratios: vec![0.25, 0.5],
            ..tiny_cfg()
        };
        let mut trainer = Trainer::new(tiny_arch(), cfg.clone()).unwrap();
        let batches = epoch_batches(&set, &cfg, 0).unwrap();
        let (x, labels) = set.batch(&batches[0]);
        let before = trainer.model().read_trainable();
        let rec = trainer.train_step(&x, &labels, 0).unwrap();
        assert_eq!(
            rec.compatible_losses.keys().collect::<Vec<_>>(),
            vec!["0.25", "0.5"]
        );
        assert!(rec.original_loss.is_finite());
        let after = trainer.model().read_trainable();
        assert!(before.iter().zip(&after).any(|(a, b)| a != b));
    }

    #[test]
    fn dataset_and_arch_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set();
        let mut arch = tiny_arch();
        arch.num_classes = 7;
        assert!(matches!(
            train(arch, tiny_cfg(), &set, dir.path()),
            Err(TrainError::ClassMismatch { data: 3, arch: 7 })
        ));
        let mut arch = tiny_arch();
        arch.input_dim = 9;
        assert!(matches!(
            train(arch, tiny_cfg(), &set, dir.path()),
            Err(TrainError::InputDimMismatch { data: 6, arch: 9 })
        ));
    }

    #[test]
    fn baseline_loss_kind_runs() {
        let set = tiny_set();
        let cfg = TrainConfig {
            compatible: CompatibleLossConfig {
                lambda: 0.2,
                kind: LossKind::BctBaseline,
            },
            epochs: 1,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let (_, summary) = train(tiny_arch(), cfg, &set, dir.path()).unwrap();
        assert!(summary.epochs[0].mean_compatible_losses["0.5"].is_finite());
    }
}
