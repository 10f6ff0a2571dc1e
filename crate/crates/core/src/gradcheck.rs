//! Finite-difference verification of the gradient tape.
//!
//! Probes every trainable parameter of a small switchable model with central
//! differences, one objective at a time, and compares against the tape
//! gradient. Errors are measured relative to the sup norm of the gradient
//! pair so that dead units with near-zero true gradient do not drown the
//! comparison in finite-difference noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::loss::{CompatibleLossConfig, LossKind, OriginalLossConfig};
use crate::model::{Architecture, SwitchableModel};
use crate::tensor::Tensor;
use crate::train::{objective_grad, objective_value, Objective, TrainError};

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Shape and loss setup for one verification run.
#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub arch: Architecture,
    pub train_ratios: Vec<f64>,
    pub original: OriginalLossConfig,
    pub compatible: CompatibleLossConfig,
    pub batch: usize,
    pub seed: u64,
    /// Test fixture: adds a constant to one tape gradient entry so the
    /// comparison must fail.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            arch: Architecture {
                input_dim: 6,
                hidden_widths: vec![8, 8],
                feature_dim: 4,
                num_classes: 3,
            },
            train_ratios: vec![0.25, 0.5, 0.75],
            original: OriginalLossConfig::default(),
            compatible: CompatibleLossConfig::default(),
            batch: 4,
            seed: 7,
            corrupt_gradient: false,
        }
    }
}

/// Comparison outcome for one objective, worst parameter first.
#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveCheck {
    pub objective: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub tape_grad: f64,
    pub fd_grad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub epsilon: f64,
    pub threshold: f64,
    pub objectives: Vec<ObjectiveCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.objectives.iter().all(|o| o.max_rel_err < self.threshold)
    }

    /// Objective with the largest error. Reports always hold at least the
    /// original objective, so this cannot be empty.
    pub fn worst(&self) -> &ObjectiveCheck {
        self.objectives
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("report holds at least one objective")
    }
}

pub fn run_gradcheck(settings: &GradCheckSettings) -> Result<GradReport, TrainError> {
    let base = SwitchableModel::build(
        settings.arch.clone(),
        &settings.train_ratios,
        0.1,
        settings.seed,
    )?;

    // Probe batch: inputs in (-1, 1), labels cycling through the classes.
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xFD);
    let data: Vec<f64> = (0..settings.batch * settings.arch.input_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::matrix(settings.batch, settings.arch.input_dim, data)?;
    let labels: Vec<usize> = (0..settings.batch)
        .map(|i| i % settings.arch.num_classes)
        .collect();

    let bct = CompatibleLossConfig {
        kind: LossKind::BctBaseline,
        ..settings.compatible
    };
    let training = base.ratios().training().to_vec();
    // The softmax baseline head is checked on a mid ratio so it also covers
    // the sliced forward path.
    let bct_ratio = training.get(training.len() / 2).copied().unwrap_or(1.0);

    let mut jobs: Vec<(String, Objective)> = Vec::new();
    jobs.push((String::from("original"), Objective::Original(&settings.original)));
    for &ratio in &training {
        jobs.push((
            format!("evidential@{ratio}"),
            Objective::Compatible {
                ratio,
                cfg: &settings.compatible,
            },
        ));
    }
    jobs.push((
        format!("bct@{bct_ratio}"),
        Objective::Compatible {
            ratio: bct_ratio,
            cfg: &bct,
        },
    ));

    let n = base.trainable_len();
    let mut objectives = Vec::with_capacity(jobs.len());
    for (name, objective) in &jobs {
        let (_, mut grad) = objective_grad(&mut base.clone(), &x, &labels, objective)?;
        if settings.corrupt_gradient {
            grad[0] += 0.5;
        }

        let mut fd = vec![0.0; n];
        let mut delta = vec![0.0; n];
        for i in 0..n {
            delta[i] = GRADCHECK_EPS;
            let mut plus = base.clone();
            plus.apply_update(&delta);
            let up = objective_value(&mut plus, &x, &labels, objective)?;
            delta[i] = -GRADCHECK_EPS;
            let mut minus = base.clone();
            minus.apply_update(&delta);
            let down = objective_value(&mut minus, &x, &labels, objective)?;
            delta[i] = 0.0;
            fd[i] = (up - down) / (2.0 * GRADCHECK_EPS);
        }

        let scale = grad
            .iter()
            .chain(fd.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let mut worst = 0usize;
        let mut max_rel = 0.0f64;
        for i in 0..n {
            let rel = (grad[i] - fd[i]).abs() / scale;
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        objectives.push(ObjectiveCheck {
            objective: name.clone(),
            params: n,
            max_rel_err: max_rel,
            worst_param: worst,
            tape_grad: grad[worst],
            fd_grad: fd[worst],
        });
    }

    Ok(GradReport {
        epsilon: GRADCHECK_EPS,
        threshold: GRADCHECK_THRESHOLD,
        objectives,
    })
}
