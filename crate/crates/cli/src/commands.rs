//! Subcommand bodies and the process exit contract.
//!
//! Exit codes: 0 success, 2 usage or configuration problem, 3 numerical
//! abort during training, 4 failed gradient verification.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sfsc_core::data::{self, LabeledVectorSet, Split, SyntheticSpec};
use sfsc_core::eval::compat_matrix;
use sfsc_core::gradcheck::{run_gradcheck, GradCheckSettings};
use sfsc_core::model::{load_checkpoint, Architecture};
use sfsc_core::train::{self, TrainError};

use crate::config::{CliConfigFile, DataSection};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if is_numeric_abort(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

// A non-finite value can surface as the loss itself, as a tensor guard
// tripping mid-forward, as a special-function domain error, or as a
// gradient-set rejection. All of them mean the run diverged.
fn is_numeric_abort(e: &TrainError) -> bool {
    use sfsc_core::grad::GradError;
    use sfsc_core::loss::LossError;
    use sfsc_core::model::ModelError;
    use sfsc_core::tensor::TensorError;
    let tensor = match e {
        TrainError::NonFiniteLoss { .. } => return true,
        TrainError::Grad(GradError::NonFinite { .. }) => return true,
        TrainError::Tensor(t)
        | TrainError::Model(ModelError::Tensor(t))
        | TrainError::Loss(LossError::Tensor(t)) => t,
        _ => return false,
    };
    matches!(
        tensor,
        TensorError::NonFinite { .. } | TensorError::Domain { .. }
    )
}

macro_rules! usage_error {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}

usage_error!(
    sfsc_core::data::DataError,
    sfsc_core::eval::EvalError,
    sfsc_core::model::ModelError,
    sfsc_core::model::CheckpointError,
);

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn gen_data(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let spec: SyntheticSpec = read_json(spec_path)?;
    let set = data::generate_synthetic(&spec)?;
    ensure_dir(out)?;
    for (split, name) in [
        (Split::Train, "train.csv"),
        (Split::Query, "query.csv"),
        (Split::Gallery, "gallery.csv"),
    ] {
        data::write_split_csv(&set, split, &out.join(name))?;
    }
    write_json(&out.join("spec.json"), &spec)?;
    let count = |s| set.rows_of(s).len();
    println!(
        "wrote {} samples ({} train / {} query / {} gallery) to {}",
        set.len(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        out.display()
    );
    Ok(())
}

fn load_data(section: &DataSection) -> Result<LabeledVectorSet, CliError> {
    if let Some(spec) = &section.synthetic {
        Ok(data::generate_synthetic(spec)?)
    } else if let Some(dir) = &section.csv_dir {
        Ok(data::load_csv_splits(
            &dir.join("train.csv"),
            &dir.join("query.csv"),
            &dir.join("gallery.csv"),
        )?)
    } else if let (Some(images), Some(labels)) = (&section.idx_images, &section.idx_labels) {
        Ok(data::load_idx(images, labels)?)
    } else {
        Err(CliError::Usage(String::from("data: no source configured")))
    }
}

pub fn train(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let mut cfg: CliConfigFile = read_json(config_path)?;
    cfg.resolve();
    cfg.validate()?;
    let set = load_data(&cfg.data)?;
    let arch = Architecture {
        input_dim: set.dim(),
        hidden_widths: cfg.model.widths.clone(),
        feature_dim: cfg.model.feature_dim,
        num_classes: cfg.model.classes,
    };
    ensure_dir(out)?;
    // resolved configuration, every default filled in
    write_json(&out.join("config.json"), &cfg)?;
    let (model, summary) = train::train(arch, cfg.train.clone(), &set, out)?;
    for e in &summary.epochs {
        println!(
            "epoch {:>3}: original {:.4}, conflict rate {:.3}",
            e.epoch, e.mean_original_loss, e.mean_conflict_rate
        );
    }
    let matrix = compat_matrix(&model, &set, &cfg.eval.ratios, "checkpoint.sfsc", &cfg.data.id())?;
    write_json(&out.join("compat.json"), &matrix)?;
    print!("{}", matrix.render_table());
    println!("artifacts in {}", out.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, data_dir: &Path, ratios: &[f64], out: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let set = data::load_csv_splits(
        &data_dir.join("train.csv"),
        &data_dir.join("query.csv"),
        &data_dir.join("gallery.csv"),
    )?;
    let matrix = compat_matrix(
        &model,
        &set,
        ratios,
        &checkpoint.display().to_string(),
        &data_dir.display().to_string(),
    )?;
    ensure_dir(out)?;
    write_json(&out.join("compat.json"), &matrix)?;
    print!("{}", matrix.render_table());
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, inject_fault: bool) -> Result<(), CliError> {
    let mut settings = GradCheckSettings::default();
    if let Some(path) = config {
        // the check runs on a small fixed model; the config contributes the
        // loss settings and the ratio set
        let mut cfg: CliConfigFile = read_json(path)?;
        cfg.resolve();
        cfg.validate()?;
        settings.train_ratios = cfg.train.train_ratios.clone();
        settings.original = cfg.train.original;
        settings.compatible = cfg.train.compatible;
    }
    settings.corrupt_gradient = inject_fault;
    let report = run_gradcheck(&settings)?;
    for o in &report.objectives {
        println!(
            "{:<18} max rel err {:.3e}  (param {}, tape {:+.6e}, fd {:+.6e})",
            o.objective, o.max_rel_err, o.worst_param, o.tape_grad, o.fd_grad
        );
    }
    if report.passed() {
        println!(
            "gradient check passed: {} objectives within {:e}",
            report.objectives.len(),
            report.threshold
        );
        Ok(())
    } else {
        let w = report.worst();
        Err(CliError::Verification(format!(
            "gradient check failed: objective {} parameter {} rel err {:.3e} exceeds {:e}",
            w.objective, w.worst_param, w.max_rel_err, report.threshold
        )))
    }
}
