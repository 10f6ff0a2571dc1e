//! On-disk run configuration.
//!
//! One JSON file with four sections, all optional, unknown keys rejected.
//! [`CliConfigFile::resolve`] materializes every default so the file written
//! back into the run directory records the exact configuration that ran.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sfsc_core::data::SyntheticSpec;
use sfsc_core::train::TrainConfig;

use crate::commands::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden layer widths of the full network.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            widths: vec![128, 128, 128],
            feature_dim: 64,
            classes: 50,
        }
    }
}

/// Exactly one source: inline synthetic generation, a directory of per-split
/// CSVs, or an IDX image/label pair. With no source configured,
/// [`CliConfigFile::resolve`] falls back to default synthetic generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synthetic: Option<SyntheticSpec>,
    pub csv_dir: Option<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl DataSection {
    fn is_unset(&self) -> bool {
        self.synthetic.is_none()
            && self.csv_dir.is_none()
            && self.idx_images.is_none()
            && self.idx_labels.is_none()
    }

    /// Short source tag recorded in score metadata.
    pub fn id(&self) -> String {
        if let Some(s) = &self.synthetic {
            format!("synthetic(seed={})", s.seed)
        } else if let Some(d) = &self.csv_dir {
            d.display().to_string()
        } else if let Some(p) = &self.idx_images {
            p.display().to_string()
        } else {
            String::from("unset")
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Ratios to cross-score after training; empty means the training ratios
    /// plus the full model.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfigFile {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl CliConfigFile {
    /// Fills every empty default-dependent field in place.
    pub fn resolve(&mut self) {
        if self.data.is_unset() {
            self.data.synthetic = Some(SyntheticSpec::default());
        }
        if self.eval.ratios.is_empty() {
            let mut r = self.train.train_ratios.clone();
            r.push(1.0);
            r.sort_by(f64::total_cmp);
            r.dedup();
            self.eval.ratios = r;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.idx_images.is_some() != d.idx_labels.is_some() {
            return Err(CliError::Usage(String::from(
                "data: idx_images and idx_labels must be given together",
            )));
        }
        let sources = [
            d.synthetic.is_some(),
            d.csv_dir.is_some(),
            d.idx_images.is_some(),
        ]
        .iter()
        .filter(|&&s| s)
        .count();
        if sources != 1 {
            return Err(CliError::Usage(format!(
                "data: exactly one of synthetic, csv_dir, idx_images+idx_labels, got {sources}"
            )));
        }
        Ok(())
    }
}
