//! Dataset generation and ingestion.
//!
//! Experiments run on synthetic Gaussian clusters: class centers drawn
//! uniformly in a scaled hypercube, samples scattered around them. Two
//! external formats can be plugged in instead: a labeled-vector CSV and the
//! IDX image binary pair. All three paths produce the same in-memory set,
//! split 70/15/15 into train/query/gallery stratified by class, assigned
//! deterministically from sample id order so a set round-tripped through
//! CSV keeps its splits.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{what} must be {requirement}, got {value}")]
    InvalidSpec {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("dataset is empty")]
    EmptySet,
    #[error("{vectors} vector rows for {labels} labels")]
    CountMismatch { vectors: usize, labels: usize },
    #[error("line {line}: expected header {expected:?}, got {found:?}")]
    CsvHeader { line: usize, expected: String, found: String },
    #[error("line {line}: {got} fields, expected {expected}")]
    RaggedRow {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: bad {what} {text:?}")]
    CsvField {
        line: usize,
        what: &'static str,
        text: String,
    },
    #[error("line {line}: duplicate sample id {id}")]
    DuplicateId { line: usize, id: u64 },
    #[error("labels are not dense: class {missing} absent below {classes}")]
    LabelsNotDense { missing: usize, classes: usize },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: need {needed} bytes at offset {offset}, file has {len}")]
    IdxTruncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    IdxTrailing { path: PathBuf, extra: usize },
    #[error("{images} images for {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("{path}: feature dim {got}, other splits have {expected}")]
    SplitDimMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("query label {label} has no gallery sample")]
    QueryLabelMissing { label: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const TRAIN_FRACTION: f64 = 0.70;
const QUERY_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 50,
            samples_per_class: 200,
            dim: 64,
            center_scale: 1.0,
            noise_sigma: 0.3,
            seed: 1234,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        let check = |ok: bool, what: &'static str, requirement: &'static str, value: f64| {
            if ok {
                Ok(())
            } else {
                Err(DataError::InvalidSpec {
                    what,
                    requirement,
                    value,
                })
            }
        };
        check(self.classes >= 2, "classes", ">= 2", self.classes as f64)?;
        check(
            self.samples_per_class >= 1,
            "samples_per_class",
            ">= 1",
            self.samples_per_class as f64,
        )?;
        check(self.dim >= 1, "dim", ">= 1", self.dim as f64)?;
        check(
            self.noise_sigma.is_finite() && self.noise_sigma > 0.0,
            "noise_sigma",
            "finite and > 0",
            self.noise_sigma,
        )?;
        check(
            self.center_scale.is_finite() && self.center_scale > 0.0,
            "center_scale",
            "finite and > 0",
            self.center_scale,
        )
    }
}

/// Immutable labeled vectors with a per-sample split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVectorSet {
    dim: usize,
    num_classes: usize,
    vectors: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    split: Vec<Split>,
}

impl LabeledVectorSet {
    /// Validates invariants and derives the stratified split: per class, in
    /// ascending id order, first 70% train, next 15% query, rest gallery.
    pub fn from_parts(
        dim: usize,
        vectors: Vec<f64>,
        labels: Vec<usize>,
        ids: Vec<u64>,
    ) -> Result<Self, DataError> {
        let (num_classes, by_id) = validate_parts(dim, &vectors, &labels, &ids)?;
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (&id, &row) in &by_id {
            let _ = id;
            per_class[labels[row]].push(row);
        }
        let mut split = vec![Split::Gallery; labels.len()];
        for rows in &per_class {
            let n = rows.len();
            let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
            let n_query = (QUERY_FRACTION * n as f64).floor() as usize;
            for (i, &row) in rows.iter().enumerate() {
                split[row] = if i < n_train {
                    Split::Train
                } else if i < n_train + n_query {
                    Split::Query
                } else {
                    Split::Gallery
                };
            }
        }
        Ok(LabeledVectorSet {
            dim,
            num_classes,
            vectors,
            labels,
            ids,
            split,
        })
    }

    /// Same invariants as [`from_parts`](Self::from_parts) but with the split
    /// assignment given by the caller. Every query label must have at least
    /// one gallery sample.
    pub fn with_splits(
        dim: usize,
        vectors: Vec<f64>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        split: Vec<Split>,
    ) -> Result<Self, DataError> {
        let (num_classes, _) = validate_parts(dim, &vectors, &labels, &ids)?;
        if split.len() != labels.len() {
            return Err(DataError::CountMismatch {
                vectors: split.len(),
                labels: labels.len(),
            });
        }
        let mut in_gallery = vec![false; num_classes];
        for (i, &s) in split.iter().enumerate() {
            if s == Split::Gallery {
                in_gallery[labels[i]] = true;
            }
        }
        for (i, &s) in split.iter().enumerate() {
            if s == Split::Query && !in_gallery[labels[i]] {
                return Err(DataError::QueryLabelMissing { label: labels[i] });
            }
        }
        Ok(LabeledVectorSet {
            dim,
            num_classes,
            vectors,
            labels,
            ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Materializes the given rows as a batch matrix with their labels.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        let t = Tensor::matrix(rows.len(), self.dim, data).expect("batch shape");
        (t, labels)
    }

    /// One split as (matrix, labels, ids), rows in dataset order.
    pub fn split_matrix(&self, split: Split) -> (Tensor, Vec<usize>, Vec<u64>) {
        let rows = self.rows_of(split);
        let (t, labels) = self.batch(&rows);
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        (t, labels, ids)
    }
}

// Shared invariant checks. Returns the class count and the rows keyed by
// ascending sample id.
fn validate_parts(
    dim: usize,
    vectors: &[f64],
    labels: &[usize],
    ids: &[u64],
) -> Result<(usize, BTreeMap<u64, usize>), DataError> {
    if labels.is_empty() {
        return Err(DataError::EmptySet);
    }
    if dim == 0 || vectors.len() != labels.len() * dim {
        return Err(DataError::CountMismatch {
            vectors: if dim == 0 { 0 } else { vectors.len() / dim },
            labels: labels.len(),
        });
    }
    if ids.len() != labels.len() {
        return Err(DataError::CountMismatch {
            vectors: ids.len(),
            labels: labels.len(),
        });
    }
    if let Some(flat) = vectors.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteFeature {
            row: flat / dim,
            col: flat % dim,
        });
    }
    let num_classes = check_dense_labels(labels)?;
    let mut by_id: BTreeMap<u64, usize> = BTreeMap::new();
    for (row, &id) in ids.iter().enumerate() {
        if by_id.insert(id, row).is_some() {
            return Err(DataError::DuplicateId { line: row + 2, id });
        }
    }
    Ok((num_classes, by_id))
}

fn check_dense_labels(labels: &[usize]) -> Result<usize, DataError> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(DataError::LabelsNotDense { missing, classes });
    }
    Ok(classes)
}

/// Gaussian clusters around uniformly placed centers, deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledVectorSet, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let mut centers = vec![0.0; spec.classes * d];
    for c in centers.iter_mut() {
        *c = rng.random_range(-spec.center_scale..spec.center_scale);
    }
    let n = spec.classes * spec.samples_per_class;
    let mut vectors = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let center = &centers[class * d..(class + 1) * d];
        for sample in 0..spec.samples_per_class {
            for &c in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                vectors.push(c + spec.noise_sigma * noise);
            }
            labels.push(class);
            ids.push((class * spec.samples_per_class + sample) as u64);
        }
    }
    LabeledVectorSet::from_parts(d, vectors, labels, ids)
}

/// Writes `id,label,f0..f{d-1}` rows; floats in shortest round-trip form.
pub fn write_csv(set: &LabeledVectorSet, path: &Path) -> Result<(), DataError> {
    let all: Vec<usize> = (0..set.len()).collect();
    write_rows(set, &all, path)
}

/// Writes only the rows of one split, same format as [`write_csv`].
pub fn write_split_csv(set: &LabeledVectorSet, split: Split, path: &Path) -> Result<(), DataError> {
    write_rows(set, &set.rows_of(split), path)
}

fn write_rows(set: &LabeledVectorSet, rows: &[usize], path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let mut line = String::from("id,label");
    for j in 0..set.dim {
        line.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{line}").map_err(io_err)?;
    for &i in rows {
        let mut line = format!("{},{}", set.ids[i], set.labels[i]);
        for v in set.row(i) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// One CSV with splits rederived from the stratified id-order rule.
pub fn load_csv(path: &Path) -> Result<LabeledVectorSet, DataError> {
    let raw = parse_csv_rows(path)?;
    LabeledVectorSet::from_parts(raw.dim, raw.vectors, raw.labels, raw.ids)
}

/// Three per-split CSVs, one file per split, as `cmd gen-data` writes them.
/// The files carry the split assignment; ids must stay unique across all
/// three.
pub fn load_csv_splits(
    train: &Path,
    query: &Path,
    gallery: &Path,
) -> Result<LabeledVectorSet, DataError> {
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut split = Vec::new();
    let mut dim = None;
    for (path, s) in [
        (train, Split::Train),
        (query, Split::Query),
        (gallery, Split::Gallery),
    ] {
        let raw = parse_csv_rows(path)?;
        let expected = *dim.get_or_insert(raw.dim);
        if raw.dim != expected {
            return Err(DataError::SplitDimMismatch {
                path: path.to_path_buf(),
                expected,
                got: raw.dim,
            });
        }
        vectors.extend(raw.vectors);
        split.resize(split.len() + raw.labels.len(), s);
        labels.extend(raw.labels);
        ids.extend(raw.ids);
    }
    LabeledVectorSet::with_splits(dim.unwrap_or(0), vectors, labels, ids, split)
}

struct RawCsv {
    dim: usize,
    vectors: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<u64>,
}

fn parse_csv_rows(path: &Path) -> Result<RawCsv, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::EmptySet)?;
    let header = header.map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let dim = cols.len().saturating_sub(2);
    let expected_header = {
        let mut h = String::from("id,label");
        for j in 0..dim {
            h.push_str(&format!(",f{j}"));
        }
        h
    };
    if dim == 0 || cols != expected_header.split(',').collect::<Vec<_>>() {
        return Err(DataError::CsvHeader {
            line: 1,
            expected: String::from("id,label,f0..f{d-1}"),
            found: header,
        });
    }
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(DataError::RaggedRow {
                line: line_no,
                expected: dim + 2,
                got: fields.len(),
            });
        }
        let field_err = |what, text: &str| DataError::CsvField {
            line: line_no,
            what,
            text: text.to_string(),
        };
        let id: u64 = fields[0].parse().map_err(|_| field_err("id", fields[0]))?;
        if !seen.insert(id) {
            return Err(DataError::DuplicateId { line: line_no, id });
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| field_err("label", fields[1]))?;
        for f in &fields[2..] {
            let v: f64 = f.parse().map_err(|_| field_err("feature", f))?;
            if !v.is_finite() {
                return Err(field_err("feature", f));
            }
            vectors.push(v);
        }
        labels.push(label);
        ids.push(id);
    }
    Ok(RawCsv {
        dim,
        vectors,
        labels,
        ids,
    })
}

/// IDX image/label pair. Pixels are scaled to [0,1] and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledVectorSet, DataError> {
    let (image_dims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (label_dims, raw_labels) = read_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (image_dims[0], image_dims[1], image_dims[2]);
    if label_dims[0] != n {
        return Err(DataError::IdxCountMismatch {
            images: n,
            labels: label_dims[0],
        });
    }
    // rows*cols can only overflow when n is 0 and the set is empty anyway
    let dim = rows.checked_mul(cols).unwrap_or(0);
    let vectors = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = raw_labels.iter().map(|&b| b as usize).collect();
    let ids = (0..n as u64).collect();
    LabeledVectorSet::from_parts(dim.max(1), vectors, labels, ids)
}

fn read_idx(path: &Path, magic: u32, ndim: usize) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    // u64 arithmetic: fuzzed dim fields can claim sizes far beyond the file
    let need = |offset: usize, needed: usize| {
        if (bytes.len() as u64) < (offset as u64).saturating_add(needed as u64) {
            Err(DataError::IdxTruncated {
                path: path.to_path_buf(),
                offset,
                needed,
                len: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 4)?;
    let found = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(DataError::IdxMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let offset = 4 + 4 * i;
        need(offset, 4)?;
        dims.push(
            u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes")) as usize,
        );
    }
    let header = 4 + 4 * ndim;
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    need(header, payload)?;
    let extra = bytes.len() - header - payload;
    if extra > 0 {
        return Err(DataError::IdxTrailing {
            path: path.to_path_buf(),
            extra,
        });
    }
    Ok((dims, bytes[header..].to_vec()))
}
