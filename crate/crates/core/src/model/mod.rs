//! Width-switchable embedding network.
//!
//! One set of full-width parameters; a crop ratio γ selects the leading
//! ⌈γ·n⌉ channels of every interior layer. The first layer never slices its
//! input columns (that is the data dimension) and the final layer never
//! slices its output rows, so every sub-model emits features of the same
//! dimension. Each ratio owns an independent batch-norm bank; everything
//! else is shared.
//!
//! Forward passes bind parameter slices as tape leaves and remember where
//! each slice came from, so gradients harvested after `backward` accumulate
//! into one flat vector laid out over the full parameters.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("crop ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("layer width {width} is smaller than the number of ratios {ratios}")]
    WidthTooSmall { width: usize, ratios: usize },
    #[error("{what} must be at least {min}, got {got}")]
    DimTooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("bn momentum {0} outside (0, 1)")]
    BadMomentum(f64),
    #[error("unknown crop ratio {requested}; known ratios are {known:?}")]
    UnknownRatio { requested: f64, known: Vec<f64> },
    #[error("input has {got} columns, model expects {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("training forward needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("input must be a rank-2 batch, got shape {0:?}")]
    BadInput(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer widths of the network, without the ratio set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// Validated ratio set. Holds the configured training ratios and the full
/// bank list (training ratios plus 1.0), both ascending and deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRatioList {
    all: Vec<f64>,
    training: Vec<f64>,
}

impl CropRatioList {
    pub fn new(ratios: &[f64]) -> Result<Self, ModelError> {
        for &r in ratios {
            if !r.is_finite() || r <= 0.0 || r > 1.0 {
                return Err(ModelError::InvalidRatio(r));
            }
        }
        let mut training = ratios.to_vec();
        training.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        training.dedup();
        let mut all = training.clone();
        if all.last() != Some(&1.0) {
            all.push(1.0);
        }
        Ok(CropRatioList { all, training })
    }

    /// Every ratio with a BN bank, ascending; always ends with 1.0.
    pub fn all(&self) -> &[f64] {
        &self.all
    }

    /// The configured ratios, ascending; may be empty, may include 1.0.
    pub fn training(&self) -> &[f64] {
        &self.training
    }

    fn index_of(&self, ratio: f64) -> Option<usize> {
        self.all.iter().position(|&r| r == ratio)
    }
}

pub(crate) fn slice_width(full: usize, ratio: f64) -> usize {
    (ratio * full as f64).ceil() as usize
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct BnBank {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBank {
    fn fresh(len: usize) -> Self {
        BnBank {
            scale: vec![1.0; len],
            shift: vec![0.0; len],
            running_mean: vec![0.0; len],
            running_var: vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone)]
struct InteriorLayer {
    dense: Dense,
    banks: Vec<BnBank>,
}

#[derive(Debug, Clone)]
pub struct SwitchableModel {
    arch: Architecture,
    ratios: CropRatioList,
    bn_momentum: f64,
    seed: u64,
    step: u64,
    layers: Vec<InteriorLayer>,
    final_layer: Dense,
    classifier: Dense,
}

// Where one bound slice lives inside the flat trainable vector.
#[derive(Debug, Clone, Copy)]
struct BoundParam {
    var: Var,
    base: usize,
    rows: usize,
    cols: usize,
    full_cols: usize,
}

/// Slice bindings of one training forward pass; feed it back to
/// [`SwitchableModel::harvest`] after `backward`.
#[derive(Debug, Default)]
pub struct ForwardPass {
    bound: Vec<BoundParam>,
}

// Byte-for-byte positions of every trainable tensor in the flat vector.
// Order: per interior layer weight, bias, then per ratio scale, shift;
// final weight, bias; classifier weight, bias.
#[derive(Debug, Clone)]
struct TrainableOffsets {
    layer_weight: Vec<usize>,
    layer_bias: Vec<usize>,
    bank_scale: Vec<Vec<usize>>,
    bank_shift: Vec<Vec<usize>>,
    final_weight: usize,
    final_bias: usize,
    cls_weight: usize,
    cls_bias: usize,
    total: usize,
}

impl SwitchableModel {
    pub fn build(
        arch: Architecture,
        crop_ratios: &[f64],
        bn_momentum: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let ratios = CropRatioList::new(crop_ratios)?;
        if arch.input_dim == 0 {
            return Err(ModelError::DimTooSmall {
                what: "input_dim",
                min: 1,
                got: 0,
            });
        }
        if arch.feature_dim == 0 {
            return Err(ModelError::DimTooSmall {
                what: "feature_dim",
                min: 1,
                got: 0,
            });
        }
        if arch.num_classes < 2 {
            return Err(ModelError::DimTooSmall {
                what: "num_classes",
                min: 2,
                got: arch.num_classes,
            });
        }
        if !(bn_momentum > 0.0 && bn_momentum < 1.0) {
            return Err(ModelError::BadMomentum(bn_momentum));
        }
        let n_ratios = ratios.all().len();
        for &w in arch
            .hidden_widths
            .iter()
            .chain([arch.input_dim, arch.feature_dim].iter())
        {
            if w < n_ratios {
                return Err(ModelError::WidthTooSmall {
                    width: w,
                    ratios: n_ratios,
                });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init_dense = |out: usize, inp: usize| {
            let bound = (6.0 / inp as f64).sqrt();
            let data = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
            Dense {
                weight: Tensor::matrix(out, inp, data).expect("init shape"),
                bias: Tensor::vector(vec![0.0; out]),
            }
        };

        let mut layers = Vec::with_capacity(arch.hidden_widths.len());
        let mut in_w = arch.input_dim;
        for &h in &arch.hidden_widths {
            let dense = init_dense(h, in_w);
            let banks = ratios.all().iter().map(|&r| BnBank::fresh(slice_width(h, r))).collect();
            layers.push(InteriorLayer { dense, banks });
            in_w = h;
        }
        let final_layer = init_dense(arch.feature_dim, in_w);
        let classifier = init_dense(arch.num_classes, arch.feature_dim);

        Ok(SwitchableModel {
            arch,
            ratios,
            bn_momentum,
            seed,
            step: 0,
            layers,
            final_layer,
            classifier,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn ratios(&self) -> &CropRatioList {
        &self.ratios
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn check_ratio(&self, ratio: f64) -> Result<usize, ModelError> {
        self.ratios.index_of(ratio).ok_or(ModelError::UnknownRatio {
            requested: ratio,
            known: self.ratios.all().to_vec(),
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize), ModelError> {
        let (b, c) = x.dims2().ok_or_else(|| ModelError::BadInput(x.shape().to_vec()))?;
        if c != self.arch.input_dim {
            return Err(ModelError::InputDimMismatch {
                expected: self.arch.input_dim,
                got: c,
            });
        }
        Ok((b, c))
    }

    fn offsets(&self) -> TrainableOffsets {
        let mut off = TrainableOffsets {
            layer_weight: Vec::new(),
            layer_bias: Vec::new(),
            bank_scale: Vec::new(),
            bank_shift: Vec::new(),
            final_weight: 0,
            final_bias: 0,
            cls_weight: 0,
            cls_bias: 0,
            total: 0,
        };
        let mut cursor = 0usize;
        let mut in_w = self.arch.input_dim;
        for &h in &self.arch.hidden_widths {
            off.layer_weight.push(cursor);
            cursor += h * in_w;
            off.layer_bias.push(cursor);
            cursor += h;
            let mut scales = Vec::new();
            let mut shifts = Vec::new();
            for &r in self.ratios.all() {
                let w = slice_width(h, r);
                scales.push(cursor);
                cursor += w;
                shifts.push(cursor);
                cursor += w;
            }
            off.bank_scale.push(scales);
            off.bank_shift.push(shifts);
            in_w = h;
        }
        off.final_weight = cursor;
        cursor += self.arch.feature_dim * in_w;
        off.final_bias = cursor;
        cursor += self.arch.feature_dim;
        off.cls_weight = cursor;
        cursor += self.arch.num_classes * self.arch.feature_dim;
        off.cls_bias = cursor;
        cursor += self.arch.num_classes;
        off.total = cursor;
        off
    }

    /// Length of the flat trainable vector (weights, biases, BN affine for
    /// every bank; running statistics excluded).
    pub fn trainable_len(&self) -> usize {
        self.offsets().total
    }

    /// Current trainable parameters flattened in canonical order.
    pub fn read_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        self.for_each_trainable(|chunk| out.extend_from_slice(chunk));
        out
    }

    /// θ += delta, elementwise over the canonical flat order.
    pub fn apply_update(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.trainable_len(), "update length mismatch");
        let mut cursor = 0;
        self.for_each_trainable_mut(|chunk| {
            let n = chunk.len();
            for (p, d) in chunk.iter_mut().zip(&delta[cursor..cursor + n]) {
                *p += d;
            }
            cursor += n;
        });
    }

    /// Flat-layout span (offset, length) of one trainable tensor by its
    /// checkpoint name, e.g. `layer0.bn0.25.scale` or `classifier.bias`.
    /// Running statistics are not trainable and have no span.
    pub fn trainable_span(&self, name: &str) -> Option<(usize, usize)> {
        let off = self.offsets();
        let mut in_w = self.arch.input_dim;
        for (li, &h) in self.arch.hidden_widths.iter().enumerate() {
            if name == format!("layer{li}.weight") {
                return Some((off.layer_weight[li], h * in_w));
            }
            if name == format!("layer{li}.bias") {
                return Some((off.layer_bias[li], h));
            }
            for (bi, &r) in self.ratios.all().iter().enumerate() {
                let w = slice_width(h, r);
                if name == format!("layer{li}.bn{r}.scale") {
                    return Some((off.bank_scale[li][bi], w));
                }
                if name == format!("layer{li}.bn{r}.shift") {
                    return Some((off.bank_shift[li][bi], w));
                }
            }
            in_w = h;
        }
        match name {
            "final.weight" => Some((off.final_weight, self.arch.feature_dim * in_w)),
            "final.bias" => Some((off.final_bias, self.arch.feature_dim)),
            "classifier.weight" => {
                Some((off.cls_weight, self.arch.num_classes * self.arch.feature_dim))
            }
            "classifier.bias" => Some((off.cls_bias, self.arch.num_classes)),
            _ => None,
        }
    }

    fn for_each_trainable(&self, mut f: impl FnMut(&[f64])) {
        for layer in &self.layers {
            f(layer.dense.weight.data());
            f(layer.dense.bias.data());
            for bank in &layer.banks {
                f(&bank.scale);
                f(&bank.shift);
            }
        }
        f(self.final_layer.weight.data());
        f(self.final_layer.bias.data());
        f(self.classifier.weight.data());
        f(self.classifier.bias.data());
    }

    fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            f(layer.dense.weight.data_mut());
            f(layer.dense.bias.data_mut());
            for bank in &mut layer.banks {
                f(&mut bank.scale);
                f(&mut bank.shift);
            }
        }
        f(self.final_layer.weight.data_mut());
        f(self.final_layer.bias.data_mut());
        f(self.classifier.weight.data_mut());
        f(self.classifier.bias.data_mut());
    }

    /// Weight and bias count of the γ sub-model as materialized (first
    /// input and final output dimensions never slice). BN excluded.
    pub fn sliced_param_count(&self, ratio: f64) -> Result<usize, ModelError> {
        self.check_ratio(ratio)?;
        let mut total = 0;
        let mut in_w = self.arch.input_dim;
        for &h in &self.arch.hidden_widths {
            let out_w = slice_width(h, ratio);
            total += out_w * in_w + out_w;
            in_w = out_w;
        }
        total += self.arch.feature_dim * in_w + self.arch.feature_dim;
        Ok(total)
    }

    /// Weight and bias count if every dimension, data input and feature
    /// output included, were cropped by the ratio. This is the idealized
    /// arithmetic behind the γ² scaling of sub-model size; the materialized
    /// count above exceeds it by the unsliced boundary terms.
    pub fn uniform_scaled_param_count(&self, ratio: f64) -> Result<usize, ModelError> {
        self.check_ratio(ratio)?;
        let mut total = 0;
        let mut in_w = slice_width(self.arch.input_dim, ratio);
        for &h in &self.arch.hidden_widths {
            let out_w = slice_width(h, ratio);
            total += out_w * in_w + out_w;
            in_w = out_w;
        }
        let out_w = slice_width(self.arch.feature_dim, ratio);
        total += out_w * in_w + out_w;
        Ok(total)
    }

    /// Weight and bias count of the shared classifier head.
    pub fn classifier_param_count(&self) -> usize {
        self.arch.num_classes * self.arch.feature_dim + self.arch.num_classes
    }

    /// Learnable BN size (scale + shift) of the γ sub-model's own bank.
    pub fn bn_param_count(&self, ratio: f64) -> Result<usize, ModelError> {
        self.check_ratio(ratio)?;
        Ok(self
            .arch
            .hidden_widths
            .iter()
            .map(|&h| 2 * slice_width(h, ratio))
            .sum())
    }

    /// Training-mode forward: batch statistics on the tape, active bank's
    /// running statistics updated in place. Returns raw (unnormalized)
    /// feature rows and the slice bindings for gradient harvest.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        ratio: f64,
        x: &Tensor,
    ) -> Result<(Var, ForwardPass), ModelError> {
        let ri = self.check_ratio(ratio)?;
        let (b, _) = self.check_input(x)?;
        if b < 2 {
            return Err(ModelError::BatchTooSmall(b));
        }
        let off = self.offsets();
        let momentum = self.bn_momentum;
        let mut pass = ForwardPass::default();
        let mut cur = tape.leaf(x.clone())?;
        let mut in_w = self.arch.input_dim;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let full_out = self.arch.hidden_widths[li];
            let full_in = if li == 0 {
                self.arch.input_dim
            } else {
                self.arch.hidden_widths[li - 1]
            };
            let out_w = slice_width(full_out, ratio);
            cur = dense_sliced(
                tape,
                &mut pass,
                &layer.dense,
                out_w,
                in_w,
                full_in,
                off.layer_weight[li],
                off.layer_bias[li],
                cur,
            )?;

            let bank = &mut layer.banks[ri];
            let mu = tape.mean_axis(cur, 0)?;
            let d = tape.sub(cur, mu)?;
            let sq = tape.mul(d, d)?;
            let var_b = tape.mean_axis(sq, 0)?;
            let veps = tape.add_scalar(var_b, BN_EPS)?;
            let std = tape.sqrt(veps)?;
            let norm = tape.div(d, std)?;
            let sv = tape.leaf(Tensor::vector(bank.scale.clone()))?;
            pass.bound.push(BoundParam {
                var: sv,
                base: off.bank_scale[li][ri],
                rows: out_w,
                cols: 1,
                full_cols: 1,
            });
            let hv = tape.leaf(Tensor::vector(bank.shift.clone()))?;
            pass.bound.push(BoundParam {
                var: hv,
                base: off.bank_shift[li][ri],
                rows: out_w,
                cols: 1,
                full_cols: 1,
            });
            let scaled = tape.mul(norm, sv)?;
            cur = tape.add(scaled, hv)?;

            // biased batch variance normalizes; the running buffer keeps
            // the unbiased estimate
            let mu_val = tape.value(mu).data().to_vec();
            let var_val = tape.value(var_b).data().to_vec();
            let unbias = b as f64 / (b as f64 - 1.0);
            for j in 0..out_w {
                bank.running_mean[j] = (1.0 - momentum) * bank.running_mean[j] + momentum * mu_val[j];
                bank.running_var[j] =
                    (1.0 - momentum) * bank.running_var[j] + momentum * var_val[j] * unbias;
            }

            cur = tape.relu(cur)?;
            in_w = out_w;
        }
        let last_full = self.arch.hidden_widths.last().copied().unwrap_or(self.arch.input_dim);
        cur = dense_sliced(
            tape,
            &mut pass,
            &self.final_layer,
            self.arch.feature_dim,
            in_w,
            last_full,
            off.final_weight,
            off.final_bias,
            cur,
        )?;
        Ok((cur, pass))
    }

    /// Inference forward: stored running statistics, nothing bound.
    pub fn forward_eval(&self, tape: &mut Tape, ratio: f64, x: &Tensor) -> Result<Var, ModelError> {
        let ri = self.check_ratio(ratio)?;
        self.check_input(x)?;
        let mut cur = tape.leaf(x.clone())?;
        let mut in_w = self.arch.input_dim;
        for layer in &self.layers {
            let bank = &layer.banks[ri];
            let out_w = bank.scale.len();
            let w = slice_block(&layer.dense.weight, out_w, in_w);
            let bvec = Tensor::vector(layer.dense.bias.data()[..out_w].to_vec());
            let wv = tape.leaf(w)?;
            let bv = tape.leaf(bvec)?;
            cur = tape.matmul_bt(cur, wv)?;
            cur = tape.add(cur, bv)?;

            let mean = tape.leaf(Tensor::vector(bank.running_mean.clone()))?;
            let inv_std: Vec<f64> = bank
                .running_var
                .iter()
                .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let isv = tape.leaf(Tensor::vector(inv_std))?;
            let sv = tape.leaf(Tensor::vector(bank.scale.clone()))?;
            let hv = tape.leaf(Tensor::vector(bank.shift.clone()))?;
            cur = tape.sub(cur, mean)?;
            cur = tape.mul(cur, isv)?;
            cur = tape.mul(cur, sv)?;
            cur = tape.add(cur, hv)?;
            cur = tape.relu(cur)?;
            in_w = out_w;
        }
        let w = slice_block(&self.final_layer.weight, self.arch.feature_dim, in_w);
        let wv = tape.leaf(w)?;
        let bv = tape.leaf(Tensor::vector(self.final_layer.bias.data().to_vec()))?;
        cur = tape.matmul_bt(cur, wv)?;
        cur = tape.add(cur, bv)?;
        Ok(cur)
    }

    /// Binds the shared classifier (weight `[C × feature_dim]`, bias `[C]`)
    /// onto the tape; logits for features f are `f · Wᵀ + b`.
    pub fn bind_classifier(
        &self,
        tape: &mut Tape,
        pass: &mut ForwardPass,
    ) -> Result<(Var, Var), ModelError> {
        let off = self.offsets();
        let wv = tape.leaf(self.classifier.weight.clone())?;
        pass.bound.push(BoundParam {
            var: wv,
            base: off.cls_weight,
            rows: self.arch.num_classes,
            cols: self.arch.feature_dim,
            full_cols: self.arch.feature_dim,
        });
        let bv = tape.leaf(self.classifier.bias.clone())?;
        pass.bound.push(BoundParam {
            var: bv,
            base: off.cls_bias,
            rows: self.arch.num_classes,
            cols: 1,
            full_cols: 1,
        });
        Ok((wv, bv))
    }

    /// Scatter-adds every bound slice's tape gradient into the flat vector.
    pub fn harvest(&self, tape: &Tape, pass: &ForwardPass, out: &mut [f64]) {
        assert_eq!(out.len(), self.trainable_len(), "gradient length mismatch");
        for bp in &pass.bound {
            let Some(g) = tape.grad(bp.var) else { continue };
            for r in 0..bp.rows {
                for c in 0..bp.cols {
                    out[bp.base + r * bp.full_cols + c] += g[r * bp.cols + c];
                }
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn bank(&self, layer: usize, ratio_index: usize) -> &BnBank {
        &self.layers[layer].banks[ratio_index]
    }

    #[cfg(test)]
    pub(crate) fn bank_mut(&mut self, layer: usize, ratio_index: usize) -> &mut BnBank {
        &mut self.layers[layer].banks[ratio_index]
    }

    /// Full stored tensors in checkpoint manifest order, with names and
    /// shapes: trainables plus the per-bank running statistics.
    pub fn for_each_stored(&self, mut f: impl FnMut(&str, Vec<usize>, &[f64])) {
        for (li, layer) in self.layers.iter().enumerate() {
            let (r, c) = layer.dense.weight.dims2().expect("weights are rank-2");
            f(&format!("layer{li}.weight"), vec![r, c], layer.dense.weight.data());
            f(&format!("layer{li}.bias"), vec![r], layer.dense.bias.data());
            for (bi, bank) in layer.banks.iter().enumerate() {
                let ratio = self.ratios.all()[bi];
                let n = bank.scale.len();
                f(&format!("layer{li}.bn{ratio}.scale"), vec![n], &bank.scale);
                f(&format!("layer{li}.bn{ratio}.shift"), vec![n], &bank.shift);
                f(&format!("layer{li}.bn{ratio}.running_mean"), vec![n], &bank.running_mean);
                f(&format!("layer{li}.bn{ratio}.running_var"), vec![n], &bank.running_var);
            }
        }
        let (r, c) = self.final_layer.weight.dims2().expect("weights are rank-2");
        f("final.weight", vec![r, c], self.final_layer.weight.data());
        f("final.bias", vec![r], self.final_layer.bias.data());
        let (r, c) = self.classifier.weight.dims2().expect("weights are rank-2");
        f("classifier.weight", vec![r, c], self.classifier.weight.data());
        f("classifier.bias", vec![r], self.classifier.bias.data());
    }

    // Mutable twin of for_each_stored for checkpoint loading.
    pub(crate) fn for_each_stored_mut(&mut self, mut f: impl FnMut(&str, Vec<usize>, &mut [f64])) {
        let ratios = self.ratios.all().to_vec();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let (r, c) = layer.dense.weight.dims2().expect("weights are rank-2");
            f(&format!("layer{li}.weight"), vec![r, c], layer.dense.weight.data_mut());
            f(&format!("layer{li}.bias"), vec![r], layer.dense.bias.data_mut());
            for (bi, bank) in layer.banks.iter_mut().enumerate() {
                let ratio = ratios[bi];
                let n = bank.scale.len();
                f(&format!("layer{li}.bn{ratio}.scale"), vec![n], &mut bank.scale);
                f(&format!("layer{li}.bn{ratio}.shift"), vec![n], &mut bank.shift);
                f(&format!("layer{li}.bn{ratio}.running_mean"), vec![n], &mut bank.running_mean);
                f(&format!("layer{li}.bn{ratio}.running_var"), vec![n], &mut bank.running_var);
            }
        }
        let (r, c) = self.final_layer.weight.dims2().expect("weights are rank-2");
        f("final.weight", vec![r, c], self.final_layer.weight.data_mut());
        f("final.bias", vec![r], self.final_layer.bias.data_mut());
        let (r, c) = self.classifier.weight.dims2().expect("weights are rank-2");
        f("classifier.weight", vec![r, c], self.classifier.weight.data_mut());
        f("classifier.bias", vec![r], self.classifier.bias.data_mut());
    }
}

fn slice_block(full: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (_, full_cols) = full.dims2().expect("weights are rank-2");
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend_from_slice(&full.data()[r * full_cols..r * full_cols + cols]);
    }
    Tensor::matrix(rows, cols, data).expect("slice shape")
}

#[allow(clippy::too_many_arguments)]
fn dense_sliced(
    tape: &mut Tape,
    pass: &mut ForwardPass,
    dense: &Dense,
    out_w: usize,
    in_w: usize,
    full_in: usize,
    weight_base: usize,
    bias_base: usize,
    x: Var,
) -> Result<Var, ModelError> {
    let w = slice_block(&dense.weight, out_w, in_w);
    let wv = tape.leaf(w)?;
    pass.bound.push(BoundParam {
        var: wv,
        base: weight_base,
        rows: out_w,
        cols: in_w,
        full_cols: full_in,
    });
    let bvec = Tensor::vector(dense.bias.data()[..out_w].to_vec());
    let bv = tape.leaf(bvec)?;
    pass.bound.push(BoundParam {
        var: bv,
        base: bias_base,
        rows: out_w,
        cols: 1,
        full_cols: 1,
    });
    let h = tape.matmul_bt(x, wv)?;
    Ok(tape.add(h, bv)?)
}
