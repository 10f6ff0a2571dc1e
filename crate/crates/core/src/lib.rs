//! One embedding network, many widths, one feature space.
//!
//! A model built here can be sliced at any configured crop ratio: the
//! sub-model formed by the leading channels of every layer produces features
//! that live in the same space as the full model's, so a gallery indexed with
//! a small slice can be queried with the full model and vice versa. Training
//! drives that compatibility with an evidence-based classification loss on
//! each slice plus pairwise gradient projection across the per-slice
//! objectives.
//!
//! The crate is self-contained: a small reverse-mode tape over dense f64
//! tensors ([`tensor`]), the switchable model and its checkpoint format
//! ([`model`]), the loss heads ([`loss`]), gradient projection and
//! aggregation ([`grad`]), the training loop ([`train`]), retrieval
//! evaluation ([`eval`]), and dataset plumbing ([`data`]).
//!
//! With the `parallel` feature (default) the heavy inner loops run on rayon.
//! Both paths produce bitwise-identical results; [`parallel::set_enabled`]
//! switches at runtime.

pub mod data;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;
