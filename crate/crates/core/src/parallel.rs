//! Runtime switch for the rayon paths.
//!
//! Compiled without the `parallel` feature this module is inert and every
//! kernel runs its sequential loop. With the feature, kernels consult
//! [`is_enabled`] so benchmarks (and debugging) can compare both paths in one
//! process. Parallel loops split work per output row / per query and keep
//! each row's accumulation order sequential, so results are bitwise-identical
//! either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Turn the rayon paths on or off at runtime. No-op without the `parallel`
/// feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// True when the crate was built with the `parallel` feature and the runtime
/// switch is on.
pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}
