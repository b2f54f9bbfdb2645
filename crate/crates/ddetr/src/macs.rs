//! Instrumented multiply-accumulate counter.
//!
//! Every kernel that performs multiply-accumulates reports its exact count
//! here. The benchmark harness resets the counter, runs an operator, and
//! reads back the measured MACs to compare against the analytic cost model.
//! A single process-wide atomic keeps the total exact under rayon
//! parallelism (summation order does not affect an integer counter).

use std::sync::atomic::{AtomicU64, Ordering};

static MACS: AtomicU64 = AtomicU64::new(0);

/// Record `n` multiply-accumulate operations.
#[inline]
pub fn add(n: u64) {
    MACS.fetch_add(n, Ordering::Relaxed);
}

/// Reset the counter to zero.
pub fn reset() {
    MACS.store(0, Ordering::Relaxed);
}

/// Read the current count.
pub fn read() -> u64 {
    MACS.load(Ordering::Relaxed)
}

/// Read and reset in one call.
pub fn take() -> u64 {
    MACS.swap(0, Ordering::Relaxed)
}
