//! Deliberate bugs that can be switched on at run time to confirm that the
//! verification suites catch them. Process-wide; never enable in a process
//! that also runs other work.

use std::sync::atomic::{AtomicBool, Ordering};

static SWAP_BILINEAR_AXES: AtomicBool = AtomicBool::new(false);

/// Makes bilinear sampling read `(y, x)` instead of `(x, y)`.
pub fn set_swap_bilinear_axes(on: bool) {
    SWAP_BILINEAR_AXES.store(on, Ordering::Relaxed);
}

pub(crate) fn swap_bilinear_axes() -> bool {
    SWAP_BILINEAR_AXES.load(Ordering::Relaxed)
}
