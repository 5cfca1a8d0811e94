//! Per-thread floating-point operation counter.
//!
//! Kernels add to the counter as they run: a multiply-add counts as two
//! operations, every other elementwise operation as one.

use std::cell::Cell;

thread_local! {
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(n: usize) {
    COUNT.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

pub fn reset() {
    COUNT.with(|c| c.set(0));
}

pub fn get() -> u64 {
    COUNT.with(|c| c.get())
}

/// Runs `f` and returns its result with the operations it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = get();
    let out = f();
    (out, get().wrapping_sub(before))
}
