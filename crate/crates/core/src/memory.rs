//! Tracked-buffer memory accounting.
//!
//! Kernels register each large buffer they allocate with an optional
//! [`MemTracker`]; the tracker keeps the live total and its high-water mark.
//! Unlike process RSS this is exact and reproducible.

use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Debug, Default)]
pub struct MemTracker {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `bytes` until the returned guard is dropped.
    pub fn track(&self, bytes: usize) -> Tracked<'_> {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
        Tracked {
            tracker: self,
            bytes,
        }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::SeqCst);
    }
}

#[must_use]
#[derive(Debug)]
pub struct Tracked<'a> {
    tracker: &'a MemTracker,
    bytes: usize,
}

impl Drop for Tracked<'_> {
    fn drop(&mut self) {
        self.tracker.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

pub(crate) fn track(tracker: Option<&MemTracker>, bytes: usize) -> Option<Tracked<'_>> {
    tracker.map(|m| m.track(bytes))
}
