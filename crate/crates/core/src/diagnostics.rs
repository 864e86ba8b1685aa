use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

/// Event counters raised while fitting and evaluating nuisance functions.
/// Counters are plain sums, so concurrent updates stay deterministic.
#[derive(Debug, Default)]
pub struct Diagnostics {
    empty_neighborhood: AtomicUsize,
    propensity_clamps: AtomicUsize,
    ratio_fallbacks: AtomicUsize,
    kappa_fallbacks: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticCounts {
    pub empty_neighborhood: usize,
    pub propensity_clamps: usize,
    pub ratio_fallbacks: usize,
    pub kappa_fallbacks: usize,
}

impl Diagnostics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn empty_neighborhood(&self, hit: bool) {
        if hit {
            self.empty_neighborhood.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn propensity_clamp(&self) {
        self.propensity_clamps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn ratio_fallback(&self) {
        self.ratio_fallbacks.fetch_add(1, Ordering::Relaxed);
    }

    pub fn kappa_fallback(&self) {
        self.kappa_fallbacks.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> DiagnosticCounts {
        DiagnosticCounts {
            empty_neighborhood: self.empty_neighborhood.load(Ordering::Relaxed),
            propensity_clamps: self.propensity_clamps.load(Ordering::Relaxed),
            ratio_fallbacks: self.ratio_fallbacks.load(Ordering::Relaxed),
            kappa_fallbacks: self.kappa_fallbacks.load(Ordering::Relaxed),
        }
    }
}
