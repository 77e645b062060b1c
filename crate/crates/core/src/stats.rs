//! Allocation statistics.
//!
//! Hot-path counters are sharded per subheap so concurrent threads never
//! contend on a shared cache line; rare events (syscalls, violations, large
//! objects) use process-global atomics. `StatsSnapshot` is the plain-data
//! view handed to callers.

use crate::layout::NUM_CLASSES;
use crate::report::SecurityReport;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

/// Counters owned by one subheap. Lives inside the subheap's metadata
/// mapping, so everything must be const-constructible.
#[repr(align(64))]
pub struct SubheapStats {
    pub alloc_by_class: [AtomicU64; NUM_CLASSES],
    pub chain_served: [AtomicU64; 4],
    pub freelist_served: AtomicU64,
    pub bump_served: AtomicU64,
    pub overrides_taken: AtomicU64,
    pub guard_granules: AtomicU64,
    pub granule_decisions: AtomicU64,
    pub small_frees: AtomicU64,
}

impl SubheapStats {
    #[allow(clippy::declare_interior_mutable_const)]
    const ZERO: AtomicU64 = AtomicU64::new(0);

    pub const fn new() -> Self {
        SubheapStats {
            alloc_by_class: [Self::ZERO; NUM_CLASSES],
            chain_served: [Self::ZERO; 4],
            freelist_served: AtomicU64::new(0),
            bump_served: AtomicU64::new(0),
            overrides_taken: AtomicU64::new(0),
            guard_granules: AtomicU64::new(0),
            granule_decisions: AtomicU64::new(0),
            small_frees: AtomicU64::new(0),
        }
    }
}

/// Process-global counters for rare events.
pub struct GlobalStats {
    pub large_allocs: AtomicU64,
    pub large_frees: AtomicU64,
    pub violations: [AtomicU64; 6],
    /// Most recent violation, retained for in-process inspection when
    /// aborting is disabled.
    pub last_report: Mutex<Option<SecurityReport>>,
}

impl GlobalStats {
    #[allow(clippy::declare_interior_mutable_const)]
    const ZERO: AtomicU64 = AtomicU64::new(0);

    pub const fn new() -> Self {
        GlobalStats {
            large_allocs: AtomicU64::new(0),
            large_frees: AtomicU64::new(0),
            violations: [Self::ZERO; 6],
            last_report: Mutex::new(None),
        }
    }
}

/// Consistent-enough copy of every counter. All fields are monotone
/// non-decreasing over the life of one allocator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub alloc_by_class: [u64; NUM_CLASSES],
    pub chain_served: [u64; 4],
    pub small_allocs: u64,
    pub freelist_served: u64,
    pub bump_served: u64,
    pub overrides_taken: u64,
    pub guard_granules: u64,
    pub granule_decisions: u64,
    pub small_frees: u64,
    pub large_allocs: u64,
    pub large_frees: u64,
    pub mmap_calls: u64,
    pub munmap_calls: u64,
    pub mprotect_calls: u64,
    /// The allocator has no release-to-OS path, so this is always zero; the
    /// field exists so syscall reports are explicit about it.
    pub madvise_calls: u64,
    pub violations: [u64; 6],
}

impl StatsSnapshot {
    pub fn violation_total(&self) -> u64 {
        self.violations.iter().sum()
    }

    /// Fraction of small allocations served from freelists.
    pub fn freelist_fraction(&self) -> f64 {
        let total = self.freelist_served + self.bump_served;
        if total == 0 {
            0.0
        } else {
            self.freelist_served as f64 / total as f64
        }
    }

    /// Counter-wise difference, for measuring one workload's activity.
    pub fn delta_since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        let mut out = *self;
        for i in 0..NUM_CLASSES {
            out.alloc_by_class[i] -= earlier.alloc_by_class[i];
        }
        for i in 0..4 {
            out.chain_served[i] -= earlier.chain_served[i];
        }
        out.small_allocs -= earlier.small_allocs;
        out.freelist_served -= earlier.freelist_served;
        out.bump_served -= earlier.bump_served;
        out.overrides_taken -= earlier.overrides_taken;
        out.guard_granules -= earlier.guard_granules;
        out.granule_decisions -= earlier.granule_decisions;
        out.small_frees -= earlier.small_frees;
        out.large_allocs -= earlier.large_allocs;
        out.large_frees -= earlier.large_frees;
        out.mmap_calls -= earlier.mmap_calls;
        out.munmap_calls -= earlier.munmap_calls;
        out.mprotect_calls -= earlier.mprotect_calls;
        out.madvise_calls -= earlier.madvise_calls;
        for i in 0..6 {
            out.violations[i] -= earlier.violations[i];
        }
        out
    }
}

pub(crate) fn accumulate(snapshot: &mut StatsSnapshot, shard: &SubheapStats) {
    for i in 0..NUM_CLASSES {
        snapshot.alloc_by_class[i] += shard.alloc_by_class[i].load(Ordering::Relaxed);
    }
    for i in 0..4 {
        snapshot.chain_served[i] += shard.chain_served[i].load(Ordering::Relaxed);
    }
    snapshot.freelist_served += shard.freelist_served.load(Ordering::Relaxed);
    snapshot.bump_served += shard.bump_served.load(Ordering::Relaxed);
    snapshot.overrides_taken += shard.overrides_taken.load(Ordering::Relaxed);
    snapshot.guard_granules += shard.guard_granules.load(Ordering::Relaxed);
    snapshot.granule_decisions += shard.granule_decisions.load(Ordering::Relaxed);
    snapshot.small_frees += shard.small_frees.load(Ordering::Relaxed);
}
