//! Large objects: one private anonymous mapping per allocation, unmapped
//! immediately on free so any later access faults.
//!
//! The table validates frees and serves resize queries. Freed bases are
//! remembered (address only) so a stale double free of a large object is
//! reported as an unknown large base rather than mistaken for a foreign
//! pointer. Node-based containers keep every internal allocation small,
//! which matters when the allocator is interposed as the process allocator.

use crate::os;
use crate::report::{ReportClass, SecurityReport, ViolationKind};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::Ordering;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LargeRecord {
    pub base: usize,
    /// Request rounded up to whole pages; the unmap length.
    pub mapped_len: usize,
    pub requested: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum LargeFreeOutcome {
    /// The base was live and is now unmapped.
    Freed,
    /// Interior of a live mapping, or a base we already unmapped.
    UnknownLarge,
    /// Never one of ours; the caller decides what that means.
    NotLarge,
}

struct LargeInner {
    live: BTreeMap<usize, LargeRecord>,
    freed: BTreeSet<usize>,
}

pub struct LargeTable {
    inner: Mutex<LargeInner>,
}

impl LargeTable {
    pub const fn new() -> Self {
        LargeTable {
            inner: Mutex::new(LargeInner {
                live: BTreeMap::new(),
                freed: BTreeSet::new(),
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LargeInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Map a fresh zero-filled region for `request` bytes.
    pub fn allocate(&self, request: usize, stats: &crate::stats::GlobalStats) -> Option<*mut u8> {
        let page = os::page_size();
        let mapped_len = request.checked_add(page - 1)? & !(page - 1);
        let base = os::map_rw(mapped_len).ok()?;
        let record = LargeRecord {
            base: base as usize,
            mapped_len,
            requested: request,
        };
        let mut inner = self.lock();
        inner.freed.remove(&record.base); // address space can be reissued by the OS
        let prev = inner.live.insert(record.base, record);
        debug_assert!(prev.is_none(), "OS returned an overlapping mapping");
        drop(inner);
        stats.large_allocs.fetch_add(1, Ordering::Relaxed);
        Some(base)
    }

    /// Exact-base free. Unmapping happens outside the table lock.
    pub fn free(&self, addr: usize, stats: &crate::stats::GlobalStats) -> LargeFreeOutcome {
        let mut inner = self.lock();
        if let Some(rec) = inner.live.remove(&addr) {
            inner.freed.insert(addr);
            drop(inner);
            os::unmap(rec.base as *mut u8, rec.mapped_len);
            stats.large_frees.fetch_add(1, Ordering::Relaxed);
            return LargeFreeOutcome::Freed;
        }
        // Interior of a live mapping?
        if let Some((_, rec)) = inner.live.range(..=addr).next_back() {
            if addr < rec.base + rec.mapped_len {
                return LargeFreeOutcome::UnknownLarge;
            }
        }
        if inner.freed.contains(&addr) {
            return LargeFreeOutcome::UnknownLarge;
        }
        LargeFreeOutcome::NotLarge
    }

    /// Live record containing or starting at `addr` (exact base only).
    pub fn lookup(&self, addr: usize) -> Option<LargeRecord> {
        self.lock().live.get(&addr).copied()
    }

    /// Side-effect-free classification with the same outcomes as `free`.
    pub fn probe(&self, addr: usize) -> LargeFreeOutcome {
        let inner = self.lock();
        if inner.live.contains_key(&addr) {
            return LargeFreeOutcome::Freed;
        }
        if let Some((_, rec)) = inner.live.range(..=addr).next_back() {
            if addr < rec.base + rec.mapped_len {
                return LargeFreeOutcome::UnknownLarge;
            }
        }
        if inner.freed.contains(&addr) {
            return LargeFreeOutcome::UnknownLarge;
        }
        LargeFreeOutcome::NotLarge
    }

    /// Unmap every live record. Used by test teardown so resets do not leak
    /// committed pages.
    pub fn drain_unmap_all(&self) {
        let mut inner = self.lock();
        while let Some((_, rec)) = inner.live.pop_first() {
            os::unmap(rec.base as *mut u8, rec.mapped_len);
        }
        inner.freed.clear();
    }

    pub fn report_for(&self, addr: usize) -> SecurityReport {
        SecurityReport::new(ViolationKind::InvalidUnknownLarge, addr, ReportClass::Large)
    }

    /// Invariant check: live ranges pairwise disjoint. Test instrumentation.
    #[cfg(any(test, feature = "testing"))]
    pub fn ranges_disjoint(&self) -> bool {
        let inner = self.lock();
        let mut prev_end = 0usize;
        for rec in inner.live.values() {
            if rec.base < prev_end {
                return false;
            }
            prev_end = rec.base + rec.mapped_len;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::GlobalStats;

    #[test]
    fn allocation_rounds_to_pages_and_zero_fills() {
        let table = LargeTable::new();
        let stats = GlobalStats::new();
        let page = os::page_size();

        let p = table.allocate(2 << 20, &stats).unwrap();
        let rec = table.lookup(p as usize).unwrap();
        assert_eq!(rec.mapped_len, 2 << 20);
        unsafe {
            assert_eq!(*p, 0);
            assert_eq!(*p.add((2 << 20) - 1), 0);
        }

        let q = table.allocate((1 << 20) + 1, &stats).unwrap();
        assert_eq!(
            table.lookup(q as usize).unwrap().mapped_len,
            (1 << 20) + page
        );

        assert!(table.ranges_disjoint());
        assert_eq!(table.free(p as usize, &stats), LargeFreeOutcome::Freed);
        assert_eq!(table.free(q as usize, &stats), LargeFreeOutcome::Freed);
    }

    #[test]
    fn consecutive_allocations_never_overlap() {
        let table = LargeTable::new();
        let stats = GlobalStats::new();
        let a = table.allocate(4 << 20, &stats).unwrap() as usize;
        let b = table.allocate(4 << 20, &stats).unwrap() as usize;
        assert!(a + (4 << 20) <= b || b + (4 << 20) <= a);
        assert!(table.ranges_disjoint());
        table.free(a, &stats);
        table.free(b, &stats);
    }

    #[test]
    fn stale_and_interior_frees_are_unknown_large() {
        let table = LargeTable::new();
        let stats = GlobalStats::new();
        let page = os::page_size();
        let p = table.allocate(2 << 20, &stats).unwrap() as usize;

        assert_eq!(table.free(p + page, &stats), LargeFreeOutcome::UnknownLarge);
        assert_eq!(table.free(p, &stats), LargeFreeOutcome::Freed);
        // Second free: the record is gone, but the base is remembered.
        assert_eq!(table.free(p, &stats), LargeFreeOutcome::UnknownLarge);
        // A pointer that was never ours.
        let local = 0usize;
        assert_eq!(
            table.free(&local as *const usize as usize, &stats),
            LargeFreeOutcome::NotLarge
        );
    }

    #[test]
    fn counters_track_mappings() {
        let table = LargeTable::new();
        let stats = GlobalStats::new();
        let before_mmap = os::mmap_calls();
        let before_unmap = os::munmap_calls();
        let mut ptrs = Vec::new();
        for _ in 0..5 {
            ptrs.push(table.allocate(1 << 20, &stats).unwrap() as usize);
        }
        assert_eq!(os::mmap_calls() - before_mmap, 5);
        for p in ptrs {
            assert_eq!(table.free(p, &stats), LargeFreeOutcome::Freed);
        }
        assert_eq!(os::munmap_calls() - before_unmap, 5);
        assert_eq!(stats.large_allocs.load(Ordering::Relaxed), 5);
        assert_eq!(stats.large_frees.load(Ordering::Relaxed), 5);
    }
}
