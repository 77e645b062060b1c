//! Small-object allocation: per-thread subheaps with four chains per size
//! class.
//!
//! Each chain owns one quadrant of the class's bag (a bump cursor over
//! never-allocated space) plus one FIFO freelist threaded through shadow
//! words. An allocation draws one random number: the low two bits pick the
//! chain, and a 1-in-W test decides whether to bypass the freelist and
//! consume fresh space anyway. Frees go back to a randomly chosen chain of
//! the owning subheap, appended at the tail, so reuse is delayed and ordered
//! first-in/first-out.
//!
//! Shadow word protocol: `1` means in-use; any even value is a free link
//! (the shadow address of the next free slot, or `0` for none). Words are
//! written with release ordering after the slot's canary, and the bump
//! frontier is published last, so a remote thread that observes a slot below
//! the frontier can always trust its canary byte.

use crate::config::AllocatorConfig;
use crate::layout::{class_size, LayoutGeometry, SlotLoc, NUM_CLASSES};
use crate::os;
use crate::report::{ReportClass, SecurityReport, ViolationKind};
use crate::stats::SubheapStats;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicU8, Ordering};
use std::sync::{Mutex, MutexGuard};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutOfMemory;

/// Split one random draw into (chain index, freelist override).
#[inline]
pub fn choose_chain(r: u64, w: u64) -> (usize, bool) {
    ((r % 4) as usize, r % w == 0)
}

#[inline]
fn pack_frontier(heap: u32, off: u32) -> u64 {
    ((heap as u64) << 32) | off as u64
}

#[inline]
fn unpack_frontier(v: u64) -> (u32, u32) {
    ((v >> 32) as u32, v as u32)
}

/// View a shadow word as its atomic.
#[inline]
pub fn shadow_word(addr: usize) -> &'static AtomicU64 {
    unsafe { &*(addr as *const AtomicU64) }
}

struct ChainInner {
    /// Shadow address of the oldest free slot, or 0.
    head: u64,
    /// Shadow address of the newest free slot, or 0.
    tail: u64,
}

/// One allocation stream: a bump quadrant plus a FIFO freelist. Padded so
/// chains of one subheap do not share cache lines under cross-thread frees.
#[repr(align(64))]
struct Chain {
    inner: Mutex<ChainInner>,
    /// Packed (current_heap << 32 | offset_in_quadrant); written under the
    /// chain lock, read lock-free by free classification and canary scans.
    frontier: AtomicU64,
}

#[allow(clippy::declare_interior_mutable_const)]
const CHAIN_INIT: Chain = Chain {
    inner: Mutex::new(ChainInner { head: 0, tail: 0 }),
    frontier: AtomicU64::new(0),
};

/// Per-thread-slot allocation state. Placed in its own anonymous mapping;
/// the guard-page bitmaps for every (heap, class) bag of this subheap follow
/// the struct in the same mapping.
pub struct Subheap {
    thread_index: u32,
    map_len: usize,
    guard_class_off: [u32; NUM_CLASSES],
    guard_per_heap: u32,
    pub stats: SubheapStats,
    chains: [[Chain; 4]; NUM_CLASSES],
}

fn align_up(v: usize, a: usize) -> usize {
    (v + a - 1) & !(a - 1)
}

/// Byte offsets of each class's guard bitmap within one heap's directory.
fn guard_dir_layout(geom: &LayoutGeometry, page: usize) -> ([u32; NUM_CLASSES], u32) {
    let mut off = [0u32; NUM_CLASSES];
    let mut cur = 0u32;
    for c in 0..geom.num_classes {
        off[c] = cur;
        let granules = geom.bag_size / geom.granule(c, page);
        cur += align_up(granules.div_ceil(8), 8) as u32;
    }
    (off, cur)
}

impl Subheap {
    /// Map and initialize a subheap for `thread_index`.
    pub fn create(
        geom: &LayoutGeometry,
        page: usize,
        thread_index: u32,
    ) -> Result<*mut Subheap, os::MapFailed> {
        let (guard_class_off, guard_per_heap) = guard_dir_layout(geom, page);
        let total = align_up(
            std::mem::size_of::<Subheap>() + guard_per_heap as usize * geom.num_heaps,
            page,
        );
        let base = os::reserve(total)?;
        let p = base as *mut Subheap;
        unsafe {
            std::ptr::write(
                p,
                Subheap {
                    thread_index,
                    map_len: total,
                    guard_class_off,
                    guard_per_heap,
                    stats: SubheapStats::new(),
                    chains: [[CHAIN_INIT; 4]; NUM_CLASSES],
                },
            );
        }
        Ok(p)
    }

    /// Unmap a subheap created by `create`. Caller must guarantee no thread
    /// is still using it.
    pub unsafe fn destroy(p: *mut Subheap) {
        let len = (*p).map_len;
        os::unmap(p as *mut u8, len);
    }

    pub fn thread_index(&self) -> u32 {
        self.thread_index
    }

    fn guard_dir(&self) -> usize {
        self as *const Subheap as usize + std::mem::size_of::<Subheap>()
    }

    fn guard_byte(&self, heap: usize, class: usize, granule_idx: usize) -> &AtomicU8 {
        let addr = self.guard_dir()
            + heap * self.guard_per_heap as usize
            + self.guard_class_off[class] as usize
            + granule_idx / 8;
        unsafe { &*(addr as *const AtomicU8) }
    }

    fn guard_mark(&self, heap: usize, class: usize, granule_idx: usize) {
        self.guard_byte(heap, class, granule_idx)
            .fetch_or(1 << (granule_idx % 8), Ordering::Relaxed);
    }

    pub fn guard_is_set(&self, heap: usize, class: usize, granule_idx: usize) -> bool {
        self.guard_byte(heap, class, granule_idx).load(Ordering::Relaxed) & (1 << (granule_idx % 8))
            != 0
    }

    /// Snapshot of a chain's bump frontier: (current heap, byte offset into
    /// the quadrant). Acquire-ordered so canaries and guard bits below the
    /// frontier are visible to the reader.
    pub fn frontier_of(&self, class: usize, chain: usize) -> (u32, u32) {
        unpack_frontier(self.chains[class][chain].frontier.load(Ordering::Acquire))
    }

    fn lock_chain(&self, class: usize, chain: usize) -> MutexGuard<'_, ChainInner> {
        self.chains[class][chain]
            .inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
    }

    /// Serve one small allocation from chain `n` of `class`.
    ///
    /// Returns the slot address and whether it came from the freelist. The
    /// canary byte is already written; the slot's prior contents are
    /// otherwise untouched.
    pub fn allocate(
        &self,
        geom: &LayoutGeometry,
        cfg: &AllocatorConfig,
        page: usize,
        class: usize,
        n: usize,
        override_freelist: bool,
        rng: &mut impl FnMut() -> u64,
    ) -> Result<(usize, bool), OutOfMemory> {
        let sclass = class_size(class);
        let chain = &self.chains[class][n];
        let mut inner = self.lock_chain(class, n);

        if !override_freelist && inner.head != 0 {
            // FIFO reuse: pop the oldest entry from the head.
            let shadow = inner.head as usize;
            let word = shadow_word(shadow);
            let next = word.load(Ordering::Acquire);
            debug_assert_eq!(next & 1, 0, "freelist link has in-use bit set");
            inner.head = next;
            if next == 0 {
                inner.tail = 0;
            }
            drop(inner);
            let addr = geom.object_for(shadow).expect("freelist link outside shadow region");
            debug_assert_eq!(
                geom.decompose(addr).map(|l| (l.class, l.thread)),
                Some((class, self.thread_index as usize))
            );
            unsafe {
                std::ptr::write_volatile((addr + sclass - 1) as *mut u8, cfg.canary_byte);
            }
            word.store(1, Ordering::Release);
            self.stats.freelist_served.fetch_add(1, Ordering::Relaxed);
            self.stats.chain_served[n].fetch_add(1, Ordering::Relaxed);
            self.stats.alloc_by_class[class].fetch_add(1, Ordering::Relaxed);
            return Ok((addr, true));
        }

        // Bump path over this chain's quadrant, advancing to the equivalent
        // bag of the next heap on exhaustion.
        let quad = geom.quad_size();
        let granule = geom.granule(class, page);
        let (mut heap, mut off) =
            unpack_frontier(chain.frontier.load(Ordering::Relaxed));
        loop {
            if off as usize >= quad {
                heap += 1;
                off = 0;
            }
            if heap as usize >= geom.num_heaps {
                chain.frontier.store(pack_frontier(heap, off), Ordering::Release);
                return Err(OutOfMemory);
            }
            let quad_base =
                geom.bag_base(heap as usize, self.thread_index as usize, class) + n * quad;
            let abs = quad_base + off as usize;
            if off as usize % granule == 0 {
                // Entering a new granule: decide whether it becomes a guard.
                self.stats.granule_decisions.fetch_add(1, Ordering::Relaxed);
                let draw = rng();
                if (draw % 100) < cfg.guard_budget_pct as u64 {
                    if os::protect_none(abs as *mut u8, granule).is_err() {
                        // A failing protect call means the reservation itself
                        // is broken; continuing would hand out guard space.
                        crate::frontend::fatal("guard-page mprotect failed");
                    }
                    self.guard_mark(heap as usize, class, (n * quad + off as usize) / granule);
                    self.stats.guard_granules.fetch_add(1, Ordering::Relaxed);
                    off += granule as u32;
                    chain.frontier.store(pack_frontier(heap, off), Ordering::Release);
                    continue;
                }
            }
            // Claim the slot. Canary first, then the shadow word, then the
            // published frontier, so remote observers below the frontier
            // always see a written canary.
            unsafe {
                std::ptr::write_volatile((abs + sclass - 1) as *mut u8, cfg.canary_byte);
            }
            let slot = (n * quad + off as usize) / sclass;
            let shadow = geom.shadow_for(SlotLoc {
                heap: heap as usize,
                thread: self.thread_index as usize,
                class,
                slot,
            });
            shadow_word(shadow).store(1, Ordering::Release);
            off += sclass as u32;
            chain.frontier.store(pack_frontier(heap, off), Ordering::Release);
            drop(inner);
            self.stats.bump_served.fetch_add(1, Ordering::Relaxed);
            self.stats.chain_served[n].fetch_add(1, Ordering::Relaxed);
            self.stats.alloc_by_class[class].fetch_add(1, Ordering::Relaxed);
            return Ok((abs, false));
        }
    }

    /// Append a freed slot (shadow word already cleared to 0) to the tail of
    /// chain `m`'s freelist.
    fn push_freed(&self, class: usize, m: usize, shadow: usize) {
        let mut inner = self.lock_chain(class, m);
        if inner.tail == 0 {
            inner.head = shadow as u64;
            inner.tail = shadow as u64;
        } else {
            shadow_word(inner.tail as usize).store(shadow as u64, Ordering::Release);
            inner.tail = shadow as u64;
        }
    }

    /// Number of entries in a freelist; panics if a cycle-length bound is
    /// exceeded. Test instrumentation.
    #[cfg(any(test, feature = "testing"))]
    pub fn freelist_len(&self, class: usize, chain: usize) -> usize {
        let inner = self.lock_chain(class, chain);
        let mut cur = inner.head;
        let mut n = 0usize;
        while cur != 0 {
            n += 1;
            assert!(n <= 1 << 28, "freelist traversal exceeded bound: cycle?");
            cur = shadow_word(cur as usize).load(Ordering::Acquire);
            assert_eq!(cur & 1, 0, "freelist link has in-use bit set");
        }
        if n == 0 {
            assert_eq!(inner.tail, 0, "head empty but tail set");
        } else {
            assert_ne!(inner.tail, 0, "tail empty but head set");
        }
        n
    }
}

fn subheap_at(table: &[AtomicPtr<Subheap>], thread: usize) -> Option<&Subheap> {
    let p = table[thread].load(Ordering::Acquire);
    if p.is_null() {
        None
    } else {
        Some(unsafe { &*p })
    }
}

/// True if the slot lies at or beyond its owning chain's bump frontier,
/// i.e. was never reached by allocation.
fn beyond_frontier(owner: &Subheap, geom: &LayoutGeometry, loc: &SlotLoc) -> bool {
    let sclass = class_size(loc.class);
    let quad_slots = geom.slots_per_bag(loc.class) / 4;
    let q = loc.slot / quad_slots;
    let (fheap, foff) = owner.frontier_of(loc.class, q);
    let off_in_quad = (loc.slot % quad_slots) * sclass;
    (loc.heap as u32) > fheap || (loc.heap as u32 == fheap && off_in_quad as u32 >= foff)
}

/// Inspect the canary of the slot being freed and of up to two neighbors on
/// each side within the same bag. Guard granules and never-allocated slots
/// carry no canary and are skipped.
pub fn verify_canaries(
    geom: &LayoutGeometry,
    page: usize,
    cfg: &AllocatorConfig,
    owner: &Subheap,
    loc: SlotLoc,
) -> Result<(), SecurityReport> {
    let sclass = class_size(loc.class);
    let per_bag = geom.slots_per_bag(loc.class);
    let granule = geom.granule(loc.class, page);
    let lo = loc.slot.saturating_sub(2);
    let hi = (loc.slot + 2).min(per_bag - 1);
    for j in lo..=hi {
        let neighbor = SlotLoc { slot: j, ..loc };
        // Frontier first (acquire), then the guard bit: guard marks below a
        // published frontier are guaranteed visible.
        if beyond_frontier(owner, geom, &neighbor) {
            continue;
        }
        if owner.guard_is_set(loc.heap, loc.class, j * sclass / granule) {
            continue;
        }
        let addr = geom.compose(neighbor);
        let byte = unsafe { std::ptr::read_volatile((addr + sclass - 1) as *const u8) };
        if byte != cfg.canary_byte {
            return Err(SecurityReport::new(
                ViolationKind::OverflowDetected,
                addr,
                ReportClass::Small(loc.class),
            ));
        }
    }
    Ok(())
}

/// Validate a small-region address as a live, correctly aligned slot.
/// Shared by the free and resize paths; performs no mutation.
pub fn classify_small(
    geom: &LayoutGeometry,
    page: usize,
    table: &[AtomicPtr<Subheap>],
    addr: usize,
) -> Result<SlotLoc, SecurityReport> {
    let loc = match geom.decompose(addr) {
        Some(l) => l,
        None => {
            return Err(SecurityReport::new(
                ViolationKind::InvalidOutsideHeap,
                addr,
                ReportClass::Unknown,
            ))
        }
    };
    let sclass = class_size(loc.class);
    if addr & (sclass - 1) != 0 {
        return Err(SecurityReport::new(
            ViolationKind::InvalidUnaligned,
            addr,
            ReportClass::Small(loc.class),
        ));
    }
    let owner = match subheap_at(table, loc.thread) {
        Some(o) => o,
        // No subheap was ever bound to this slot, so nothing in it was ever
        // allocated.
        None => {
            return Err(SecurityReport::new(
                ViolationKind::InvalidNeverAllocated,
                addr,
                ReportClass::Small(loc.class),
            ))
        }
    };
    let word = shadow_word(geom.shadow_for(loc));
    if word.load(Ordering::Acquire) != 1 {
        let beyond = beyond_frontier(owner, geom, &loc);
        let granule = geom.granule(loc.class, page);
        let kind =
            if beyond || owner.guard_is_set(loc.heap, loc.class, loc.slot * sclass / granule) {
                ViolationKind::InvalidNeverAllocated
            } else {
                ViolationKind::DoubleFree
            };
        return Err(SecurityReport::new(kind, addr, ReportClass::Small(loc.class)));
    }
    Ok(loc)
}

/// Classify and perform the deallocation of a small-region address.
///
/// Hostile input is expected: the address may be misaligned, never
/// allocated, already freed, or sitting in a guard granule. A successful
/// free verifies canaries, optionally shreds the contents, clears the shadow
/// word, and appends the slot to one of the owning subheap's four freelists.
pub fn small_free(
    geom: &LayoutGeometry,
    page: usize,
    cfg: &AllocatorConfig,
    table: &[AtomicPtr<Subheap>],
    rng: &mut impl FnMut() -> u64,
    addr: usize,
) -> Result<(), SecurityReport> {
    let loc = classify_small(geom, page, table, addr)?;
    let sclass = class_size(loc.class);
    let owner = subheap_at(table, loc.thread).expect("classified slot lost its subheap");
    let shadow = geom.shadow_for(loc);
    let word = shadow_word(shadow);

    // Read-only canary verification happens before the slot is claimed.
    verify_canaries(geom, page, cfg, owner, loc)?;

    if word
        .compare_exchange(1, 0, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        // A racing free won the claim between our load and the exchange.
        return Err(SecurityReport::new(
            ViolationKind::DoubleFree,
            addr,
            ReportClass::Small(loc.class),
        ));
    }

    if cfg.destroy_on_free {
        // Shred the body, preserving the canary byte at the end.
        unsafe {
            std::ptr::write_bytes(addr as *mut u8, 0xDF, sclass - 1);
        }
    }

    let m = match cfg.force_chain {
        Some(c) => c as usize,
        None => (rng() % 4) as usize,
    };
    owner.push_freed(loc.class, m, shadow);
    owner.stats.small_frees.fetch_add(1, Ordering::Relaxed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::NUM_CLASSES;

    /// A real mapped reduced-scale world: 2 thread slots, 4 MiB bags, full
    /// 17 classes, configurable heap count.
    struct World {
        geom: LayoutGeometry,
        cfg: AllocatorConfig,
        page: usize,
        table: Vec<AtomicPtr<Subheap>>,
        heap_raw: (*mut u8, usize),
        shadow_raw: (*mut u8, usize),
    }

    impl World {
        fn new(cfg: AllocatorConfig) -> World {
            World::with_heaps(cfg, 2)
        }

        fn with_heaps(mut cfg: AllocatorConfig, heaps: usize) -> World {
            let page = os::page_size();
            let bag = 4 << 20;
            let threads = 2usize;
            cfg.max_threads = threads;
            let heap_span = heaps * threads * NUM_CLASSES * bag;
            let heap_raw = os::reserve(heap_span + bag).unwrap();
            let heap_base = align_up(heap_raw as usize, bag);
            let shadow_span = heaps * threads * NUM_CLASSES * (bag / 16) * 8;
            let shadow_raw = os::reserve(shadow_span + 8).unwrap();
            let geom = LayoutGeometry::new(
                heap_base,
                align_up(shadow_raw as usize, 8),
                bag,
                NUM_CLASSES,
                threads,
                heaps,
            );
            let table: Vec<AtomicPtr<Subheap>> = (0..threads)
                .map(|_| AtomicPtr::new(std::ptr::null_mut()))
                .collect();
            let sub = Subheap::create(&geom, page, 0).unwrap();
            table[0].store(sub, Ordering::Release);
            World {
                geom,
                cfg,
                page,
                table,
                heap_raw: (heap_raw, heap_span + bag),
                shadow_raw: (shadow_raw, shadow_span + 8),
            }
        }

        fn sub(&self) -> &Subheap {
            subheap_at(&self.table, 0).unwrap()
        }

        fn alloc(&self, class: usize, chain: usize, ovr: bool, rng: &mut Xs) -> (usize, bool) {
            self.sub()
                .allocate(&self.geom, &self.cfg, self.page, class, chain, ovr, &mut || {
                    rng.0.next_u64()
                })
                .unwrap()
        }

        fn free(&self, addr: usize, rng: &mut Xs) -> Result<(), SecurityReport> {
            small_free(&self.geom, self.page, &self.cfg, &self.table, &mut || rng.0.next_u64(), addr)
        }
    }

    impl Drop for World {
        fn drop(&mut self) {
            for s in &self.table {
                let p = s.load(Ordering::Acquire);
                if !p.is_null() {
                    unsafe { Subheap::destroy(p) };
                }
            }
            os::unmap(self.heap_raw.0, self.heap_raw.1);
            os::unmap(self.shadow_raw.0, self.shadow_raw.1);
        }
    }

    struct Xs(crate::rng::Xorshift128Plus);

    fn cfg_guardless() -> AllocatorConfig {
        let mut cfg = AllocatorConfig::from_seed(11, true);
        cfg.guard_budget_pct = 0;
        cfg.bag_size = 4 << 20;
        cfg
    }

    fn rng() -> Xs {
        Xs(crate::rng::Xorshift128Plus::from_seed(99, 0))
    }

    #[test]
    fn choose_chain_matches_moduli() {
        assert_eq!(choose_chain(7, 16), (3, false));
        assert_eq!(choose_chain(32, 16), (0, true));
        assert_eq!(choose_chain(0, 16), (0, true));
    }

    #[test]
    fn bump_serves_sequential_quadrant_slots() {
        let w = World::new(cfg_guardless());
        let mut r = rng();
        let class = 6; // 1024 B
        let quad_base = w.geom.bag_base(0, 0, class) + w.geom.quad_size();
        let (a, from_list) = w.alloc(class, 1, false, &mut r);
        assert_eq!(a, quad_base);
        assert!(!from_list);
        let (b, _) = w.alloc(class, 1, false, &mut r);
        assert_eq!(b, quad_base + 1024);
        // Canary present at the last byte of each slot.
        let canary = unsafe { *(a as *const u8).add(1023) };
        assert_eq!(canary, w.cfg.canary_byte);
        // Chain 2 starts at its own quadrant.
        let (c, _) = w.alloc(class, 2, false, &mut r);
        assert_eq!(c, w.geom.bag_base(0, 0, class) + 2 * w.geom.quad_size());
    }

    #[test]
    fn freelist_reuse_is_fifo_from_head() {
        let mut cfg = cfg_guardless();
        cfg.force_chain = Some(0);
        let w = World::new(cfg);
        let mut r = rng();
        let a = w.alloc(3, 0, false, &mut r).0;
        let b = w.alloc(3, 0, false, &mut r).0;
        let c = w.alloc(3, 0, false, &mut r).0;
        w.free(a, &mut r).unwrap();
        w.free(b, &mut r).unwrap();
        w.free(c, &mut r).unwrap();
        assert_eq!(w.sub().freelist_len(3, 0), 3);
        assert_eq!(w.alloc(3, 0, false, &mut r).0, a);
        assert_eq!(w.alloc(3, 0, false, &mut r).0, b);
        assert_eq!(w.alloc(3, 0, false, &mut r).0, c);
        assert_eq!(w.sub().freelist_len(3, 0), 0);
    }

    #[test]
    fn override_skips_nonempty_freelist() {
        let mut cfg = cfg_guardless();
        cfg.force_chain = Some(0);
        let w = World::new(cfg);
        let mut r = rng();
        let a = w.alloc(0, 0, false, &mut r).0;
        w.free(a, &mut r).unwrap();
        let (b, from_list) = w.alloc(0, 0, true, &mut r);
        assert!(!from_list);
        assert_ne!(a, b);
        // Non-override allocation then reuses the freed slot.
        let (c, from_list) = w.alloc(0, 0, false, &mut r);
        assert!(from_list);
        assert_eq!(c, a);
    }

    #[test]
    fn guard_budget_zero_never_protects() {
        let before = os::mprotect_calls();
        let w = World::new(cfg_guardless());
        let mut r = rng();
        for _ in 0..2000 {
            w.alloc(0, 0, false, &mut r);
        }
        assert_eq!(os::mprotect_calls(), before);
        assert_eq!(
            w.sub().stats.guard_granules.load(Ordering::Relaxed),
            0
        );
    }

    #[test]
    fn guard_budget_installs_roughly_ten_percent() {
        let mut cfg = cfg_guardless();
        cfg.guard_budget_pct = 10;
        let w = World::with_heaps(cfg, 8);
        let mut r = rng();
        // Class 8 = 4096 B: one slot per granule. 1700 slots per chain stays
        // below the 8 MiB of quadrant space even with ~10% lost to guards.
        for chain in 0..4 {
            for _ in 0..1700 {
                w.alloc(8, chain, false, &mut r);
            }
        }
        let guards = w.sub().stats.guard_granules.load(Ordering::Relaxed) as f64;
        let decisions = w.sub().stats.granule_decisions.load(Ordering::Relaxed) as f64;
        assert!(decisions >= 6800.0);
        let frac = guards / decisions;
        assert!((0.085..=0.115).contains(&frac), "guard fraction {frac}");
    }

    #[test]
    fn allocations_never_land_on_guard_granules() {
        let mut cfg = cfg_guardless();
        cfg.guard_budget_pct = 25;
        let w = World::new(cfg);
        let mut r = rng();
        for _ in 0..3000 {
            let (addr, _) = w.alloc(5, 0, false, &mut r); // 512 B slots
            let loc = w.geom.decompose(addr).unwrap();
            let granule = w.geom.granule(5, w.page);
            let gidx = loc.slot * 512 / granule;
            assert!(!w.sub().guard_is_set(loc.heap, 5, gidx));
            // Touch the whole usable body; faults would abort the test.
            unsafe { std::ptr::write_bytes(addr as *mut u8, 0xAB, 511) };
        }
    }

    #[test]
    fn quadrant_exhaustion_advances_to_next_heap_then_oom() {
        let w = World::new(cfg_guardless());
        let mut r = rng();
        let class = 16; // 1 MiB slots, one per quadrant per bag
        let (a, _) = w.alloc(class, 0, false, &mut r);
        assert_eq!(w.geom.decompose(a).unwrap().heap, 0);
        let (b, _) = w.alloc(class, 0, false, &mut r);
        assert_eq!(w.geom.decompose(b).unwrap().heap, 1);
        let err = w.sub().allocate(
            &w.geom,
            &w.cfg,
            w.page,
            class,
            0,
            false,
            &mut || r.0.next_u64(),
        );
        assert_eq!(err, Err(OutOfMemory));
    }

    #[test]
    fn free_classification_covers_all_invalid_kinds() {
        let w = World::new(cfg_guardless());
        let mut r = rng();
        let a = w.alloc(2, 0, false, &mut r).0; // 64 B class

        // Unaligned: interior of the slot.
        let err = w.free(a + 32, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::InvalidUnaligned);

        // Never allocated: the slot at the bump frontier.
        let err = w.free(a + 64, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::InvalidNeverAllocated);

        // Never allocated: untouched thread slot's subheap.
        let foreign = w.geom.bag_base(0, 1, 2);
        let err = w.free(foreign, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::InvalidNeverAllocated);

        // Outside the region entirely.
        let err = w.free(w.geom.heap_base - 4096, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::InvalidOutsideHeap);

        // Valid free then double free.
        w.free(a, &mut r).unwrap();
        let err = w.free(a, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::DoubleFree);
    }

    #[test]
    fn overflow_detected_on_own_canary() {
        let w = World::new(cfg_guardless());
        let mut r = rng();
        let a = w.alloc(6, 0, false, &mut r).0; // 1024 B slot
        unsafe { std::ptr::write_bytes(a as *mut u8, 0x41, 1024) }; // clobbers canary
        let err = w.free(a, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::OverflowDetected);
        assert_eq!(err.addr, a);
    }

    #[test]
    fn overflow_detected_via_neighbor_scan() {
        let w = World::new(cfg_guardless());
        let mut r = rng();
        let a = w.alloc(6, 0, false, &mut r).0;
        let b = w.alloc(6, 0, false, &mut r).0;
        assert_eq!(b, a + 1024);
        // Overflow from a into b's first bytes corrupts a's canary only.
        unsafe { std::ptr::write_bytes((a + 1000) as *mut u8, 0x42, 48) };
        let err = w.free(b, &mut r).unwrap_err();
        assert_eq!(err.kind, ViolationKind::OverflowDetected);
        assert_eq!(err.addr, a, "scan must identify the corrupted neighbor");
    }

    #[test]
    fn untouched_canaries_pass() {
        let w = World::new(cfg_guardless());
        let mut r = rng();
        let a = w.alloc(6, 0, false, &mut r).0;
        let b = w.alloc(6, 0, false, &mut r).0;
        unsafe { std::ptr::write_bytes(a as *mut u8, 0x41, 1023) }; // full capacity, no overflow
        w.free(a, &mut r).unwrap();
        w.free(b, &mut r).unwrap();
    }

    #[test]
    fn destroy_on_free_shreds_body_and_keeps_canary() {
        let mut cfg = cfg_guardless();
        cfg.destroy_on_free = true;
        cfg.force_chain = Some(0);
        let w = World::new(cfg);
        let mut r = rng();
        let a = w.alloc(2, 0, false, &mut r).0;
        unsafe { std::ptr::write_bytes(a as *mut u8, 0x77, 63) };
        w.free(a, &mut r).unwrap();
        for i in 0..63 {
            assert_eq!(unsafe { *(a as *const u8).add(i) }, 0xDF);
        }
        assert_eq!(unsafe { *(a as *const u8).add(63) }, w.cfg.canary_byte);
    }

    #[test]
    fn cross_thread_free_returns_to_owner() {
        let mut cfg = cfg_guardless();
        cfg.force_chain = Some(2);
        let w = World::new(cfg);
        // Bind a second subheap.
        let sub1 = Subheap::create(&w.geom, w.page, 1).unwrap();
        w.table[1].store(sub1, Ordering::Release);
        let mut r = rng();
        // Allocate from subheap 1, free it "from" another thread's rng.
        let (addr, _) = subheap_at(&w.table, 1)
            .unwrap()
            .allocate(&w.geom, &w.cfg, w.page, 4, 2, false, &mut || r.0.next_u64())
            .unwrap();
        w.free(addr, &mut r).unwrap();
        assert_eq!(subheap_at(&w.table, 1).unwrap().freelist_len(4, 2), 1);
        assert_eq!(w.sub().freelist_len(4, 2), 0);
    }
}
