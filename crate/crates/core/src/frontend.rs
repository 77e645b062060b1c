//! The public allocation surface: `fg_malloc` / `fg_free` / `fg_calloc` /
//! `fg_realloc`, plus initialization, thread-to-subheap binding, violation
//! reporting, and statistics export.
//!
//! Initialization is lazy and idempotent; the first call from any thread
//! builds the global state from the environment. Nothing on the
//! initialization path allocates from the Rust heap, so these entry points
//! stay usable when the library is interposed as the process allocator.

use crate::config::AllocatorConfig;
use crate::large::{LargeFreeOutcome, LargeTable};
use crate::layout::{class_size, size_class_for, LayoutGeometry, NUM_CLASSES};
use crate::os;
use crate::report::{self, ReportClass, SecurityReport, ViolationKind};
use crate::rng::Xorshift128Plus;
use crate::small::{choose_chain, classify_small, small_free, OutOfMemory, Subheap};
use crate::stats::{GlobalStats, StatsSnapshot};
use std::cell::Cell;
use std::sync::atomic::{AtomicPtr, AtomicU32, Ordering};
use std::sync::Mutex;

/// Default address-space reservation for the small-object heap. Halved on
/// reservation failure until it fits.
const DEFAULT_HEAP_RESERVE: usize = 512 << 30;
const MIN_HEAP_RESERVE: usize = 1 << 30;

pub(crate) fn fatal(msg: &str) -> ! {
    unsafe {
        let prefix = b"FG-FATAL: ";
        libc::write(2, prefix.as_ptr() as *const libc::c_void, prefix.len());
        libc::write(2, msg.as_ptr() as *const libc::c_void, msg.len());
        libc::write(2, b"\n".as_ptr() as *const libc::c_void, 1);
        libc::abort()
    }
}

struct Binder {
    next: u32,
    free_len: u32,
}

/// Process-wide allocator state. Lives inside its own anonymous mapping
/// together with the subheap pointer table and the free-slot stack.
pub struct Global {
    cfg: AllocatorConfig,
    geom: LayoutGeometry,
    page: usize,
    heap_raw: (usize, usize),
    shadow_raw: (usize, usize),
    globals_len: usize,
    subheaps: *const AtomicPtr<Subheap>,
    bind_free: *mut u32,
    binder: Mutex<Binder>,
    large: LargeTable,
    gstats: GlobalStats,
}

unsafe impl Send for Global {}
unsafe impl Sync for Global {}

static GLOBAL: AtomicPtr<Global> = AtomicPtr::new(std::ptr::null_mut());
static INIT_LOCK: Mutex<()> = Mutex::new(());
/// Bumped on reset so bound threads re-derive slot and RNG state.
static EPOCH: AtomicU32 = AtomicU32::new(0);

fn align_up(v: usize, a: usize) -> usize {
    (v + a - 1) & !(a - 1)
}

impl Global {
    fn build(cfg: AllocatorConfig) -> Result<*mut Global, &'static str> {
        cfg.validate()?;
        let page = os::page_size();
        let heap_stride = cfg.max_threads * NUM_CLASSES * cfg.bag_size;

        // Reserve the small-object region, halving until the OS accepts it.
        let mut want = DEFAULT_HEAP_RESERVE;
        let heap_raw = loop {
            match os::reserve(want + cfg.bag_size) {
                Ok(p) => break (p as usize, want + cfg.bag_size),
                Err(_) => {
                    want /= 2;
                    if want < MIN_HEAP_RESERVE.max(heap_stride) {
                        return Err("cannot reserve small-object address space");
                    }
                }
            }
        };
        let heap_base = align_up(heap_raw.0, cfg.bag_size);
        let usable = heap_raw.0 + heap_raw.1 - heap_base;
        let mut num_heaps = usable / heap_stride;
        if num_heaps == 0 {
            os::unmap(heap_raw.0 as *mut u8, heap_raw.1);
            return Err("reservation too small for one heap (reduce FG_MAX_THREADS or bag size)");
        }

        // Shadow region: one word per minimum-class slot of every bag. On
        // failure, shrink the heap count until both regions fit.
        let stride = (cfg.bag_size >> 4) * 8;
        let shadow_raw = loop {
            let span = num_heaps * cfg.max_threads * NUM_CLASSES * stride;
            match os::reserve(span + 8) {
                Ok(p) => break (p as usize, span + 8),
                Err(_) => {
                    num_heaps /= 2;
                    if num_heaps == 0 {
                        os::unmap(heap_raw.0 as *mut u8, heap_raw.1);
                        return Err("cannot reserve shadow address space");
                    }
                }
            }
        };
        let geom = LayoutGeometry::new(
            heap_base,
            align_up(shadow_raw.0, 8),
            cfg.bag_size,
            NUM_CLASSES,
            cfg.max_threads,
            num_heaps,
        );

        // One block for the Global itself, the subheap table, and the
        // free-slot stack.
        let table_off = align_up(std::mem::size_of::<Global>(), 64);
        let free_off = table_off + cfg.max_threads * std::mem::size_of::<AtomicPtr<Subheap>>();
        let globals_len = align_up(free_off + cfg.max_threads * 4, page);
        let block = match os::reserve(globals_len) {
            Ok(p) => p as usize,
            Err(_) => {
                os::unmap(heap_raw.0 as *mut u8, heap_raw.1);
                os::unmap(shadow_raw.0 as *mut u8, shadow_raw.1);
                return Err("cannot map allocator state block");
            }
        };
        let g = block as *mut Global;
        unsafe {
            std::ptr::write(
                g,
                Global {
                    cfg,
                    geom,
                    page,
                    heap_raw,
                    shadow_raw,
                    globals_len,
                    subheaps: (block + table_off) as *const AtomicPtr<Subheap>,
                    bind_free: (block + free_off) as *mut u32,
                    binder: Mutex::new(Binder {
                        next: 0,
                        free_len: 0,
                    }),
                    large: LargeTable::new(),
                    gstats: GlobalStats::new(),
                },
            );
        }
        Ok(g)
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &LayoutGeometry {
        &self.geom
    }

    fn subheap_table(&self) -> &[AtomicPtr<Subheap>] {
        unsafe { std::slice::from_raw_parts(self.subheaps, self.cfg.max_threads) }
    }

    fn subheap(&self, slot: u32) -> &Subheap {
        let p = self.subheap_table()[slot as usize].load(Ordering::Acquire);
        debug_assert!(!p.is_null());
        unsafe { &*p }
    }

    fn lock_binder(&self) -> std::sync::MutexGuard<'_, Binder> {
        self.binder.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Pick a slot: recycled if available, else round-robin.
    fn take_slot(&self) -> u32 {
        let mut b = self.lock_binder();
        if b.free_len > 0 {
            b.free_len -= 1;
            unsafe { *self.bind_free.add(b.free_len as usize) }
        } else {
            let s = b.next;
            b.next = (b.next + 1) % self.cfg.max_threads as u32;
            s
        }
    }

    fn release_slot(&self, slot: u32) {
        let mut b = self.lock_binder();
        if (b.free_len as usize) < self.cfg.max_threads {
            unsafe { *self.bind_free.add(b.free_len as usize) = slot };
            b.free_len += 1;
        }
    }

    fn ensure_subheap(&self, slot: u32) {
        let entry = &self.subheap_table()[slot as usize];
        if !entry.load(Ordering::Acquire).is_null() {
            return;
        }
        let sh = match Subheap::create(&self.geom, self.page, slot) {
            Ok(p) => p,
            Err(_) => fatal("cannot map a subheap"),
        };
        if entry
            .compare_exchange(std::ptr::null_mut(), sh, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            // Lost an initialization race with a slot-sharing thread.
            unsafe { Subheap::destroy(sh) };
        }
    }

    fn teardown(g: *mut Global) {
        unsafe {
            {
                let r = &*g;
                for entry in r.subheap_table() {
                    let p = entry.load(Ordering::Acquire);
                    if !p.is_null() {
                        Subheap::destroy(p);
                    }
                }
                r.large.drain_unmap_all();
                os::unmap(r.heap_raw.0 as *mut u8, r.heap_raw.1);
                os::unmap(r.shadow_raw.0 as *mut u8, r.shadow_raw.1);
            }
            let len = (*g).globals_len;
            std::ptr::drop_in_place(g);
            os::unmap(g as *mut u8, len);
        }
    }
}

/// Lazily initialized global allocator handle.
fn global() -> &'static Global {
    let p = GLOBAL.load(Ordering::Acquire);
    if !p.is_null() {
        return unsafe { &*p };
    }
    init_slow(None)
}

#[cold]
fn init_slow(cfg: Option<AllocatorConfig>) -> &'static Global {
    let guard = INIT_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let p = GLOBAL.load(Ordering::Acquire);
    if !p.is_null() {
        return unsafe { &*p };
    }
    let cfg = cfg.unwrap_or_else(AllocatorConfig::from_env);
    match Global::build(cfg) {
        Ok(g) => {
            GLOBAL.store(g, Ordering::Release);
            drop(guard);
            unsafe { &*g }
        }
        Err(msg) => fatal(msg),
    }
}

/// Initialize with an explicit configuration. Fails if the allocator is
/// already live.
pub fn fg_init_with(cfg: AllocatorConfig) -> Result<(), &'static str> {
    let _guard = INIT_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    if !GLOBAL.load(Ordering::Acquire).is_null() {
        return Err("allocator already initialized");
    }
    let g = Global::build(cfg)?;
    GLOBAL.store(g, Ordering::Release);
    Ok(())
}

const UNBOUND: u32 = u32::MAX;

struct ThreadCtx {
    epoch: Cell<u32>,
    slot: Cell<u32>,
    rng0: Cell<u64>,
    rng1: Cell<u64>,
}

/// Returns the thread's slot to the free stack when the thread exits.
struct Recycler {
    slot: Cell<u32>,
    epoch: Cell<u32>,
}

impl Drop for Recycler {
    fn drop(&mut self) {
        let slot = self.slot.get();
        if slot == UNBOUND {
            return;
        }
        let p = GLOBAL.load(Ordering::Acquire);
        if p.is_null() || EPOCH.load(Ordering::Relaxed) != self.epoch.get() {
            return;
        }
        unsafe { &*p }.release_slot(slot);
    }
}

thread_local! {
    // Const-initialized and Drop-free: safe to touch from inside the
    // allocator without re-entering it.
    static CTX: ThreadCtx = const {
        ThreadCtx {
            epoch: Cell::new(0),
            slot: Cell::new(UNBOUND),
            rng0: Cell::new(0),
            rng1: Cell::new(0),
        }
    };
    // Separate slot so that registering its destructor (which may allocate
    // in libc) happens only after CTX is already bound.
    static RECYCLER: Recycler = const {
        Recycler {
            slot: Cell::new(UNBOUND),
            epoch: Cell::new(0),
        }
    };
}

fn ctx_rng_next(ctx: &ThreadCtx) -> u64 {
    let mut x = Xorshift128Plus::from_state(ctx.rng0.get(), ctx.rng1.get());
    let v = x.next_u64();
    let (a, b) = x.state();
    ctx.rng0.set(a);
    ctx.rng1.set(b);
    v
}

/// Bind the calling thread to a subheap slot (idempotent per epoch).
fn ensure_bound(g: &Global, ctx: &ThreadCtx) -> u32 {
    let ep = EPOCH.load(Ordering::Relaxed);
    let slot = ctx.slot.get();
    if slot != UNBOUND && ctx.epoch.get() == ep {
        return slot;
    }
    let slot = g.take_slot();
    g.ensure_subheap(slot);
    let x = Xorshift128Plus::from_seed(g.cfg.seed, slot as u64);
    let (a, b) = x.state();
    ctx.rng0.set(a);
    ctx.rng1.set(b);
    ctx.slot.set(slot);
    ctx.epoch.set(ep);
    let _ = RECYCLER.try_with(|r| {
        r.slot.set(slot);
        r.epoch.set(ep);
    });
    slot
}

fn violation(g: &Global, rep: SecurityReport) {
    g.gstats.violations[rep.kind.index()].fetch_add(1, Ordering::Relaxed);
    *g
        .gstats
        .last_report
        .lock()
        .unwrap_or_else(|e| e.into_inner()) = Some(rep);
    if g.cfg.abort_on_violation {
        report::emit_line(&rep);
        report::emit_backtrace();
        unsafe { libc::abort() }
    }
}

fn set_enomem() {
    unsafe {
        *libc::__errno_location() = libc::ENOMEM;
    }
}

/// Allocate; the bool reports whether the memory was recycled (and therefore
/// may hold stale bytes).
fn alloc_inner(g: &Global, size: usize) -> Result<(*mut u8, bool), OutOfMemory> {
    match size_class_for(size) {
        Some(class) => CTX
            .try_with(|ctx| {
                let slot = ensure_bound(g, ctx);
                let sub = g.subheap(slot);
                let r = ctx_rng_next(ctx);
                let (n, ovr) = choose_chain(r, g.cfg.override_weight_w);
                let n = g.cfg.force_chain.map_or(n, |c| c as usize);
                if ovr {
                    sub.stats
                        .overrides_taken
                        .fetch_add(1, Ordering::Relaxed);
                }
                sub.allocate(&g.geom, &g.cfg, g.page, class, n, ovr, &mut || {
                    ctx_rng_next(ctx)
                })
                .map(|(addr, from_list)| (addr as *mut u8, from_list))
            })
            .unwrap_or_else(|_| {
                // TLS already torn down (thread exit path): serve without
                // caching the binding.
                let slot = g.take_slot();
                g.ensure_subheap(slot);
                let sub = g.subheap(slot);
                let mut x = Xorshift128Plus::from_seed(g.cfg.seed ^ os::entropy_u64(), slot as u64);
                let r = x.next_u64();
                let (n, ovr) = choose_chain(r, g.cfg.override_weight_w);
                let out = sub.allocate(&g.geom, &g.cfg, g.page, class, n, ovr, &mut || {
                    x.next_u64()
                });
                g.release_slot(slot);
                out.map(|(addr, from_list)| (addr as *mut u8, from_list))
            }),
        None => g
            .large
            .allocate(size, &g.gstats)
            .map(|p| (p, false))
            .ok_or(OutOfMemory),
    }
}

/// Allocate `size` bytes, at least 16-byte aligned. Returns null and sets
/// `ENOMEM` on exhaustion.
pub fn fg_malloc(size: usize) -> *mut u8 {
    let g = global();
    match alloc_inner(g, size) {
        Ok((p, _)) => p,
        Err(OutOfMemory) => {
            set_enomem();
            std::ptr::null_mut()
        }
    }
}

/// Overflow-checked zeroed allocation.
pub fn fg_calloc(count: usize, size: usize) -> *mut u8 {
    let total = match count.checked_mul(size) {
        Some(t) => t,
        None => {
            set_enomem();
            return std::ptr::null_mut();
        }
    };
    let g = global();
    match alloc_inner(g, total) {
        Ok((p, recycled)) => {
            if recycled {
                // Fresh bump slots and fresh mappings are already zero.
                unsafe { std::ptr::write_bytes(p, 0, total) };
            }
            p
        }
        Err(OutOfMemory) => {
            set_enomem();
            std::ptr::null_mut()
        }
    }
}

/// Free a pointer obtained from this allocator. Null is a no-op. Hostile
/// values are classified and reported; with `abort_on_violation` set the
/// process terminates after emitting the report.
///
/// # Safety
/// `ptr` must not be used after this call returns.
pub unsafe fn fg_free(ptr: *mut u8) {
    if ptr.is_null() {
        return;
    }
    let g = global();
    let addr = ptr as usize;
    if g.geom.contains_small(addr) {
        let res = CTX
            .try_with(|ctx| {
                ensure_bound(g, ctx);
                small_free(&g.geom, g.page, &g.cfg, g.subheap_table(), &mut || {
                    ctx_rng_next(ctx)
                }, addr)
            })
            .unwrap_or_else(|_| {
                let mut x = Xorshift128Plus::from_seed(os::entropy_u64(), 0);
                small_free(&g.geom, g.page, &g.cfg, g.subheap_table(), &mut || {
                    x.next_u64()
                }, addr)
            });
        if let Err(rep) = res {
            violation(g, rep);
        }
        return;
    }
    match g.large.free(addr, &g.gstats) {
        LargeFreeOutcome::Freed => {}
        LargeFreeOutcome::UnknownLarge => violation(g, g.large.report_for(addr)),
        LargeFreeOutcome::NotLarge => violation(
            g,
            SecurityReport::new(ViolationKind::InvalidOutsideHeap, addr, ReportClass::Unknown),
        ),
    }
}

/// Resize an allocation. In-place when the new size fits the current slot or
/// mapping; otherwise allocate-copy-free. Violations on the old block are
/// classified exactly as in `fg_free`.
///
/// # Safety
/// `ptr` must be null or a value returned by this allocator that has not
/// been freed; on success the old pointer must not be used again.
pub unsafe fn fg_realloc(ptr: *mut u8, new_size: usize) -> *mut u8 {
    if ptr.is_null() {
        return fg_malloc(new_size);
    }
    let g = global();
    let addr = ptr as usize;
    if g.geom.contains_small(addr) {
        let loc = match classify_small(&g.geom, g.page, g.subheap_table(), addr) {
            Ok(l) => l,
            Err(rep) => {
                violation(g, rep);
                return std::ptr::null_mut();
            }
        };
        let capacity = class_size(loc.class) - 1;
        if new_size <= capacity {
            return ptr;
        }
        let fresh = fg_malloc(new_size);
        if fresh.is_null() {
            return std::ptr::null_mut();
        }
        std::ptr::copy_nonoverlapping(ptr, fresh, capacity.min(new_size));
        fg_free(ptr);
        return fresh;
    }
    if let Some(rec) = g.large.lookup(addr) {
        if new_size <= rec.mapped_len {
            return ptr;
        }
        let fresh = fg_malloc(new_size);
        if fresh.is_null() {
            return std::ptr::null_mut();
        }
        std::ptr::copy_nonoverlapping(ptr, fresh, rec.mapped_len.min(new_size));
        fg_free(ptr);
        return fresh;
    }
    let rep = match g.large.probe(addr) {
        LargeFreeOutcome::UnknownLarge => g.large.report_for(addr),
        _ => SecurityReport::new(ViolationKind::InvalidOutsideHeap, addr, ReportClass::Unknown),
    };
    violation(g, rep);
    std::ptr::null_mut()
}

/// Consistent snapshot of every counter.
pub fn fg_stats() -> StatsSnapshot {
    let g = global();
    let mut s = StatsSnapshot::default();
    for entry in g.subheap_table() {
        let p = entry.load(Ordering::Acquire);
        if !p.is_null() {
            crate::stats::accumulate(&mut s, unsafe { &(*p).stats });
        }
    }
    s.small_allocs = s.freelist_served + s.bump_served;
    s.large_allocs = g.gstats.large_allocs.load(Ordering::Relaxed);
    s.large_frees = g.gstats.large_frees.load(Ordering::Relaxed);
    for i in 0..6 {
        s.violations[i] = g.gstats.violations[i].load(Ordering::Relaxed);
    }
    s.mmap_calls = os::mmap_calls();
    s.munmap_calls = os::munmap_calls();
    s.mprotect_calls = os::mprotect_calls();
    s
}

/// The active run configuration (initializing the allocator if needed).
pub fn fg_config() -> AllocatorConfig {
    global().cfg.clone()
}

#[cfg(feature = "testing")]
mod testing_api {
    use super::*;

    /// Tear down the allocator and rebuild it with `cfg`. Every pointer from
    /// the previous instance becomes invalid.
    ///
    /// # Safety
    /// No other thread may be touching the allocator, and no allocation from
    /// the old instance may be used afterwards.
    pub unsafe fn fg_reset_for_tests(cfg: AllocatorConfig) -> Result<(), &'static str> {
        let _guard = INIT_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let old = GLOBAL.swap(std::ptr::null_mut(), Ordering::AcqRel);
        if !old.is_null() {
            Global::teardown(old);
        }
        os::reset_counters_for_tests();
        let g = Global::build(cfg)?;
        GLOBAL.store(g, Ordering::Release);
        EPOCH.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Most recent violation, clearing it.
    pub fn fg_take_last_report() -> Option<SecurityReport> {
        global()
            .gstats
            .last_report
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take()
    }

    /// Shadow-word view of a pointer: `Some(true)` live, `Some(false)` free,
    /// `None` outside the small region.
    pub fn fg_slot_is_live(ptr: *const u8) -> Option<bool> {
        let g = global();
        let loc = g.geom.decompose(ptr as usize)?;
        let w = crate::small::shadow_word(g.geom.shadow_for(loc));
        Some(w.load(Ordering::Acquire) == 1)
    }

    /// Freelist lengths of the calling thread's subheap for one class.
    /// Traversal asserts acyclicity.
    pub fn fg_freelist_lens(class: usize) -> [usize; 4] {
        let g = global();
        CTX.with(|ctx| {
            let slot = ensure_bound(g, ctx);
            let sub = g.subheap(slot);
            [0, 1, 2, 3].map(|n| sub.freelist_len(class, n))
        })
    }

    /// The slot index the calling thread is bound to.
    pub fn fg_thread_slot() -> u32 {
        let g = global();
        CTX.with(|ctx| ensure_bound(g, ctx))
    }
}

#[cfg(feature = "testing")]
pub use testing_api::*;
