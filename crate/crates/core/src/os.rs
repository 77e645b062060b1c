//! Thin wrappers over the platform's virtual-memory interface.
//!
//! Every map/unmap/protect call the allocator issues goes through here so the
//! harness can read exact syscall counts. Nothing in this module allocates
//! from the Rust heap; these paths must stay safe to call from inside the
//! allocator itself.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

static MMAP_CALLS: AtomicU64 = AtomicU64::new(0);
static MUNMAP_CALLS: AtomicU64 = AtomicU64::new(0);
static MPROTECT_CALLS: AtomicU64 = AtomicU64::new(0);

static PAGE_SIZE: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapFailed;

pub fn page_size() -> usize {
    let cached = PAGE_SIZE.load(Ordering::Relaxed);
    if cached != 0 {
        return cached;
    }
    let sz = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as usize;
    let sz = if sz == 0 { 4096 } else { sz };
    PAGE_SIZE.store(sz, Ordering::Relaxed);
    sz
}

/// Reserve `len` bytes of private anonymous address space without committing
/// physical memory. Pages materialize (zeroed) on first touch.
pub fn reserve(len: usize) -> Result<*mut u8, MapFailed> {
    MMAP_CALLS.fetch_add(1, Ordering::Relaxed);
    let p = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
            -1,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        Err(MapFailed)
    } else {
        Ok(p as *mut u8)
    }
}

/// Map `len` bytes of committed, zero-filled memory (large objects, internal
/// metadata blocks).
pub fn map_rw(len: usize) -> Result<*mut u8, MapFailed> {
    MMAP_CALLS.fetch_add(1, Ordering::Relaxed);
    let p = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        Err(MapFailed)
    } else {
        Ok(p as *mut u8)
    }
}

pub fn unmap(ptr: *mut u8, len: usize) {
    MUNMAP_CALLS.fetch_add(1, Ordering::Relaxed);
    unsafe {
        libc::munmap(ptr as *mut libc::c_void, len);
    }
}

/// Revoke all access to a range, turning it into a guard region.
pub fn protect_none(ptr: *mut u8, len: usize) -> Result<(), MapFailed> {
    MPROTECT_CALLS.fetch_add(1, Ordering::Relaxed);
    let rc = unsafe { libc::mprotect(ptr as *mut libc::c_void, len, libc::PROT_NONE) };
    if rc == 0 {
        Ok(())
    } else {
        Err(MapFailed)
    }
}

pub fn mmap_calls() -> u64 {
    MMAP_CALLS.load(Ordering::Relaxed)
}

pub fn munmap_calls() -> u64 {
    MUNMAP_CALLS.load(Ordering::Relaxed)
}

pub fn mprotect_calls() -> u64 {
    MPROTECT_CALLS.load(Ordering::Relaxed)
}

#[cfg(feature = "testing")]
pub fn reset_counters_for_tests() {
    MMAP_CALLS.store(0, Ordering::Relaxed);
    MUNMAP_CALLS.store(0, Ordering::Relaxed);
    MPROTECT_CALLS.store(0, Ordering::Relaxed);
}

/// Read an environment variable without allocating (safe to call during
/// allocator initialization, where the Rust heap may not be usable yet).
pub fn getenv_u64(name: &'static str) -> Option<u64> {
    debug_assert!(name.ends_with('\0'));
    let p = unsafe { libc::getenv(name.as_ptr() as *const libc::c_char) };
    if p.is_null() {
        return None;
    }
    let mut val: u64 = 0;
    let mut any = false;
    let mut i = 0;
    loop {
        let c = unsafe { *p.add(i) } as u8;
        if c == 0 {
            break;
        }
        if !c.is_ascii_digit() {
            return None;
        }
        val = val.checked_mul(10)?.checked_add((c - b'0') as u64)?;
        any = true;
        i += 1;
    }
    if any {
        Some(val)
    } else {
        None
    }
}

/// 64 bits of OS entropy, with a clock/pid fallback if the entropy source is
/// unavailable.
pub fn entropy_u64() -> u64 {
    let mut buf = [0u8; 8];
    let got = unsafe { libc::getrandom(buf.as_mut_ptr() as *mut libc::c_void, 8, 0) };
    if got == 8 {
        return u64::from_le_bytes(buf);
    }
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    unsafe {
        libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts);
    }
    let pid = unsafe { libc::getpid() } as u64;
    (ts.tv_nsec as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(ts.tv_sec as u64)
        .rotate_left(17)
        ^ (pid << 32)
}
