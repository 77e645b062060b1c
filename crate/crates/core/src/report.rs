//! Violation classification and diagnostic output.
//!
//! Reports are emitted on standard error as a single machine-parseable line:
//!
//! ```text
//! FG-VIOLATION kind=<tag> addr=<hex> class=<n|large|->
//! ```
//!
//! followed by best-effort call-stack lines prefixed with two spaces. The
//! line itself is formatted into a stack buffer and written with one raw
//! `write` call, so emitting a report never allocates.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    DoubleFree,
    InvalidOutsideHeap,
    InvalidUnaligned,
    InvalidNeverAllocated,
    InvalidUnknownLarge,
    OverflowDetected,
}

pub const VIOLATION_KINDS: [ViolationKind; 6] = [
    ViolationKind::DoubleFree,
    ViolationKind::InvalidOutsideHeap,
    ViolationKind::InvalidUnaligned,
    ViolationKind::InvalidNeverAllocated,
    ViolationKind::InvalidUnknownLarge,
    ViolationKind::OverflowDetected,
];

impl ViolationKind {
    pub fn tag(self) -> &'static str {
        match self {
            ViolationKind::DoubleFree => "DoubleFree",
            ViolationKind::InvalidOutsideHeap => "InvalidFree/OutsideHeap",
            ViolationKind::InvalidUnaligned => "InvalidFree/Unaligned",
            ViolationKind::InvalidNeverAllocated => "InvalidFree/NeverAllocated",
            ViolationKind::InvalidUnknownLarge => "InvalidFree/UnknownLarge",
            ViolationKind::OverflowDetected => "OverflowDetected",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        VIOLATION_KINDS.iter().copied().find(|k| k.tag() == tag)
    }

    /// Dense index for per-kind counters.
    pub fn index(self) -> usize {
        match self {
            ViolationKind::DoubleFree => 0,
            ViolationKind::InvalidOutsideHeap => 1,
            ViolationKind::InvalidUnaligned => 2,
            ViolationKind::InvalidNeverAllocated => 3,
            ViolationKind::InvalidUnknownLarge => 4,
            ViolationKind::OverflowDetected => 5,
        }
    }
}

/// Which part of the heap the offending address belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportClass {
    Small(usize),
    Large,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecurityReport {
    pub kind: ViolationKind,
    /// The address the violation was detected at. For overflows this is the
    /// corrupted slot (which may be a neighbor of the slot being freed).
    pub addr: usize,
    pub class: ReportClass,
    pub diagnosis: &'static str,
}

impl SecurityReport {
    pub fn new(kind: ViolationKind, addr: usize, class: ReportClass) -> Self {
        let diagnosis = match kind {
            ViolationKind::DoubleFree => "object freed twice without intervening reuse",
            ViolationKind::InvalidOutsideHeap => "freed pointer lies outside any managed region",
            ViolationKind::InvalidUnaligned => "freed pointer is not aligned to its size class",
            ViolationKind::InvalidNeverAllocated => "freed pointer was never returned by an allocation",
            ViolationKind::InvalidUnknownLarge => "freed pointer is not a live large-object base",
            ViolationKind::OverflowDetected => "canary corrupted: write past the end of an object",
        };
        SecurityReport {
            kind,
            addr,
            class,
            diagnosis,
        }
    }
}

/// Fixed-capacity formatter so the emit path does not allocate.
struct StackBuf<const N: usize> {
    buf: [u8; N],
    len: usize,
}

impl<const N: usize> StackBuf<N> {
    fn new() -> Self {
        StackBuf { buf: [0; N], len: 0 }
    }

    fn as_bytes(&self) -> &[u8] {
        &self.buf[..self.len]
    }
}

impl<const N: usize> std::fmt::Write for StackBuf<N> {
    fn write_str(&mut self, s: &str) -> std::fmt::Result {
        let avail = N - self.len;
        let take = s.len().min(avail);
        self.buf[self.len..self.len + take].copy_from_slice(&s.as_bytes()[..take]);
        self.len += take;
        Ok(())
    }
}

fn write_stderr(bytes: &[u8]) {
    unsafe {
        libc::write(2, bytes.as_ptr() as *const libc::c_void, bytes.len());
    }
}

/// Emit the single parseable violation line.
pub fn emit_line(report: &SecurityReport) {
    let mut out = StackBuf::<256>::new();
    let _ = write!(
        out,
        "FG-VIOLATION kind={} addr={:#x} class=",
        report.kind.tag(),
        report.addr
    );
    match report.class {
        ReportClass::Small(c) => {
            let _ = write!(out, "{c}");
        }
        ReportClass::Large => {
            let _ = out.write_str("large");
        }
        ReportClass::Unknown => {
            let _ = out.write_str("-");
        }
    }
    let _ = write!(out, "\n  diagnosis: {}\n", report.diagnosis);
    write_stderr(out.as_bytes());
}

/// Best-effort call-stack lines. Capturing may allocate, so it runs only
/// after the parseable line is already out and only on the abort path.
pub fn emit_backtrace() {
    let bt = std::backtrace::Backtrace::force_capture();
    let text = format!("{bt}");
    let mut lines = 0;
    for line in text.lines() {
        if lines >= 16 {
            break;
        }
        let mut out = StackBuf::<512>::new();
        let _ = write!(out, "  {}\n", line.trim_start());
        write_stderr(out.as_bytes());
        lines += 1;
    }
}
