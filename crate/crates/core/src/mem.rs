//! Explicit allocation accounting.
//!
//! Kernels report the logical buffers they create to the ledger of the
//! current thread's recording session (see [`session`]). Outside a session
//! the calls are no-ops. Bytes are counted per logical buffer, without
//! allocator padding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};

/// Tag of vocabulary-sized logits buffers (full or chunked).
pub const TAG_LOGITS: &str = "logits";
/// Tag of softmax probability buffers materialized by unfused paths.
pub const TAG_PROBS: &str = "probs";
/// Tag of kernel outputs (activations and gradients).
pub const TAG_OUTPUT: &str = "output";
/// Tag of cached residuals kept for the backward pass.
pub const TAG_RESIDUAL: &str = "residual";
/// Tag of intermediates materialized by unfused paths.
pub const TAG_INTERMEDIATE: &str = "intermediate";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocKind {
    Alloc,
    Free,
}

impl fmt::Display for AllocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocKind::Alloc => "alloc",
            AllocKind::Free => "free",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocEvent {
    pub tag: String,
    pub bytes: u64,
    pub kind: AllocKind,
    /// Running total after this event.
    pub current: u64,
    /// High-water mark after this event.
    pub peak: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AllocationLedger {
    current_bytes: u64,
    peak_bytes: u64,
    events: Vec<AllocEvent>,
    outstanding: HashMap<String, Vec<u64>>,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tag: &str, bytes: u64, kind: AllocKind) -> Result<()> {
        match kind {
            AllocKind::Alloc => {
                self.outstanding.entry(tag.to_owned()).or_default().push(bytes);
                self.current_bytes += bytes;
                self.peak_bytes = self.peak_bytes.max(self.current_bytes);
            }
            AllocKind::Free => {
                let live = self.outstanding.get_mut(tag);
                let pos = live.as_ref().and_then(|v| v.iter().rposition(|&b| b == bytes));
                match (live, pos) {
                    (Some(v), Some(p)) => {
                        v.swap_remove(p);
                    }
                    _ => return Err(Error::UnbalancedFree { tag: tag.to_owned(), bytes }),
                }
                self.current_bytes -= bytes;
            }
        }
        self.events.push(AllocEvent {
            tag: tag.to_owned(),
            bytes,
            kind,
            current: self.current_bytes,
            peak: self.peak_bytes,
        });
        Ok(())
    }

    pub fn current_bytes(&self) -> u64 {
        self.current_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn events(&self) -> &[AllocEvent] {
        &self.events
    }

    /// Peak of live bytes counting only events under `tag`.
    pub fn peak_for_tag(&self, tag: &str) -> u64 {
        let (mut cur, mut peak) = (0u64, 0u64);
        for e in self.events.iter().filter(|e| e.tag == tag) {
            match e.kind {
                AllocKind::Alloc => {
                    cur += e.bytes;
                    peak = peak.max(cur);
                }
                AllocKind::Free => cur -= e.bytes,
            }
        }
        peak
    }

    pub fn alloc_count(&self, tag: &str) -> usize {
        self.events.iter().filter(|e| e.tag == tag && e.kind == AllocKind::Alloc).count()
    }

    /// Dump as CSV: `tag,bytes,kind,current,peak`, one row per event.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(["tag", "bytes", "kind", "current", "peak"]).map_err(io)?;
        for e in &self.events {
            out.write_record([
                e.tag.clone(),
                e.bytes.to_string(),
                e.kind.to_string(),
                e.current.to_string(),
                e.peak.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Total bytes of a `B × T × V` logits tensor.
pub fn logits_bytes(batch: u64, seq: u64, vocab: u64, byte_width: u64) -> u64 {
    batch * seq * vocab * byte_width
}

thread_local! {
    static ACTIVE: RefCell<Option<AllocationLedger>> = const { RefCell::new(None) };
}

/// Run `f` with a fresh ledger collecting this thread's tracked buffers.
///
/// Sessions nest: the outer ledger is restored (without the inner events)
/// when the inner session ends.
pub fn session<R>(f: impl FnOnce() -> R) -> (R, AllocationLedger) {
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(AllocationLedger::new()));
    let out = f();
    let ledger = ACTIVE.with(|a| std::mem::replace(&mut *a.borrow_mut(), outer)).unwrap_or_default();
    (out, ledger)
}

fn with_active(f: impl FnOnce(&mut AllocationLedger)) {
    ACTIVE.with(|a| {
        if let Some(ledger) = a.borrow_mut().as_mut() {
            f(ledger);
        }
    });
}

/// Record a buffer that outlives the call (an output handed to the caller).
pub fn retain(tag: &'static str, bytes: u64) {
    with_active(|l| {
        let _ = l.record(tag, bytes, AllocKind::Alloc);
    });
}

/// Record a buffer whose lifetime ends when the returned guard drops.
#[must_use = "the allocation is freed when the guard drops"]
pub fn scoped(tag: &'static str, bytes: u64) -> ScopedAlloc {
    retain(tag, bytes);
    ScopedAlloc { tag, bytes }
}

#[derive(Debug)]
pub struct ScopedAlloc {
    tag: &'static str,
    bytes: u64,
}

impl Drop for ScopedAlloc {
    fn drop(&mut self) {
        // A session may have ended (or a new one started) while the guard was
        // alive; an unmatched free is then simply not ours to record.
        with_active(|l| {
            let _ = l.record(self.tag, self.bytes, AllocKind::Free);
        });
    }
}
