//! Allocation accounting for tensor buffers.
//!
//! Every buffer created by the engine (op outputs, saved activations,
//! gradient buffers, kernel scratch) reports its size here. An
//! [`AllocProbe`] observes the live byte count while it is open, records
//! the peak above its starting point and, optionally, the shape of every
//! buffer allocated in the meantime. Counters are thread-local; buffers
//! are only created on the thread driving the tape.

use std::cell::RefCell;
use std::marker::PhantomData;

#[derive(Debug, Default)]
struct ProbeState {
    id: u64,
    baseline: i64,
    peak: i64,
    allocated: u64,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Default)]
struct Tracker {
    live: i64,
    next_id: u64,
    probes: Vec<ProbeState>,
}

thread_local! {
    static TRACKER: RefCell<Tracker> = RefCell::new(Tracker::default());
}

pub(crate) fn record_alloc(bytes: usize, shape: &[usize]) {
    TRACKER.with(|t| {
        let mut t = t.borrow_mut();
        t.live += bytes as i64;
        let live = t.live;
        for p in t.probes.iter_mut() {
            p.peak = p.peak.max(live);
            p.allocated += bytes as u64;
            p.shapes.push(shape.to_vec());
        }
    });
}

pub(crate) fn record_free(bytes: usize) {
    // try_with: buffers may be dropped during thread teardown.
    let _ = TRACKER.try_with(|t| {
        if let Ok(mut t) = t.try_borrow_mut() {
            t.live -= bytes as i64;
        }
    });
}

/// Bytes currently held by engine buffers on this thread.
pub fn live_bytes() -> i64 {
    TRACKER.with(|t| t.borrow().live)
}

/// Summary of what happened while a probe was open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocReport {
    /// Highest live byte count above the starting point.
    pub peak_bytes: u64,
    /// Live bytes above the starting point when the probe closed.
    pub retained_bytes: i64,
    /// Sum of all allocation sizes (ignores frees).
    pub total_allocated: u64,
    /// Shape of every buffer allocated, in allocation order.
    pub shapes: Vec<Vec<usize>>,
}

impl AllocReport {
    /// True when some buffer had `dim` as one of its dimensions.
    pub fn saw_dim(&self, dim: usize) -> bool {
        self.shapes.iter().any(|s| s.contains(&dim))
    }

    /// Largest single dimension of any allocated buffer.
    pub fn max_dim(&self) -> usize {
        self.shapes.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Scoped observer of engine allocations. Probes nest.
#[derive(Debug)]
pub struct AllocProbe {
    id: u64,
    // thread-local state: keep the probe on its thread
    _not_send: PhantomData<*const ()>,
}

impl AllocProbe {
    pub fn start() -> Self {
        let id = TRACKER.with(|t| {
            let mut t = t.borrow_mut();
            let id = t.next_id;
            t.next_id += 1;
            let live = t.live;
            t.probes.push(ProbeState { id, baseline: live, peak: live, ..Default::default() });
            id
        });
        AllocProbe { id, _not_send: PhantomData }
    }

    fn with_state<R>(&self, f: impl FnOnce(&ProbeState, i64) -> R) -> R {
        TRACKER.with(|t| {
            let t = t.borrow();
            let p = t.probes.iter().find(|p| p.id == self.id).expect("probe registered");
            f(p, t.live)
        })
    }

    /// Peak so far, relative to the start.
    pub fn peak_bytes(&self) -> u64 {
        self.with_state(|p, _| (p.peak - p.baseline).max(0) as u64)
    }

    /// Live bytes relative to the start (what is currently retained).
    pub fn retained_bytes(&self) -> i64 {
        self.with_state(|p, live| live - p.baseline)
    }

    pub fn finish(self) -> AllocReport {
        let state = TRACKER.with(|t| {
            let mut t = t.borrow_mut();
            let live = t.live;
            let idx = t.probes.iter().position(|p| p.id == self.id).expect("probe registered");
            let p = t.probes.remove(idx);
            (p, live)
        });
        std::mem::forget(self);
        let (p, live) = state;
        AllocReport {
            peak_bytes: (p.peak - p.baseline).max(0) as u64,
            retained_bytes: live - p.baseline,
            total_allocated: p.allocated,
            shapes: p.shapes,
        }
    }
}

impl Drop for AllocProbe {
    fn drop(&mut self) {
        let id = self.id;
        let _ = TRACKER.try_with(|t| {
            if let Ok(mut t) = t.try_borrow_mut() {
                t.probes.retain(|p| p.id != id);
            }
        });
    }
}
