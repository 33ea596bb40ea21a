//! Logical-byte allocation tracking for tensors.
//!
//! Every tensor allocation/release reports its byte count here; [`MemScope`]
//! captures the peak number of live bytes above the scope's entry baseline.
//! The bench harness measures attention-block memory through these counters
//! rather than process RSS, so the numbers reflect the algorithm and not the
//! allocator.
//!
//! State is thread-local: compute inside one benchmark or training run is
//! single-threaded, and parallel test threads must not see each other's
//! allocations.

use std::cell::RefCell;

struct ScopeFrame {
    tag: &'static str,
    baseline: usize,
    peak_above: usize,
}

struct Tracker {
    current: usize,
    scopes: Vec<ScopeFrame>,
}

thread_local! {
    static TRACKER: RefCell<Tracker> = RefCell::new(Tracker {
        current: 0,
        scopes: Vec::new(),
    });
}

/// Record `bytes` of new live tensor data.
pub fn tracked_alloc(bytes: usize) {
    TRACKER.with(|t| {
        let mut t = t.borrow_mut();
        t.current += bytes;
        let current = t.current;
        for frame in &mut t.scopes {
            let above = current.saturating_sub(frame.baseline);
            if above > frame.peak_above {
                frame.peak_above = above;
            }
        }
    });
}

/// Record `bytes` of tensor data released.
pub fn tracked_free(bytes: usize) {
    TRACKER.with(|t| {
        let mut t = t.borrow_mut();
        t.current = t.current.saturating_sub(bytes);
    });
}

/// Live tracked bytes on this thread.
pub fn current_bytes() -> usize {
    TRACKER.with(|t| t.borrow().current)
}

/// RAII scope measuring peak live bytes above the baseline at entry.
///
/// Scopes nest LIFO; each is tagged with the purpose of the region it
/// measures (e.g. `"attention-block"`).
pub struct MemScope {
    index: usize,
}

impl MemScope {
    pub fn enter(tag: &'static str) -> Self {
        let index = TRACKER.with(|t| {
            let mut t = t.borrow_mut();
            let baseline = t.current;
            t.scopes.push(ScopeFrame {
                tag,
                baseline,
                peak_above: 0,
            });
            t.scopes.len() - 1
        });
        MemScope { index }
    }

    /// Peak bytes allocated above this scope's entry baseline so far.
    pub fn peak_bytes(&self) -> usize {
        TRACKER.with(|t| t.borrow().scopes[self.index].peak_above)
    }

    pub fn tag(&self) -> &'static str {
        TRACKER.with(|t| t.borrow().scopes[self.index].tag)
    }
}

impl Drop for MemScope {
    fn drop(&mut self) {
        TRACKER.with(|t| {
            let mut t = t.borrow_mut();
            debug_assert_eq!(t.scopes.len() - 1, self.index, "MemScope dropped out of order");
            t.scopes.pop();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_tracks_peak_above_baseline() {
        tracked_alloc(100);
        let scope = MemScope::enter("test");
        tracked_alloc(50);
        tracked_alloc(30);
        tracked_free(80);
        assert_eq!(scope.peak_bytes(), 80);
        drop(scope);
        tracked_free(100);
    }

    #[test]
    fn nested_scopes_see_inner_allocations() {
        let outer = MemScope::enter("outer");
        tracked_alloc(10);
        {
            let inner = MemScope::enter("inner");
            tracked_alloc(25);
            assert_eq!(inner.peak_bytes(), 25);
            tracked_free(25);
        }
        assert_eq!(outer.peak_bytes(), 35);
        tracked_free(10);
    }
}
