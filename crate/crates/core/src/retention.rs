//! Counts how many classifier parameter sets are alive at once.
//!
//! A [`RetentionProbe`] is installed on a thread; every
//! [`ClassifierParams`](crate::classifier::ClassifierParams) created (or
//! cloned) on that thread while it is installed registers with the probe
//! until dropped, wherever the drop happens.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
}

#[derive(Debug, Clone, Default)]
pub struct RetentionProbe {
    counters: Arc<Counters>,
}

thread_local! {
    static ACTIVE: RefCell<Option<Arc<Counters>>> = const { RefCell::new(None) };
}

impl RetentionProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes this probe the active one on the current thread until the guard drops.
    pub fn install(&self) -> ProbeGuard {
        let previous = ACTIVE.with(|a| a.replace(Some(self.counters.clone())));
        ProbeGuard { previous }
    }

    /// The probe installed on the current thread, if any.
    pub fn active() -> Option<RetentionProbe> {
        ACTIVE.with(|a| {
            a.borrow()
                .clone()
                .map(|counters| RetentionProbe { counters })
        })
    }

    pub fn live(&self) -> usize {
        self.counters.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.counters.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.counters.peak.store(self.live(), Ordering::SeqCst);
    }
}

pub struct ProbeGuard {
    previous: Option<Arc<Counters>>,
}

impl Drop for ProbeGuard {
    fn drop(&mut self) {
        let previous = self.previous.take();
        ACTIVE.with(|a| *a.borrow_mut() = previous);
    }
}

/// Registration held by each parameter set.
#[derive(Debug)]
pub(crate) struct LiveToken(Option<Arc<Counters>>);

impl Default for LiveToken {
    fn default() -> Self {
        let counters = ACTIVE.with(|a| a.borrow().clone());
        if let Some(c) = &counters {
            let now = c.live.fetch_add(1, Ordering::SeqCst) + 1;
            c.peak.fetch_max(now, Ordering::SeqCst);
        }
        LiveToken(counters)
    }
}

impl Clone for LiveToken {
    fn clone(&self) -> Self {
        LiveToken::default()
    }
}

impl PartialEq for LiveToken {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Drop for LiveToken {
    fn drop(&mut self) {
        if let Some(c) = &self.0 {
            c.live.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_live_and_peak() {
        let probe = RetentionProbe::new();
        let untracked = LiveToken::default();
        {
            let _g = probe.install();
            let a = LiveToken::default();
            let b = a.clone();
            assert_eq!(probe.live(), 2);
            drop(a);
            let c = LiveToken::default();
            assert_eq!(probe.live(), 2);
            drop((b, c));
        }
        let after = LiveToken::default();
        assert_eq!(probe.live(), 0);
        assert_eq!(probe.peak(), 2);
        assert!(RetentionProbe::active().is_none());
        drop((untracked, after));
    }

    #[test]
    fn cross_thread_drop_is_counted() {
        let probe = RetentionProbe::new();
        let _g = probe.install();
        let t = LiveToken::default();
        std::thread::spawn(move || drop(t)).join().unwrap();
        assert_eq!(probe.live(), 0);
    }
}
