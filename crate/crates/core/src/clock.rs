//! Per-run monotonic clock shared by every in-process component, so that
//! publisher and subscriber timestamps are directly comparable.

use std::time::Duration;

use tokio::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    origin: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        Self { origin: Instant::now() }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    /// Microseconds since the run started.
    pub fn now_us(&self) -> u64 {
        self.since(Instant::now())
    }

    pub fn since(&self, t: Instant) -> u64 {
        t.saturating_duration_since(self.origin).as_micros() as u64
    }

    pub fn at_us(&self, us: u64) -> Instant {
        self.origin + Duration::from_micros(us)
    }
}

impl Default for RunClock {
    fn default() -> Self {
        Self::start()
    }
}
