use std::time::{Duration, Instant};

/// Monotonic millisecond time source.
pub trait Clock {
    /// Milliseconds since the clock's origin. Never decreases.
    fn now_ms(&self) -> u64;

    /// Returns once `now_ms() >= t_ms`.
    fn sleep_until(&mut self, t_ms: u64);

    /// Called by the scheduler after every sink send. Simulated clocks
    /// charge per-event processing cost here; real clocks do nothing.
    fn after_send(&mut self) {}
}

impl<C: Clock + ?Sized> Clock for &mut C {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }

    fn sleep_until(&mut self, t_ms: u64) {
        (**self).sleep_until(t_ms)
    }

    fn after_send(&mut self) {
        (**self).after_send()
    }
}

/// Wall-adjustment-immune clock backed by [`Instant`].
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn sleep_until(&mut self, t_ms: u64) {
        let target = self.origin + Duration::from_millis(t_ms);
        loop {
            let now = Instant::now();
            if now >= target {
                return;
            }
            std::thread::sleep(target - now);
        }
    }
}

/// Deterministic simulated clock.
///
/// Time only moves when slept or charged: each send adds
/// `per_event_overhead_ms`, and injected stalls add extra time whenever an
/// advance crosses their instant.
#[derive(Debug, Clone, Default)]
pub struct FakeClock {
    current: u64,
    per_event_overhead_ms: u64,
    /// (instant, extra ms), ascending; consumed once crossed.
    stalls: Vec<(u64, u64)>,
}

impl FakeClock {
    pub fn new(per_event_overhead_ms: u64) -> Self {
        Self { current: 0, per_event_overhead_ms, stalls: Vec::new() }
    }

    /// Adds a one-shot stall of `extra_ms` the first time time advances past `at_ms`.
    pub fn with_stall(mut self, at_ms: u64, extra_ms: u64) -> Self {
        self.stalls.push((at_ms, extra_ms));
        self.stalls.sort_unstable();
        self
    }

    pub fn per_event_overhead_ms(&self) -> u64 {
        self.per_event_overhead_ms
    }

    fn advance_to(&mut self, target: u64) {
        if target <= self.current {
            return;
        }
        let mut extra = 0;
        while let Some(&(at, stall)) = self.stalls.first() {
            if at > target {
                break;
            }
            if at > self.current {
                extra += stall;
            }
            self.stalls.remove(0);
        }
        self.current = target + extra;
    }
}

impl Clock for FakeClock {
    fn now_ms(&self) -> u64 {
        self.current
    }

    fn sleep_until(&mut self, t_ms: u64) {
        self.advance_to(t_ms);
    }

    fn after_send(&mut self) {
        let target = self.current + self.per_event_overhead_ms;
        self.advance_to(target);
    }
}
