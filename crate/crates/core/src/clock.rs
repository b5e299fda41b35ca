//! Process-wide monotonic clock shared by the pool, runtime and event log.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

static EPOCH: OnceLock<Instant> = OnceLock::new();

/// The instant all millisecond timestamps are measured from.
pub fn epoch() -> Instant {
    *EPOCH.get_or_init(Instant::now)
}

/// Milliseconds elapsed since [`epoch`].
pub fn now_ms() -> f64 {
    to_ms(Instant::now())
}

pub fn to_ms(at: Instant) -> f64 {
    at.saturating_duration_since(epoch()).as_secs_f64() * 1e3
}

pub fn from_ms(ms: f64) -> Instant {
    epoch() + Duration::from_secs_f64(ms.max(0.0) / 1e3)
}
