use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::http::CallError;

/// Bounded exponential backoff: attempt `n` (0-based) is followed by a
/// sleep of `min(base * 2^n, max)` before the next one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RetryOutcome {
    /// The last error was not worth retrying.
    Permanent(CallError),
    /// Every attempt failed with a retriable error.
    Exhausted { attempts: u32, last: CallError },
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }

    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, CallError>,
    ) -> Result<T, RetryOutcome> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(value) => return Ok(value),
                Err(err) if !err.is_retriable() => return Err(RetryOutcome::Permanent(err)),
                Err(err) => {
                    attempt += 1;
                    if attempt >= attempts {
                        return Err(RetryOutcome::Exhausted {
                            attempts,
                            last: err,
                        });
                    }
                    tracing::warn!(attempt, max = attempts, error = %err, "retrying");
                    let delay = self.delay_after(attempt - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
            }
        }
    }
}

/// Counting semaphore capping in-flight requests to one service.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("limit lock poisoned");
        while *active >= self.max {
            active = self.freed.wait(active).expect("limit lock poisoned");
        }
        *active += 1;
        InFlightGuard { limit: self }
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.limit.active.lock().expect("limit lock poisoned");
        *active -= 1;
        self.limit.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn backoff_is_bounded() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        let delays: Vec<u64> = (0..6)
            .map(|a| p.delay_after(a).as_millis() as u64)
            .collect();
        assert_eq!(delays, [100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.delay_after(200).as_millis(), 1000);
    }

    #[test]
    fn retriable_errors_surface_after_max_attempts() {
        let calls = AtomicUsize::new(0);
        let out: Result<(), _> = RetryPolicy::no_delay(5).run(|_| {
            calls.fetch_add(1, Ordering::Relaxed);
            Err(CallError::Transport("down".into()))
        });
        assert_eq!(calls.load(Ordering::Relaxed), 5);
        assert!(matches!(
            out,
            Err(RetryOutcome::Exhausted { attempts: 5, .. })
        ));
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let calls = AtomicUsize::new(0);
        let out: Result<(), _> = RetryPolicy::no_delay(5).run(|_| {
            calls.fetch_add(1, Ordering::Relaxed);
            Err(CallError::Status {
                status: 400,
                body: "bad".into(),
            })
        });
        assert_eq!(calls.load(Ordering::Relaxed), 1);
        assert!(matches!(out, Err(RetryOutcome::Permanent(_))));
    }

    #[test]
    fn recovers_before_limit() {
        let out = RetryPolicy::no_delay(5).run(|attempt| {
            if attempt < 3 {
                Err(CallError::Status {
                    status: 503,
                    body: String::new(),
                })
            } else {
                Ok(attempt)
            }
        });
        assert_eq!(out, Ok(3));
    }

    #[test]
    fn limit_caps_concurrency() {
        let limit = InFlightLimit::new(3);
        let current = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| {
                    let _g = limit.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }
}
