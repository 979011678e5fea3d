use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Exponential backoff with jitter. `max_attempts` counts every call,
/// including the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    /// Relative spread applied to each delay, e.g. 0.2 for ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 1000, factor: 2.0, jitter: 0.2 }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, factor: 1.0, jitter: 0.0 }
    }

    /// Nominal wait before attempt `attempt + 1` (0-based), without jitter.
    pub fn nominal_delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(attempt as i32);
        Duration::from_secs_f64(ms.max(0.0) / 1000.0)
    }

    fn delay(&self, attempt: u32) -> Duration {
        let base = self.nominal_delay(attempt);
        if self.jitter <= 0.0 || base.is_zero() {
            return base;
        }
        let spread = rand::thread_rng().gen_range(-self.jitter..=self.jitter);
        base.mul_f64((1.0 + spread).max(0.0))
    }

    /// Calls `op` until it succeeds, fails with a non-transient error, or the
    /// attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt + 1 < attempts => {
                    log::debug!("attempt {} failed: {e}; retrying", attempt + 1);
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
