use std::time::Duration;

use rand::Rng;

use super::{BackendConfig, BackendError};

/// Exponential backoff with up to 50% additive jitter: `base * 2^attempt`,
/// capped at 30 s before jitter.
pub fn backoff_delay(base_ms: u64, attempt: u32, jitter: f64) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << attempt.min(20)).min(30_000);
    let jitter = jitter.clamp(0.0, 1.0) * 0.5 * exp as f64;
    Duration::from_millis(exp + jitter as u64)
}

/// Calls `op` until it succeeds, fails permanently, or `max_retries + 1`
/// attempts have been spent. Returns the outcome and the attempt count.
pub(crate) fn with_retries<F>(cfg: &BackendConfig, mut op: F) -> (Result<String, BackendError>, u32)
where
    F: FnMut(u32) -> Result<String, BackendError>,
{
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op(attempt) {
            Ok(v) => return (Ok(v), attempt),
            Err(e) if e.is_retryable() && attempt <= cfg.max_retries => {
                let delay = backoff_delay(cfg.backoff_base_ms, attempt - 1, rand::rng().random());
                log::debug!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
            }
            Err(BackendError::Transport {
                message,
                retryable: true,
            }) => {
                return (
                    Err(BackendError::RetriesExhausted {
                        message,
                        attempts: attempt,
                    }),
                    attempt,
                )
            }
            Err(e) => return (Err(e), attempt),
        }
    }
}
