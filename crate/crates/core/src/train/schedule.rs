use std::f64::consts::PI;

/// Linear warm-up to `peak` over `warmup` epochs, then cosine annealing to
/// zero at `epochs`.
pub fn lr_at(epoch: usize, peak: f64, warmup: usize, epochs: usize) -> f64 {
    if epoch < warmup {
        return (epoch + 1) as f64 / warmup as f64 * peak;
    }
    let span = epochs.saturating_sub(warmup).max(1) as f64;
    let t = ((epoch - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (PI * t).cos())
}
