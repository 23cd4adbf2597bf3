use std::f64::consts::PI;

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to 0
/// at `total`. Steps past `total` stay at 0.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step < total { base } else { 0.0 };
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}
