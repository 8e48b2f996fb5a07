use std::f64::consts::PI;

use super::Schedule;

/// Learning rate at `step` (0-based) of `total_steps`.
///
/// During warmup `lr = lr_max · step / warmup_steps`; afterwards the decay is
/// taken over the remaining `total_steps − warmup_steps` steps.
pub fn schedule_lr(schedule: Schedule, step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64) -> f64 {
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    match schedule {
        Schedule::Constant => lr_max,
        Schedule::CosineWarmup => lr_max * 0.5 * (1.0 + (PI * progress).cos()),
        Schedule::LinearWarmupDecay => lr_max * (1.0 - progress),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        for s in [Schedule::Constant, Schedule::CosineWarmup, Schedule::LinearWarmupDecay] {
            assert_eq!(schedule_lr(s, 0, 100, 10, 0.5), 0.0);
            assert_eq!(schedule_lr(s, 10, 100, 10, 0.5), 0.5);
            assert_eq!(schedule_lr(s, 5, 100, 10, 0.5), 0.25);
        }
    }

    #[test]
    fn cosine_midpoint_is_half() {
        let lr = schedule_lr(Schedule::CosineWarmup, 55, 100, 10, 0.3);
        assert!((lr - 0.15).abs() <= 1e-12);
        assert!(schedule_lr(Schedule::CosineWarmup, 100, 100, 10, 0.3).abs() <= 1e-15);
    }

    #[test]
    fn linear_decay_closed_form() {
        let lr = schedule_lr(Schedule::LinearWarmupDecay, 40, 100, 10, 1.0);
        assert!((lr - (1.0 - 30.0 / 90.0)).abs() <= 1e-15);
        assert_eq!(schedule_lr(Schedule::LinearWarmupDecay, 100, 100, 10, 1.0), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(schedule_lr(Schedule::CosineWarmup, 0, 10, 0, 2.0), 2.0);
    }
}
