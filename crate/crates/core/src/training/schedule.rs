/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then constant.
pub fn lr_schedule(step: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_then_flat() {
        assert_eq!(lr_schedule(0, 10, 3e-5), 0.0);
        assert_eq!(lr_schedule(5, 10, 2.0), 1.0);
        assert_eq!(lr_schedule(10, 10, 3e-5), 3e-5);
        assert_eq!(lr_schedule(1000, 10, 3e-5), 3e-5);
        assert_eq!(lr_schedule(0, 0, 0.5), 0.5);
    }

    #[test]
    fn monotone_during_warmup() {
        let lrs: Vec<f64> = (0..=50).map(|s| lr_schedule(s, 50, 1e-3)).collect();
        assert!(lrs.windows(2).all(|w| w[0] < w[1]));
    }
}
