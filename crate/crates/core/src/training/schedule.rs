/// Stage-one polynomial schedule: linear warmup to `lr`, then
/// `lr * (1 - progress)^power` until `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySchedule {
    pub lr: f64,
    pub power: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for PolySchedule {
    fn default() -> Self {
        PolySchedule {
            lr: 0.1,
            power: 0.5,
            warmup_steps: 1000,
            total_steps: 80_000,
        }
    }
}

pub fn poly_lr(step: u64, s: &PolySchedule) -> f64 {
    if step >= s.total_steps {
        return 0.0;
    }
    if step < s.warmup_steps {
        return s.lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.lr * (1.0 - progress).powf(s.power)
}
