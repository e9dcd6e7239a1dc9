use crate::config::{parse_bool, parse_value, ConfigError, KeyValue, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_teacher: f64,
    pub lambda_student: f64,
    pub seed: u64,
    pub flip_augment: bool,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_iters: 2000,
            lr0: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_teacher: 1.0,
            lambda_student: 1.0,
            seed: 0,
            flip_augment: true,
            eval_every: 0,
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("batch_size", "samples per step (at least 4)"),
    ("total_iters", "number of optimizer steps"),
    ("lr0", "initial learning rate"),
    ("poly_power", "exponent of the poly decay"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 penalty on conv and attention weights"),
    ("lambda_teacher", "weight of the stride-32 teacher cross entropy"),
    ("lambda_student", "weight of the full-resolution student cross entropy"),
    ("seed", "seed for initialization, data order and flips"),
    ("flip_augment", "random horizontal flips"),
    ("eval_every", "steps between evaluations, 0 for the end only"),
];

impl KeyValue for TrainConfig {
    fn key_docs() -> &'static [(&'static str, &'static str)] {
        KEYS
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "total_iters" => self.total_iters = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "poly_power" => self.poly_power = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "lambda_teacher" => self.lambda_teacher = parse_value(key, value)?,
            "lambda_student" => self.lambda_student = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "flip_augment" => self.flip_augment = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            _ => return Err(Self::unknown(key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("lr0", self.lr0.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda_teacher", self.lambda_teacher.to_string()),
            ("lambda_student", self.lambda_student.to_string()),
            ("seed", self.seed.to_string()),
            ("flip_augment", self.flip_augment.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.total_iters < 1 {
            return fail("total_iters must be at least 1");
        }
        if !(self.lr0 > 0.0) {
            return fail("lr0 must be positive");
        }
        if self.batch_size < 4 {
            return fail("batch_size must be at least 4 for batch statistics");
        }
        let weights = [self.momentum, self.weight_decay, self.lambda_teacher, self.lambda_student, self.poly_power];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return fail("momentum, weight_decay, poly_power and loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// `lr0 * (1 - step / T)^power`, clamped to `[0, T]`.
pub fn poly_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let t = cfg.total_iters as f64;
    let frac = (step.min(cfg.total_iters) as f64 / t).clamp(0.0, 1.0);
    cfg.lr0 * (1.0 - frac).powf(cfg.poly_power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, &cfg), 0.01);
        assert_eq!(poly_lr(cfg.total_iters, &cfg), 0.0);
        // independent evaluation of 0.01 * 0.5^0.9
        let half = 0.01 * (0.9 * 0.5f64.ln()).exp();
        assert!((poly_lr(1000, &cfg) - half).abs() < 1e-15);
        assert!((poly_lr(1000, &cfg) - 0.005359).abs() < 1e-6);
        let lrs: Vec<f64> = (0..=cfg.total_iters).map(|s| poly_lr(s, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::from_text("batch_size=2").is_err());
        assert!(TrainConfig::from_text("lr0=0").is_err());
        assert!(TrainConfig::from_text("total_iters=0").is_err());
        let c = TrainConfig::from_text("seed=9\nflip_augment=false").unwrap();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
