use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BlockConfig, Rotation};
use crate::toytrain::task::TaskKind;

/// Everything needed to reproduce a toy training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub glu: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub steps_a8: usize,
    pub steps_a4: usize,
    pub task: TaskKind,
    /// Stage-1 peak learning rate, reached at the end of warmup.
    pub lr_peak: f32,
    /// Stage-2 peak learning rate; stage 1 decays linearly down to it and
    /// stage 2 decays linearly from it to zero.
    pub lr_peak_stage2: f32,
    /// Decoupled weight decay during stage 1; zero in stage 2.
    pub weight_decay: f32,
    pub warmup_steps: usize,
    /// Fraction of the total step count at which stage 2 begins.
    pub stage_boundary: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Global gradient-norm clip.
    pub grad_clip: f32,
    pub rotation: Rotation,
    /// Fixed multiplier on channel 0 of every `W_o` / `W_down` input; `1.0`
    /// disables outlier injection.
    pub outlier_gain: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 2,
            hidden: 64,
            glu: 128,
            heads: 4,
            vocab: 16,
            seq_len: 32,
            batch: 32,
            steps_a8: 2000,
            steps_a4: 200,
            task: TaskKind::Copy,
            lr_peak: 3e-3,
            lr_peak_stage2: 1.5e-3,
            weight_decay: 0.1,
            warmup_steps: 20,
            stage_boundary: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            rotation: Rotation::Activation,
            outlier_gain: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_a8 + self.steps_a4
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            hidden: self.hidden,
            glu: self.glu,
            heads: self.heads,
            max_seq_len: self.seq_len,
            rotation: self.rotation,
            outlier_gain: self.outlier_gain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.block_config().validate()?;
        if self.layers == 0 || self.batch == 0 || self.steps_a8 == 0 {
            return bad("layers, batch and steps_a8 must be positive".into());
        }
        if self.seq_len < 4 {
            return bad(format!("seq_len {} is too short", self.seq_len));
        }
        self.task.check_vocab(self.vocab)?;
        if self.steps_a4 * 10 > self.total_steps() {
            return bad(format!(
                "a4 stage ({} steps) must be at most 10% of the {} total",
                self.steps_a4,
                self.total_steps()
            ));
        }
        if !(0.0 < self.stage_boundary && self.stage_boundary <= 1.0) {
            return bad(format!(
                "stage_boundary {} outside (0, 1]",
                self.stage_boundary
            ));
        }
        let rates = [
            self.lr_peak,
            self.lr_peak_stage2,
            self.weight_decay,
            self.grad_clip,
        ];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("learning rates, weight decay and clip must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Fields that fix the parameter shapes and the forward function.
    pub(crate) fn architecture_diff(&self, other: &TrainConfig) -> Option<String> {
        let pairs = [
            ("layers", self.layers, other.layers),
            ("hidden", self.hidden, other.hidden),
            ("glu", self.glu, other.glu),
            ("heads", self.heads, other.heads),
            ("vocab", self.vocab, other.vocab),
            ("seq_len", self.seq_len, other.seq_len),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Some(format!("{name}: checkpoint has {b}, config has {a}"));
            }
        }
        if self.rotation != other.rotation {
            return Some(format!(
                "rotation: checkpoint has {:?}, config has {:?}",
                other.rotation, self.rotation
            ));
        }
        if self.outlier_gain != other.outlier_gain {
            return Some(format!(
                "outlier_gain: checkpoint has {}, config has {}",
                other.outlier_gain, self.outlier_gain
            ));
        }
        None
    }
}

/// Two-stage schedule: linear warmup to `lr_peak`, linear decay to
/// `lr_peak_stage2` at the boundary, then linear decay to zero at the last
/// step. Weight decay is switched off at the boundary.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    lr_peak: f32,
    lr_peak_stage2: f32,
    weight_decay: f32,
    warmup: usize,
    boundary: usize,
    total: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        let total = cfg.total_steps();
        let boundary =
            ((cfg.stage_boundary as f64 * total as f64).round() as usize).clamp(1, total);
        Schedule {
            lr_peak: cfg.lr_peak,
            lr_peak_stage2: cfg.lr_peak_stage2,
            weight_decay: cfg.weight_decay,
            warmup: cfg.warmup_steps.min(boundary),
            boundary,
            total,
        }
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    /// `(learning_rate, weight_decay)` for the update at global `step`.
    pub fn at(&self, step: usize) -> (f32, f32) {
        if step < self.warmup {
            let lr = self.lr_peak * (step + 1) as f32 / self.warmup as f32;
            return (lr, self.weight_decay);
        }
        if step < self.boundary {
            let span = (self.boundary - self.warmup).max(1) as f32;
            let frac = (step - self.warmup) as f32 / span;
            let lr = self.lr_peak + (self.lr_peak_stage2 - self.lr_peak) * frac;
            return (lr, self.weight_decay);
        }
        let span = (self.total - self.boundary).max(1) as f32;
        let frac = (step - self.boundary) as f32 / span;
        (self.lr_peak_stage2 * (1.0 - frac).max(0.0), 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn a4_share_is_limited() {
        let cfg = TrainConfig {
            steps_a8: 100,
            steps_a4: 20,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        let s = Schedule::new(&cfg);
        assert_eq!(s.boundary(), 1980);
        let (lr0, wd0) = s.at(0);
        assert!(lr0 > 0.0 && lr0 < cfg.lr_peak);
        assert_eq!(s.at(19), (cfg.lr_peak, cfg.weight_decay));
        let (lr_b, wd_b) = s.at(1980);
        assert_eq!(lr_b, cfg.lr_peak_stage2);
        assert_eq!(wd_b, 0.0);
        assert!(wd0 > 0.0);
        let (lr_end, _) = s.at(2199);
        assert!(lr_end < 0.01 * cfg.lr_peak_stage2);
        // monotone after warmup
        let lrs: Vec<f32> = (20..2200).map(|t| s.at(t).0).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }
}
