use serde::Serialize;

use crate::error::Result;
use crate::layers::Rotation;
use crate::toytrain::checkpoint::Stage;
use crate::toytrain::config::TrainConfig;
use crate::toytrain::train::{train_stage_with, Divergence, LossPoint, StageOptions};

pub const VARIANTS: [Rotation; 3] = [
    Rotation::None,
    Rotation::Activation,
    Rotation::WeightActivation,
];

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub rotation: Rotation,
    pub final_loss_a8: Option<f32>,
    pub final_loss_a4: Option<f32>,
    pub diverged: Option<DivergedAt>,
    #[serde(skip)]
    pub curve: Vec<LossPoint>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DivergedAt {
    pub stage: Stage,
    #[serde(flatten)]
    pub at: Divergence,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub config: TrainConfig,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, rotation: Rotation) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.rotation == rotation)
    }
}

/// Trains the a8 then a4 stages once per rotation mode with identical seed,
/// data and hyperparameters.
pub fn run_ablation(cfg: &TrainConfig, rotations: &[Rotation]) -> Result<AblationReport> {
    run_ablation_with(cfg, rotations, |_, _| {})
}

pub fn run_ablation_with(
    cfg: &TrainConfig,
    rotations: &[Rotation],
    mut on_step: impl FnMut(Rotation, &LossPoint),
) -> Result<AblationReport> {
    let mut variants = Vec::with_capacity(rotations.len());
    for &rotation in rotations {
        let vcfg = TrainConfig {
            rotation,
            ..cfg.clone()
        };
        let a8 = train_stage_with(&vcfg, Stage::A8, None, StageOptions::default(), |p| {
            on_step(rotation, p)
        })?;
        let mut result = VariantResult {
            rotation,
            final_loss_a8: a8.final_loss(),
            final_loss_a4: None,
            diverged: a8.diverged.map(|at| DivergedAt {
                stage: Stage::A8,
                at,
            }),
            curve: a8.curve.clone(),
        };
        if result.diverged.is_none() {
            let a4 = train_stage_with(
                &vcfg,
                Stage::A4,
                Some(a8.checkpoint),
                StageOptions::default(),
                |p| on_step(rotation, p),
            )?;
            result.final_loss_a4 = a4.final_loss();
            result.diverged = a4.diverged.map(|at| DivergedAt {
                stage: Stage::A4,
                at,
            });
            result.curve.extend(a4.curve);
        }
        variants.push(result);
    }
    Ok(AblationReport {
        config: cfg.clone(),
        variants,
    })
}
