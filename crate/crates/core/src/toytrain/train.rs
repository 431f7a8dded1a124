use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::toytrain::checkpoint::{Checkpoint, Stage};
use crate::toytrain::config::{Schedule, TrainConfig};
use crate::toytrain::model::ToyModel;
use crate::toytrain::optim::{clip_global_norm, AdamState, AdamW};
use crate::toytrain::task::SyntheticTask;

/// Number of trailing steps averaged into [`final_loss`].
pub const FINAL_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f32,
    pub accuracy: f32,
    pub lr: f32,
    pub wd: f32,
    pub grad_norm: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Start the stage with zeroed moments instead of the resumed ones.
    pub reset_optimizer: bool,
}

#[derive(Clone, Debug)]
pub struct StageRun {
    pub stage: Stage,
    /// State after the last completed update.
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossPoint>,
    pub diverged: Option<Divergence>,
}

impl StageRun {
    pub fn final_loss(&self) -> Option<f32> {
        final_loss(&self.curve)
    }
}

/// Mean of the last [`FINAL_WINDOW`] losses of a curve.
pub fn final_loss(curve: &[LossPoint]) -> Option<f32> {
    if curve.is_empty() {
        return None;
    }
    let tail = &curve[curve.len().saturating_sub(FINAL_WINDOW)..];
    Some(tail.iter().map(|p| p.loss).sum::<f32>() / tail.len() as f32)
}

pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[LossPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,loss,lr,wd\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.lr, p.wd));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn task_for(cfg: &TrainConfig) -> Result<SyntheticTask> {
    SyntheticTask::new(cfg.task, cfg.vocab, cfg.seq_len, cfg.seed)
}

fn check_resume(cfg: &TrainConfig, ck: &Checkpoint) -> Result<()> {
    match cfg.architecture_diff(&ck.config) {
        Some(diff) => Err(Error::ConfigMismatch(diff)),
        None => Ok(()),
    }
}

/// Runs one stage of the two-stage schedule. The a8 stage starts from a fresh
/// model or continues an a8 checkpoint; the a4 stage must resume from a
/// finished a8 checkpoint (or continue an a4 one).
pub fn train_stage(
    cfg: &TrainConfig,
    stage: Stage,
    resume: Option<Checkpoint>,
    opts: StageOptions,
) -> Result<StageRun> {
    train_stage_with(cfg, stage, resume, opts, |_| {})
}

pub fn train_stage_with(
    cfg: &TrainConfig,
    stage: Stage,
    resume: Option<Checkpoint>,
    opts: StageOptions,
    mut on_step: impl FnMut(&LossPoint),
) -> Result<StageRun> {
    cfg.validate()?;
    let end = match stage {
        Stage::A8 => cfg.steps_a8,
        Stage::A4 => cfg.total_steps(),
    };
    let (mut model, mut state, start) = match (stage, resume) {
        (Stage::A8, None) => {
            let model = ToyModel::init(cfg)?;
            let state = AdamState::zeros_like(&model.tensors());
            (model, state, 0)
        }
        (Stage::A4, None) => {
            return Err(Error::InvalidConfig(
                "the a4 stage continues from an a8 checkpoint".into(),
            ))
        }
        (_, Some(ck)) => {
            check_resume(cfg, &ck)?;
            match (stage, ck.stage) {
                (Stage::A8, Stage::A4) => {
                    return Err(Error::InvalidConfig(
                        "cannot resume the a8 stage from an a4 checkpoint".into(),
                    ))
                }
                (Stage::A4, Stage::A8) if ck.step != cfg.steps_a8 => {
                    return Err(Error::ConfigMismatch(format!(
                        "a8 checkpoint stopped at step {}, config switches at {}",
                        ck.step, cfg.steps_a8
                    )))
                }
                _ => {}
            }
            if ck.step > end {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint step {} is past the end of the stage ({end})",
                    ck.step
                )));
            }
            let mut model =
                ToyModel::from_tensors(cfg, ck.model.tensors().into_iter().cloned().collect())?;
            model.set_rotation(cfg.rotation);
            let state = if opts.reset_optimizer && stage != ck.stage {
                AdamState::zeros_like(&model.tensors())
            } else {
                ck.optimizer
            };
            (model, state, ck.step)
        }
    };

    let task = task_for(cfg)?;
    let schedule = Schedule::new(cfg);
    let opt = AdamW {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let precision = stage.precision();
    let mut curve = Vec::with_capacity(end - start);
    let mut diverged = None;
    let mut step = start;
    while step < end {
        let batch = task.make_batch(cfg.batch, step as u64);
        let (eval, mut grads) = model.loss_and_grads(&batch, precision)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !eval.loss.is_finite() || !grad_norm.is_finite() {
            diverged = Some(Divergence {
                step,
                loss: eval.loss,
            });
            break;
        }
        let (lr, wd) = schedule.at(step);
        opt.step(&mut state, &mut model.tensors_mut(), &grads, lr, wd)?;
        let point = LossPoint {
            step,
            loss: eval.loss,
            accuracy: eval.accuracy,
            lr,
            wd,
            grad_norm,
        };
        on_step(&point);
        curve.push(point);
        step += 1;
        if model.tensors().iter().any(|t| !t.is_finite()) {
            diverged = Some(Divergence {
                step,
                loss: f32::NAN,
            });
            break;
        }
    }
    Ok(StageRun {
        stage,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            step,
            stage,
            model,
            optimizer: state,
        },
        curve,
        diverged,
    })
}

/// Both stages back to back with the optimizer state carried across.
pub fn train_two_stage(cfg: &TrainConfig) -> Result<(StageRun, Option<StageRun>)> {
    let a8 = train_stage(cfg, Stage::A8, None, StageOptions::default())?;
    if a8.diverged.is_some() {
        return Ok((a8, None));
    }
    let a4 = train_stage(
        cfg,
        Stage::A4,
        Some(a8.checkpoint.clone()),
        StageOptions::default(),
    )?;
    Ok((a8, Some(a4)))
}
