//! Two-phase training: every parameter first, then only the LI weights.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{AdamConfig, AdamState};
use crate::autodiff::params::ParamGroup;
use crate::autodiff::tape::Tape;
use crate::data::augment::random_scale_augment;
use crate::data::eval::{evaluate, stack_images};
use crate::data::labels::{LabelMap, IGNORE_INDEX};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::models::segmenter::Segmenter;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub main_epochs: usize,
    pub li_finetune_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2_lambda: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
    /// Validation mIoU is measured after every epoch when a split is given.
    pub eval_batch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            main_epochs: 30,
            li_finetune_epochs: 10,
            batch_size: 8,
            adam: AdamConfig::default(),
            l2_lambda: 4e-5,
            scale_range: (0.75, 1.25),
            seed: 0,
            eval_batch: 16,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.adam.epsilon > 0.0) {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config("l2 coefficient must be non-negative".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("scale range [{lo}, {hi}] must lie within [0.5, 2.0]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across both phases.
    pub epoch: usize,
    pub phase: u8,
    /// Mean minibatch objective (cross-entropy plus L2) over the epoch.
    pub loss: f64,
    pub lr: f64,
    pub val_miou: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,phase,loss,lr,val_miou";

    pub fn csv_row(&self) -> String {
        let miou = self.val_miou.map_or(String::new(), |m| format!("{m:.6}"));
        format!("{},{},{:.6},{},{}", self.epoch, self.phase, self.loss, self.lr, miou)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn phase_end_miou(&self, phase: u8) -> Option<f64> {
        self.epochs.iter().rev().find(|r| r.phase == phase).and_then(|r| r.val_miou)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", EpochRecord::CSV_HEADER);
        for r in &self.epochs {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }
}

fn diverged(epoch: usize, phase: u8, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::Diverged { epoch, phase, reason },
        other => other,
    }
}

fn batch_of(samples: &[&SegSample]) -> Result<(Tensor4<f32>, LabelMap)> {
    let images: Vec<&Tensor4<f32>> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.labels).collect();
    Ok((stack_images(&images)?, LabelMap::stack(&labels)?))
}

/// Objective of one minibatch; with `step`, also backpropagates and updates.
fn run_batch(
    model: &mut Segmenter<f32>,
    adam: &mut AdamState,
    x: Tensor4<f32>,
    labels: &LabelMap,
    l2_lambda: f64,
    step: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xn = tape.input(x);
    let out = model.forward(&mut tape, xn)?;
    let loss = match tape.loss_with_l2(out.logits, labels, IGNORE_INDEX, l2_lambda, &model.params) {
        // Augmentation can crop away every labelled pixel of a small batch.
        Err(Error::UndefinedLoss) => return Ok(f64::NAN),
        other => other?,
    };
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    if step {
        model.params.zero_grads();
        tape.backward_into(loss, &mut model.params)?;
        adam.step(&mut model.params);
        model.params.zero_grads();
        let bad = model.params.iter().find(|(_, p)| !p.value.all_finite());
        if let Some((_, p)) = bad {
            return Err(Error::Numeric(format!("parameter {} became non-finite", p.name)));
        }
    }
    Ok(value)
}

fn mean_ignoring_nan(sum: f64, count: usize) -> f64 {
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Trains `model` for `main_epochs` with every parameter, then for
/// `li_finetune_epochs` with everything outside the LI-weight group frozen.
///
/// `on_epoch` sees each record as soon as it is produced. A model without LI
/// weights has nothing to fine-tune: its phase-2 rows repeat one evaluation
/// of the unchanged model.
pub fn train_two_phase(
    model: &mut Segmenter<f32>,
    train: &[SegSample],
    val: &[SegSample],
    schedule: &Schedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = AdamState::new(schedule.adam, &model.params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total = schedule.main_epochs + schedule.li_finetune_epochs;
    let mut frozen_rows: Option<(f64, Option<f64>)> = None;
    model.params.unfreeze_all();
    for epoch in 1..=total {
        let phase: u8 = if epoch <= schedule.main_epochs { 1 } else { 2 };
        if phase == 2 && epoch == schedule.main_epochs + 1 {
            model.params.freeze_all_except(ParamGroup::LiWeights);
        }
        let trainable = model.params.trainable_count() > 0;
        let record = if let (false, Some((loss, val_miou))) = (trainable, frozen_rows) {
            EpochRecord { epoch, phase, loss, lr: schedule.adam.lr, val_miou }
        } else {
            let (mut sum, mut count) = (0.0, 0usize);
            if trainable {
                order.shuffle(&mut rng);
                for chunk in order.chunks(schedule.batch_size) {
                    let augmented = chunk
                        .iter()
                        .map(|&i| random_scale_augment(&train[i], schedule.scale_range, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&SegSample> = augmented.iter().collect();
                    let (x, labels) = batch_of(&refs)?;
                    let v = run_batch(model, &mut adam, x, &labels, schedule.l2_lambda, true)
                        .map_err(|e| diverged(epoch, phase, e))?;
                    if !v.is_nan() {
                        sum += v * chunk.len() as f64;
                        count += chunk.len();
                    }
                }
            } else {
                for chunk in train.chunks(schedule.eval_batch.max(1)) {
                    let refs: Vec<&SegSample> = chunk.iter().collect();
                    let (x, labels) = batch_of(&refs)?;
                    let v = run_batch(model, &mut adam, x, &labels, schedule.l2_lambda, false)
                        .map_err(|e| diverged(epoch, phase, e))?;
                    if !v.is_nan() {
                        sum += v * chunk.len() as f64;
                        count += chunk.len();
                    }
                }
            }
            let val_miou = if val.is_empty() {
                None
            } else {
                let cm = evaluate(model, val, &[1.0], schedule.eval_batch).map_err(|e| diverged(epoch, phase, e))?;
                cm.miou().ok().map(|r| r.miou)
            };
            let loss = mean_ignoring_nan(sum, count);
            if !trainable {
                frozen_rows = Some((loss, val_miou));
            }
            EpochRecord { epoch, phase, loss, lr: schedule.adam.lr, val_miou }
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    model.params.unfreeze_all();
    Ok(report)
}
