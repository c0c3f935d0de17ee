//! Curriculum-driven training loop, step learning-rate decay, validation and
//! best-checkpoint selection.

mod config;
mod optim;

use std::io::Write;
use std::path::Path;

use log::info;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensors, dataset_stats, PatchCategory, PatchPair};
use crate::error::{shape_err, Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{confusion, ConfusionCounts, MetricsReport};
use crate::model::{Checkpoint, HaNet};
use crate::nn::{Module, Tensor};
use crate::pfbs::{epoch_plan, select_samples};

pub use config::TrainConfig;
pub use optim::{Adam, WeightDecay};

/// Staircase decay `initial_lr · γ^⌊epoch / step_size⌋` for a 0-based epoch.
pub fn lr_at_epoch(initial_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    initial_lr * gamma.powi((epoch / step_size.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub fg: usize,
    pub bg: usize,
    pub steps: usize,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,lr,fg,bg,val_f1,val_pre,val_rec,val_oa,val_kc,val_iou";

impl TrainingHistory {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    /// CSV with one row per epoch; validation columns are empty when no
    /// validation split was given.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for e in &self.epochs {
            let val = e.val.map_or_else(
                || ",,,,,".to_string(),
                |m| format!("{},{},{},{},{},{}", m.f1, m.precision, m.recall, m.oa, m.kappa, m.iou),
            );
            out.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, e.loss, e.lr, e.fg, e.bg, val));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Result of [`train`]: the selected checkpoint, the history and the model
/// as it stands after the last step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainingHistory,
    pub model: HaNet,
}

/// Epoch manifests (indices into `train`) the schedule produces for this run.
pub fn epoch_manifests(config: &TrainConfig, train: &[PatchPair]) -> Result<Vec<Vec<usize>>> {
    let (fg, bg) = pools(train);
    (1..=config.epochs)
        .map(|e| {
            let plan = epoch_plan(config.schedule.policy, e, fg.len(), bg.len());
            select_samples(&plan, &fg, &bg, config.schedule.seed)
        })
        .collect()
}

fn pools(train: &[PatchPair]) -> (Vec<usize>, Vec<usize>) {
    (0..train.len()).partition(|&i| train[i].category == PatchCategory::Foreground)
}

pub fn train(config: &TrainConfig, train_set: &[PatchPair], val_set: &[PatchPair], mut model: HaNet) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training split is empty"));
    }
    if model.config != config.model {
        return Err(Error::Config("model was built from a different architecture config".into()));
    }
    let mut loss_cfg: LossConfig = config.loss;
    if config.auto_class_weights {
        let stats = dataset_stats(train_set)?;
        loss_cfg.class_weights = LossConfig::inverse_frequency_weights(stats.changed_fraction);
    }
    let (fg, bg) = pools(train_set);
    info!(
        "training on {} foreground / {} background patches, policy {}, class weights {:?}",
        fg.len(),
        bg.len(),
        config.schedule.policy,
        loss_cfg.class_weights
    );

    let mut optimizer = Adam::new(config.weight_decay, config.weight_decay_mode);
    let mut history = TrainingHistory::default();
    let mut best: Option<Checkpoint> = None;
    let mut steps = 0usize;

    for epoch in 1..=config.epochs {
        let plan = epoch_plan(config.schedule.policy, epoch, fg.len(), bg.len());
        let order = select_samples(&plan, &fg, &bg, config.schedule.seed)?;
        let lr = lr_at_epoch(config.initial_lr, epoch - 1, config.step_size, config.gamma);
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&PatchPair> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (t1, t2, labels) = batch_tensors(&batch);
            model.zero_grad();
            let logits = model.forward(&t1, &t2, true)?;
            let loss = losses::compute(logits.view(), labels.view(), &loss_cfg)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, step {steps}: loss = {}", loss.value)));
            }
            model.backward(&loss.grad);
            optimizer.step(&mut model, lr);
            loss_sum += loss.value;
            epoch_steps += 1;
            steps += 1;
        }
        if epoch_steps == 0 {
            break;
        }

        let val = if val_set.is_empty() { None } else { Some(evaluate_model(&mut model, val_set, config.batch_size)?) };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / epoch_steps as f64,
            lr,
            fg: plan.fg_count,
            bg: plan.bg_count,
            steps: epoch_steps,
            val,
        };
        info!(
            "epoch {epoch:>3} lr {lr:.3e} fg {} bg {} loss {:.5}{}",
            record.fg,
            record.bg,
            record.loss,
            val.map_or(String::new(), |m| format!(" val F1 {:.4} Pre {:.4} Rec {:.4}", m.f1, m.precision, m.recall))
        );
        match val {
            Some(m) if history.best_val_f1.is_none_or(|b| m.f1 > b) => {
                history.best_val_f1 = Some(m.f1);
                history.best_epoch = epoch;
                best = Some(Checkpoint::from_model(&model, epoch, Some(m.f1)));
            }
            None => {
                history.best_epoch = epoch;
                best = Some(Checkpoint::from_model(&model, epoch, None));
            }
            _ => {}
        }
        history.epochs.push(record);
        if config.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    let checkpoint = best.ok_or(Error::EmptyInput("no epoch completed"))?;
    Ok(TrainOutcome { checkpoint, history, model })
}

/// Binary predictions for each patch, in evaluation mode.
pub fn predict_patches(model: &mut HaNet, patches: &[PatchPair], batch_size: usize) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let batch: Vec<&PatchPair> = chunk.iter().collect();
        let (t1, t2, _) = batch_tensors(&batch);
        let pred = model.predict(&t1, &t2)?;
        out.extend(pred.outer_iter().map(|p| p.to_owned()));
    }
    Ok(out)
}

/// Tile offsets covering `len` pixels; the last tile is aligned to the edge
/// and may overlap its neighbour.
pub fn cover_offsets(len: usize, tile: usize) -> Vec<usize> {
    let mut offsets: Vec<usize> = (0..len / tile).map(|k| k * tile).collect();
    if len % tile != 0 && len >= tile {
        offsets.push(len - tile);
    }
    offsets
}

/// Full-resolution change map for a scene of any size at least one tile in
/// each dimension. Overlapping border tiles overwrite earlier predictions.
pub fn predict_scene(model: &mut HaNet, t1: &Array3<u8>, t2: &Array3<u8>, batch_size: usize) -> Result<Array2<u8>> {
    if t1.dim() != t2.dim() || t1.dim().0 != 3 {
        return Err(shape_err(format!("scene rasters {:?} and {:?} must be equal 3-channel images", t1.dim(), t2.dim())));
    }
    let (_, h, w) = t1.dim();
    let tile = model.config.tile;
    if h < tile || w < tile {
        return Err(shape_err(format!("scene {h}x{w} is smaller than the {tile} pixel tile")));
    }
    let offsets: Vec<(usize, usize)> = cover_offsets(h, tile)
        .into_iter()
        .flat_map(|r| cover_offsets(w, tile).into_iter().map(move |c| (r, c)))
        .collect();
    let mut out = Array2::zeros((h, w));
    for chunk in offsets.chunks(batch_size.max(1)) {
        let crop = |img: &Array3<u8>| {
            Tensor::from_shape_fn((chunk.len(), 3, tile, tile), |(b, ch, i, j)| {
                let (r, c) = chunk[b];
                f64::from(img[[ch, r + i, c + j]]) / 255.0
            })
        };
        let pred = model.predict(&crop(t1), &crop(t2))?;
        for (b, &(r, c)) in chunk.iter().enumerate() {
            out.slice_mut(s![r..r + tile, c..c + tile]).assign(&pred.index_axis(Axis(0), b));
        }
    }
    Ok(out)
}

/// Micro-averaged metrics over all pixels of `patches`.
pub fn evaluate_model(model: &mut HaNet, patches: &[PatchPair], batch_size: usize) -> Result<MetricsReport> {
    let preds = predict_patches(model, patches, batch_size)?;
    let counts = preds
        .iter()
        .zip(patches)
        .map(|(p, patch)| confusion(p.view(), patch.label.view()))
        .sum::<Result<ConfusionCounts>>()?;
    Ok(MetricsReport::from_counts(counts))
}

pub fn evaluate(checkpoint: &Checkpoint, patches: &[PatchPair], batch_size: usize) -> Result<MetricsReport> {
    if let Some(p) = patches.first() {
        if p.size() != checkpoint.config.tile {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {} pixel tiles, patches are {}",
                checkpoint.config.tile,
                p.size()
            )));
        }
    }
    let mut model = checkpoint.to_model()?;
    evaluate_model(&mut model, patches, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_learning_rate() {
        for e in 0..8 {
            assert_eq!(lr_at_epoch(5e-4, e, 8, 0.5), 5e-4);
        }
        assert_eq!(lr_at_epoch(5e-4, 8, 8, 0.5), 2.5e-4);
        assert_eq!(lr_at_epoch(5e-4, 16, 8, 0.5), 1.25e-4);
    }

    #[test]
    fn cover_offsets_align_last_tile_to_edge() {
        assert_eq!(cover_offsets(512, 256), vec![0, 256]);
        assert_eq!(cover_offsets(300, 256), vec![0, 44]);
        assert_eq!(cover_offsets(100, 256), Vec::<usize>::new());
    }

    #[test]
    fn history_csv_columns() {
        let h = TrainingHistory {
            epochs: vec![EpochRecord { epoch: 1, loss: 0.5, lr: 1e-3, fg: 2, bg: 0, steps: 1, val: None }],
            ..Default::default()
        };
        let csv = h.to_csv();
        assert_eq!(csv.lines().next().unwrap(), HISTORY_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,0.5,0.001,2,0,,,,,,");
    }
}
