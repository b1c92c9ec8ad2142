//! Training loop: per-sample gradients, Adam, loss staging and the
//! object-count curriculum.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::data::{augment, sample_rng, DatasetRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{read_prediction, Model, ModelConfig};
use crate::objective::{total_loss_with_grad, ActiveTerms, LossBreakdown, LossWeights};
use crate::parallel::Exec;
use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};
use crate::types::{GroundTruthInstance, PredictionSequence};

/// Epoch index (0-based) from which each loss term is switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossStages {
    pub mask: usize,
    pub stop: usize,
    pub class: usize,
    pub bbox: usize,
}

impl Default for LossStages {
    fn default() -> Self {
        LossStages {
            mask: 0,
            stop: 1,
            class: 2,
            bbox: 3,
        }
    }
}

impl LossStages {
    pub fn active(&self, epoch: usize) -> ActiveTerms {
        ActiveTerms {
            mask: epoch >= self.mask,
            bbox: epoch >= self.bbox,
            class: epoch >= self.class,
            stop: epoch >= self.stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplier on the learning rate; epoch `e` (from 0) trains
    /// at `learning_rate · lr_decay^e`.
    pub lr_decay: f64,
    /// Train on randomly mirrored, channel-permuted copies of the images.
    pub augment: bool,
    pub seed: u64,
    /// Box, class and stop loss weights.
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub stages: LossStages,
    /// Largest number of instances per image at the start of training.
    pub curriculum_start: usize,
    /// Non-improving epochs before one more instance is admitted.
    pub patience: usize,
    /// Relative validation-loss decrease that counts as an improvement.
    pub plateau_eps: f64,
    pub checkpoint_every: usize,
    /// Stop threshold for inference on the validation set.
    pub stop_threshold: f64,
    /// Inference cap on the number of emitted instances.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            augment: false,
            seed: 0,
            alpha: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            stages: LossStages::default(),
            curriculum_start: 2,
            patience: 5,
            plateau_eps: 1e-3,
            checkpoint_every: 10,
            stop_threshold: 0.5,
            max_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights(ActiveTerms::ALL).validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.curriculum_start < 2 {
            return bad("curriculum_start must be at least 2");
        }
        if self.patience == 0 || self.checkpoint_every == 0 || self.max_steps == 0 {
            return bad("patience, checkpoint_every and max_steps must be positive");
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            return bad("stop_threshold must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.plateau_eps) {
            return bad("plateau_eps must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn weights(&self, active: ActiveTerms) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda: self.lambda,
            gamma: self.gamma,
            active,
        }
    }
}

/// Plateau-driven curriculum over the number of instances per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// Instances per image currently trained on; also the unroll length.
    pub max_objects: usize,
    /// Best validation loss seen so far (`None` before the first check).
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
}

impl CurriculumState {
    pub fn new(max_objects: usize) -> Self {
        CurriculumState {
            max_objects,
            best_val: None,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss; returns whether the level advanced.
    /// An epoch improves when `val ≤ best · (1 − eps)`. After `patience`
    /// epochs without improvement `max_objects` goes up by one and the
    /// counter restarts; the best loss is kept.
    pub fn plateau_check(&mut self, val: f64, patience: usize, eps: f64) -> bool {
        let improved = match self.best_val {
            None => true,
            Some(best) => val <= best * (1.0 - eps),
        };
        if improved {
            self.best_val = Some(val);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= patience {
            self.max_objects += 1;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// The `k` largest instances (by visible area, earlier index on ties), in
/// their original order.
pub fn curriculum_filter(instances: &[GroundTruthInstance], k: usize) -> Vec<GroundTruthInstance> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(instances[i].mask.area()), i));
    order.truncate(k);
    order.sort_unstable();
    order.into_iter().map(|i| instances[i].clone()).collect()
}

/// Unroll length for an image with `n` instances at curriculum level `k`:
/// `n + 1` when every instance is a target, so the step after the last one
/// carries a stop target of zero; `k` when the image was truncated.
pub fn training_steps(n: usize, k: usize) -> usize {
    if n <= k {
        n + 1
    } else {
        k
    }
}

/// Loss and parameter gradients for one image unrolled for `steps` steps.
pub fn sample_gradient<F: Element>(
    model: &Model<F>,
    record: &DatasetRecord,
    instances: &[GroundTruthInstance],
    steps: usize,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let run = model.forward(&mut g, &record.image, steps)?;
    let preds = PredictionSequence {
        steps: run.steps.iter().map(|s| read_prediction(&g, s)).collect(),
    };
    let (loss, step_grads) = total_loss_with_grad(&preds, instances, weights)?;
    if let Some((term, value)) = loss.non_finite() {
        return Err(Error::NonFinite { term, value });
    }
    let cast = |v: &[f64]| v.iter().map(|&x| F::of(x)).collect::<Vec<F>>();
    let mut seeds = Vec::with_capacity(4 * steps);
    for (out, sg) in run.steps.iter().zip(&step_grads) {
        seeds.push((out.mask, Tensor::from_vec(g.value(out.mask).shape(), cast(&sg.mask))?));
        seeds.push((out.bbox, Tensor::from_vec(&[4], cast(&sg.bbox))?));
        seeds.push((
            out.class_probs,
            Tensor::from_vec(g.value(out.class_probs).shape(), cast(&sg.class_probs))?,
        ));
        seeds.push((out.stop, Tensor::from_vec(g.value(out.stop).shape(), cast(&[sg.stop]))?));
    }
    let grads = g.backward(&seeds);
    Ok((loss, g.param_grads(&grads, &model.params.shapes())))
}

/// Forward-only loss under the fixed validation protocol: all instances,
/// `n + 1` steps, every term active.
pub fn sample_loss<F: Element>(
    model: &Model<F>,
    record: &DatasetRecord,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let steps = record.instances.len() + 1;
    let preds = model.unroll(&record.image, steps)?;
    crate::objective::total_loss(&preds, &record.instances, &LossWeights {
        active: ActiveTerms::ALL,
        ..*weights
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, learning_rate: f64) -> Self {
        let zeros = || params.shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let lr = self.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        for (id, g) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                p[j] = (p[j] as f64 - lr * mj / (vj.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Mean loss terms over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_m: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossSummary {
    fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossSummary {
            l_m: sum(|b| b.l_m),
            l_b: sum(|b| b.l_b),
            l_c: sum(|b| b.l_c),
            l_s: sum(|b| b.l_s),
            total: sum(|b| b.total),
        }
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Epochs completed, starting at 1.
    pub epoch: usize,
    /// Curriculum level the epoch trained with.
    pub max_objects: usize,
    pub active: Vec<String>,
    pub train: LossSummary,
    pub val_loss: Option<f64>,
    pub val_ap50: Option<f64>,
    pub val_dic_abs: Option<f64>,
    /// Whether the curriculum advanced after this epoch.
    pub advanced: bool,
}

const AUGMENT_SALT: u64 = 0xa06_0a06;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "train_config.json";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_{epoch:04}.safetensors"))
}

/// Output of [`fit`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

/// One optimizer step on the mean gradient of `batch`. Each record keeps
/// its `max_objects` largest instances and is unrolled for
/// [`training_steps`] steps. Returns the per-record losses before the update.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam,
    batch: &[&DatasetRecord],
    max_objects: usize,
    weights: &LossWeights,
    exec: Exec,
) -> Result<Vec<LossBreakdown>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch is empty".into()));
    }
    let current = &*model;
    let results = exec.map(batch, |rec| {
        let kept = curriculum_filter(&rec.instances, max_objects);
        sample_gradient(current, rec, &kept, training_steps(rec.instances.len(), max_objects), weights)
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    for r in results {
        let (loss, grads) = r?;
        losses.push(loss);
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let mut grads = sum.expect("non-empty batch");
    let scale = 1.0 / batch.len() as f32;
    grads.iter_mut().for_each(|g| g.scale(scale));
    adam.update(&mut model.params, &grads);
    Ok(losses)
}

/// Inference-time metrics on `val` (`None` when empty).
pub fn validation_metrics(
    model: &Model<f32>,
    val: &[DatasetRecord],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Option<EvalResult>> {
    if val.is_empty() {
        return Ok(None);
    }
    let preds = exec
        .map(val, |r| model.infer(&r.image, cfg.stop_threshold, cfg.max_steps))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<GroundTruthInstance>> = val.iter().map(|r| r.instances.clone()).collect();
    evaluate(&preds, &gts, cfg.model.decoder.num_classes, &[0.5], exec).map(Some)
}

/// Mean validation loss over `val` (`None` when empty).
pub fn validation_loss(
    model: &Model<f32>,
    val: &[DatasetRecord],
    weights: &LossWeights,
    exec: Exec,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let losses = exec
        .map(val, |r| sample_loss(model, r, weights))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(losses.iter().map(|l| l.total).sum::<f64>() / losses.len() as f64))
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(entry).map_err(|e| Error::io(path, e))?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on `train`, checking `val` after every epoch. With `out_dir` the
/// resolved config, the per-epoch log and checkpoints are written there.
/// `resume` continues from a checkpoint written by an earlier call.
pub fn fit(
    cfg: &TrainConfig,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let (mut model, mut adam, mut state) = match resume {
        Some(ck) => {
            if ck.model.config != cfg.model {
                return Err(Error::Config("checkpoint model config differs from training config".into()));
            }
            let state = ck
                .train_state
                .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
            let mut adam = Adam::new(&ck.model.params, cfg.learning_rate);
            if let Some((m, v)) = ck.optimizer {
                adam.m = m;
                adam.v = v;
            }
            adam.step = state.adam_step;
            (ck.model, adam, state)
        }
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
            let adam = Adam::new(&model.params, cfg.learning_rate);
            let state = TrainState {
                epoch: 0,
                curriculum: CurriculumState::new(cfg.curriculum_start),
                adam_step: 0,
            };
            (model, adam, state)
        }
    };

    let log_path = out_dir.map(|d| d.join(LOG_FILE));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::io(&cfg_path, e))?;
        fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        if state.epoch == 0 {
            let log = log_path.as_ref().unwrap();
            if log.exists() {
                fs::remove_file(log).map_err(|e| Error::io(log, e))?;
            }
        }
        if cfg.epochs == 0 {
            checkpoint::save(&checkpoint_path(dir, 0), &model, Some((&state, &adam)), Some(cfg))?;
        }
    }

    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let active = cfg.stages.active(epoch);
        let weights = cfg.weights(active);
        let max_objects = state.curriculum.max_objects;
        adam.learning_rate = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed ^ 0x5eed_5eed, epoch as u64));

        let mut losses = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let augmented = if cfg.augment {
                let stream = |i: usize| ((epoch as u64) << 32) | i as u64;
                exec.map(batch, |&i| augment(&train[i], &mut sample_rng(cfg.seed ^ AUGMENT_SALT, stream(i))))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let records: Vec<&DatasetRecord> = if cfg.augment {
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &train[i]).collect()
            };
            losses.extend(train_step(&mut model, &mut adam, &records, max_objects, &weights, exec)?);
        }

        let val_loss = validation_loss(&model, val, &weights, exec)?;
        let advanced = match val_loss {
            Some(v) if !v.is_finite() => return Err(Error::NonFinite { term: "val_loss", value: v }),
            Some(v) => state.curriculum.plateau_check(v, cfg.patience, cfg.plateau_eps),
            None => false,
        };
        let val_metrics = validation_metrics(&model, val, cfg, exec)?;
        state.epoch += 1;
        state.adam_step = adam.step;
        let entry = EpochLog {
            epoch: state.epoch,
            max_objects,
            active: active.names().into_iter().map(String::from).collect(),
            train: LossSummary::mean(&losses),
            val_loss,
            val_ap50: val_metrics.as_ref().and_then(|m| m.ap_at(0.5)),
            val_dic_abs: val_metrics.as_ref().map(|m| m.dic_abs),
            advanced,
        };
        if let Some(p) = &log_path {
            append_log(p, &entry)?;
        }
        if let Some(dir) = out_dir {
            if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
                checkpoint::save(
                    &checkpoint_path(dir, state.epoch),
                    &model,
                    Some((&state, &adam)),
                    Some(cfg),
                )?;
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderConfig, SkipMode};
    use crate::encoder::EncoderConfig;
    use crate::types::BinaryMask;

    fn inst(area: usize, class_id: usize) -> GroundTruthInstance {
        let mut m = BinaryMask::filled(8, 8, false);
        for i in 0..area {
            m.data[i] = true;
        }
        GroundTruthInstance::from_mask(m, class_id).unwrap()
    }

    #[test]
    fn constant_loss_advances_every_patience_epochs() {
        let mut c = CurriculumState::new(2);
        let mut advanced_at = Vec::new();
        for epoch in 0..11 {
            if c.plateau_check(1.0, 5, 1e-3) {
                advanced_at.push((epoch, c.max_objects));
            }
        }
        assert_eq!(advanced_at, vec![(5, 3), (10, 4)]);
    }

    #[test]
    fn decreasing_loss_never_advances() {
        let mut c = CurriculumState::new(2);
        for epoch in 0..100 {
            assert!(!c.plateau_check(1.0 / (epoch as f64 + 1.0), 3, 1e-3));
        }
        assert_eq!(c.max_objects, 2);
    }

    #[test]
    fn exact_eps_improvement_counts() {
        let mut c = CurriculumState::new(2);
        c.plateau_check(1.0, 1, 1e-3);
        assert!(!c.plateau_check(1.0 * (1.0 - 1e-3), 1, 1e-3));
        assert_eq!(c.bad_epochs, 0);
        assert!(c.plateau_check(c.best_val.unwrap(), 1, 1e-3));
        assert_eq!(c.max_objects, 3);
    }

    #[test]
    fn filter_keeps_largest() {
        let all = vec![inst(5, 0), inst(20, 1), inst(9, 2), inst(20, 0)];
        let kept = curriculum_filter(&all, 2);
        assert_eq!(kept, vec![all[1].clone(), all[3].clone()]);
        assert_eq!(curriculum_filter(&all, 10), all);
        assert!(curriculum_filter(&all, 0).is_empty());
    }

    #[test]
    fn stages_switch_on_in_order() {
        let s = LossStages::default();
        assert_eq!(s.active(0).names(), vec!["mask"]);
        assert_eq!(s.active(3), ActiveTerms::ALL);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&p, 0.1);
        adam.update(&mut p, &[Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap()]);
        let d = p.get(0).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn invalid_configs() {
        let base = TrainConfig::default();
        assert!(TrainConfig { batch_size: 0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..base.clone() }.validate().is_err());
        assert!(base.validate().is_ok());
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    num_blocks: 2,
                    base_channels: 4,
                    channel_growth: 2,
                },
                decoder: DecoderConfig {
                    num_layers: 2,
                    hidden: 4,
                    skip_mode: SkipMode::Concat,
                    num_classes: 3,
                },
            },
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Vec<DatasetRecord> {
        let spec = crate::data::ShapesSpec {
            height: 16,
            width: 16,
            min_size: 0.3,
            max_size: 0.5,
            max_objects: 2,
            ..Default::default()
        };
        crate::data::generate_dataset(&spec, 4, Exec::Sequential).unwrap()
    }

    #[test]
    fn fit_is_deterministic_across_exec() {
        let data = tiny_data();
        let a = fit(&tiny_cfg(), &data, &data[..2], None, None, Exec::Sequential, |_| {}).unwrap();
        let b = fit(&tiny_cfg(), &data, &data[..2], None, None, Exec::Parallel, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.state.adam_step, 4);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let full_cfg = TrainConfig {
            epochs: 3,
            checkpoint_every: 1,
            ..tiny_cfg()
        };
        let full = fit(&full_cfg, &data, &data[..2], Some(dir.path()), None, Exec::Sequential, |_| {}).unwrap();
        let ck = checkpoint::load(&checkpoint_path(dir.path(), 2)).unwrap();
        let rest = fit(&full_cfg, &data, &data[..2], None, Some(ck), Exec::Sequential, |_| {}).unwrap();
        assert_eq!(rest.model.params, full.model.params);
        assert_eq!(rest.log, full.log[2..].to_vec());
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = fit(&cfg, &[], &[], Some(dir.path()), None, Exec::Sequential, |_| {}).unwrap();
        assert!(out.log.is_empty());
        let ck = checkpoint::load(&checkpoint_path(dir.path(), 0)).unwrap();
        assert_eq!(ck.model.params, Model::<f32>::new(cfg.model, cfg.seed).unwrap().params);
    }
}
