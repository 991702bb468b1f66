//! Set-prediction training with AdamW and a step-decay schedule.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use numcore::{checkpoint, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::config::RunConfig;
use crate::harness::data::{self, flip_horizontal, SyntheticScene};
use crate::harness::eval::{class_counts, evaluate, EvalReport, HoiClass, Setting};
use crate::matching::{set_loss_graph, GroundTruthInstance};
use crate::model::{stack, Model};
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::{contract, Error, Result};

pub const CONFIG_RECORD: &str = "meta.config";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `lr` gives the rate of each parameter group.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: impl Fn(Group) -> f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads {
            let e = store.entry(*id);
            let rate = lr(e.group);
            let decay = if e.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.values_mut(*id);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= rate * (update + decay * p[i]);
            }
        }
    }
}

/// Scales gradients so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Multiplier of the base learning rates during `epoch` (0-based).
pub fn lr_factor(milestones: &[usize], decay: f64, epoch: usize) -> f64 {
    decay.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
}

/// A model with its optimiser state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    pub steps: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        let opt = AdamW::new(&model.store, cfg.train.weight_decay);
        Ok(Self {
            cfg,
            model,
            opt,
            steps: 0,
        })
    }

    /// One optimisation step on `scenes`; returns the loss per ground-truth
    /// instance before the update.
    pub fn step(&mut self, scenes: &[&SyntheticScene], epoch: usize) -> Result<f64> {
        let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
        let gts: Vec<Vec<GroundTruthInstance>> = scenes.iter().map(|s| s.instances.clone()).collect();
        let count = gts.iter().map(Vec::len).sum::<usize>().max(1);
        let (loss, mut grads) = {
            let mut s = Session::new(&self.model.store);
            let x = s.constant(stack(&images)?);
            let f = self.model.forward(&mut s, x)?;
            let (total, _) = set_loss_graph(&mut s, &f.outputs, self.cfg.model.num_queries, &gts, &self.cfg.loss)?;
            let loss = s.scale(total, 1.0 / count as f64);
            let value = s.value(loss).item();
            if !value.is_finite() {
                let op = s.first_non_finite().map_or("loss", |(_, name)| name);
                return Err(Error::Diverged {
                    step: self.steps,
                    op: op.to_string(),
                });
            }
            let mut g = s.backward(loss)?;
            (value, s.param_grads(&mut g))
        };
        clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        let t = &self.cfg.train;
        let factor = lr_factor(&t.milestones, t.lr_decay, epoch);
        let (lr, lr_backbone) = (t.lr * factor, t.lr_backbone * factor);
        self.opt.update(&mut self.model.store, &grads, |g| match g {
            Group::Backbone => lr_backbone,
            Group::Transformer => lr,
        });
        self.steps += 1;
        Ok(loss)
    }
}

/// Scenes split into training and held-out sets.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
}

impl Split {
    /// Loads `data_dir` when configured, else generates from `data_seed`.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let t = &cfg.train;
        let mut scenes = match &t.data_dir {
            Some(dir) => {
                let (scenes, gen) = data::load_dataset(dir)?;
                if gen != cfg.gen_config() {
                    return Err(Error::Config(format!(
                        "dataset {} does not match the model configuration",
                        dir.display()
                    )));
                }
                scenes
            }
            None => data::generate(t.data_seed, t.train_scenes + t.val_scenes, &cfg.gen_config())?,
        };
        if scenes.len() < t.train_scenes + t.val_scenes {
            return Err(Error::Config(format!(
                "{} scenes available, {} requested",
                scenes.len(),
                t.train_scenes + t.val_scenes
            )));
        }
        scenes.truncate(t.train_scenes + t.val_scenes);
        let val = scenes.split_off(t.train_scenes);
        Ok(Self { train: scenes, val })
    }

    pub fn training_counts(&self) -> std::collections::BTreeMap<HoiClass, usize> {
        class_counts(&self.train.iter().map(|s| s.instances.clone()).collect::<Vec<_>>())
    }
}

/// Predictions for `scenes` in batches of `batch`.
pub fn predict_scenes(
    model: &Model,
    scenes: &[SyntheticScene],
    batch: usize,
) -> Result<Vec<Vec<crate::matching::HoiPrediction>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.predict(&images)?);
    }
    Ok(out)
}

pub fn evaluate_model(
    model: &Model,
    scenes: &[SyntheticScene],
    setting: Setting,
    training: Option<&std::collections::BTreeMap<HoiClass, usize>>,
) -> Result<EvalReport> {
    let preds = predict_scenes(model, scenes, 16)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.instances.clone()).collect();
    Ok(evaluate(&preds, &gts, setting, training))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimisation steps completed.
    pub step: usize,
    /// Mean step loss over the epoch.
    pub loss: f64,
    /// Transformer learning rate during the epoch.
    pub lr: f64,
    pub map_full: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub best_map: f64,
    pub best_epoch: Option<usize>,
    pub reached_target: bool,
    /// Parameters of the best held-out epoch (the final ones if never
    /// evaluated).
    pub best: Model,
}

/// Trains on `split.train`, evaluating on `split.val`. With `out`, writes
/// the metrics log and the best and final checkpoints there.
pub fn train(cfg: &RunConfig, split: &Split, out: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return Err(contract("training set is empty"));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let t = &cfg.train;
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "epoch\tstep\tloss\tlr\tmAP_full")?;
            Some(f)
        }
        None => None,
    };
    let counts = split.training_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::with_capacity(t.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut reached_target = false;
    for epoch in 0..t.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(t.batch_size) {
            let flipped: Vec<SyntheticScene> = chunk
                .iter()
                .map(|&i| {
                    let s = &split.train[i];
                    if t.flip && rng.random_bool(0.5) {
                        flip_horizontal(s)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&SyntheticScene> = flipped.iter().collect();
            losses.push(trainer.step(&refs, epoch)?);
        }
        let last = epoch + 1 == t.epochs;
        let evaluate_now = !split.val.is_empty() && (last || (t.eval_every > 0 && (epoch + 1) % t.eval_every == 0));
        let map_full = if evaluate_now {
            Some(evaluate_model(&trainer.model, &split.val, Setting::Default, Some(&counts))?.map_full)
        } else {
            None
        };
        let log = EpochLog {
            epoch: epoch + 1,
            step: trainer.steps,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr: t.lr * lr_factor(&t.milestones, t.lr_decay, epoch),
            map_full,
        };
        if let Some(f) = metrics.as_mut() {
            let m = map_full.map_or("-".to_string(), |m| format!("{m:.6}"));
            writeln!(f, "{}\t{}\t{:.6}\t{:e}\t{}", log.epoch, log.step, log.loss, log.lr, m)?;
            f.flush()?;
        }
        on_epoch(&log);
        history.push(log);
        if let Some(m) = map_full {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                if let Some(dir) = out {
                    save_checkpoint(dir.join(BEST_CHECKPOINT), &trainer.model.store, cfg)?;
                }
                best = Some((m, epoch + 1, trainer.model.clone()));
            }
            if t.target_map.is_some_and(|target| m >= target) {
                reached_target = true;
                break;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), &trainer.model.store, cfg)?;
    }
    let (best_map, best_epoch, best) = match best {
        Some((m, e, model)) => (m, Some(e), model),
        None => (0.0, None, trainer.model),
    };
    Ok(TrainOutcome {
        history,
        best_map,
        best_epoch,
        reached_target,
        best,
    })
}

/// Writes all parameters plus the run configuration (as a byte record).
pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_string();
    let meta = Tensor::from_parts([text.len()], text.bytes().map(f64::from).collect());
    let mut records = store.records();
    records.push((CONFIG_RECORD, &meta));
    Ok(checkpoint::save(path, &records)?)
}

/// Rebuilds the model described by a checkpoint's embedded configuration.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, RunConfig)> {
    let records = checkpoint::load(path)?;
    let (_, meta) = records
        .iter()
        .find(|(n, _)| n == CONFIG_RECORD)
        .ok_or_else(|| contract("checkpoint carries no configuration"))?;
    let bytes: Vec<u8> = meta.data().iter().map(|&b| b as u8).collect();
    let text = String::from_utf8(bytes).map_err(|_| contract("checkpoint configuration is not utf-8"))?;
    let cfg: RunConfig = text.parse()?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    model.store.load_records(&records)?;
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_milestones() {
        let m = [50, 90, 120];
        assert_eq!(lr_factor(&m, 0.5, 0), 1.0);
        assert_eq!(lr_factor(&m, 0.5, 49), 1.0);
        assert_eq!(lr_factor(&m, 0.5, 50), 0.5);
        assert_eq!(lr_factor(&m, 0.5, 119), 0.25);
        assert_eq!(lr_factor(&m, 0.5, 149), 0.125);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros([2]), Group::Transformer, true);
        let mut g = vec![(a, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n = (g[0].1[0].powi(2) + g[0].1[1].powi(2)).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
