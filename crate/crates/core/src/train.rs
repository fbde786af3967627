//! Teacher-forced training with Adam.
//!
//! A step evaluates its batch's segments in parallel, then reduces the
//! per-segment gradients sequentially in batch order, weighting each segment
//! by its number of scored positions. Shuffling and dropout masks come from
//! counter-derived seeds, so a run is reproducible from (seed, epoch, batch).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::dataset::EncodedSegment;
use crate::error::{Error, Result};
use crate::model::{LossTargets, Model, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 10,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam betas must be in [0, 1) and eps positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam step. Arithmetic runs in f64 per element.
pub fn adam_update(params: &mut ParamStore<f32>, grads: &[Vec<f64>], state: &mut AdamState, h: AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("gradient list does not match the parameters"));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.tensor.len() {
            return Err(Error::invalid(format!("gradient for {} has the wrong shape", p.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powf(state.t as f64);
    let bc2 = 1.0 - h.beta2.powf(state.t as f64);
    for (k, p) in params.iter_mut().enumerate() {
        let g = &grads[k];
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * g[i];
            let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * g[i] * g[i];
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = h.lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Position in the schedule: the next step runs batch `batch` of `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

/// Errors unless a dataset of `data` kind can feed a `model` kind.
pub fn check_kinds(data: ModelKind, model: ModelKind) -> Result<()> {
    if data != model {
        return Err(Error::KindMismatch(format!(
            "dataset was prepared for {data} but the model is {model}"
        )));
    }
    Ok(())
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined counters
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub progress: Progress,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            config,
            adam,
            progress: Progress::default(),
            started: Instant::now(),
        })
    }

    pub fn resume(model: Model<f32>, config: TrainConfig, adam: AdamState, progress: Progress) -> Result<Self> {
        config.validate()?;
        if adam.m.len() != model.params().len() || adam.v.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Trainer {
            model,
            config,
            adam,
            progress,
            started: Instant::now(),
        })
    }

    /// Segments that contribute at least one scored position.
    fn usable(&self, data: &[EncodedSegment]) -> Vec<usize> {
        let kind = self.model.config().kind;
        (0..data.len())
            .filter(|&i| targets_for(kind, &data[i]).count() > 0)
            .collect()
    }

    fn epoch_order(&self, usable: &[usize], epoch: usize) -> Vec<usize> {
        let mut order = usable.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        order
    }

    fn batches_per_epoch(&self, usable: usize) -> usize {
        usable.div_ceil(self.config.batch_size)
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.config.max_epochs
    }

    /// Runs the next batch of the schedule.
    pub fn step(&mut self, data: &[EncodedSegment]) -> Result<StepRecord> {
        let usable = self.usable(data);
        if usable.is_empty() {
            return Err(Error::invalid("no segment has a scored position"));
        }
        self.step_with(data, &usable)
    }

    fn step_with(&mut self, data: &[EncodedSegment], usable: &[usize]) -> Result<StepRecord> {
        let t0 = Instant::now();
        let Progress { epoch, batch, step } = self.progress;
        let order = self.epoch_order(usable, epoch);
        let bs = self.config.batch_size;
        let members = &order[batch * bs..((batch + 1) * bs).min(order.len())];
        let kind = self.model.config().kind;
        let dropout = self.model.config().dropout > 0.0;
        let seed = self.config.seed;
        let model = &self.model;
        let results: Vec<(f64, usize, Vec<Tensor<f32>>)> = members
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let seg = &data[i];
                let targets = targets_for(kind, seg);
                let dseed = dropout.then(|| mix(seed, step + 1, slot as u64 + 1));
                model.loss_and_grads(&seg.input, &targets, dseed)
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            })?;

        let total: usize = results.iter().map(|r| r.1).sum();
        let mut grads: Vec<Vec<f64>> = self.model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let mut loss = 0.0;
        for (l, count, g) in &results {
            let w = *count as f64 / total as f64;
            loss += w * l;
            for (acc, gt) in grads.iter_mut().zip(g) {
                for (a, &x) in acc.iter_mut().zip(gt.data()) {
                    *a += w * x as f64;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if norm > self.config.clip_norm {
            let s = self.config.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|x| *x *= s);
        }
        adam_update(self.model.params_mut(), &grads, &mut self.adam, AdamHyper::from(&self.config))
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            })?;

        let tokens: usize = members.iter().map(|&i| data[i].input.len()).sum();
        self.progress.step += 1;
        self.progress.batch += 1;
        if self.progress.batch >= self.batches_per_epoch(usable.len()) {
            self.progress.batch = 0;
            self.progress.epoch += 1;
        }
        let secs = t0.elapsed().as_secs_f64();
        Ok(StepRecord {
            step,
            epoch,
            loss,
            lr: self.config.learning_rate,
            grad_norm: norm,
            tokens,
            tokens_per_sec: tokens as f64 / secs.max(1e-9),
            wall_clock: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Finishes the current epoch. The mean loss is the token-weighted mean
    /// of the step losses, summed in step order.
    pub fn train_epoch(&mut self, data: &[EncodedSegment], on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<EpochStats> {
        let usable = self.usable(data);
        if usable.is_empty() {
            return Err(Error::invalid("no segment has a scored position"));
        }
        let epoch = self.progress.epoch;
        let t0 = Instant::now();
        let (mut loss_sum, mut tokens, mut count) = (0.0, 0usize, 0usize);
        while self.progress.epoch == epoch {
            let rec = self.step_with(data, &usable)?;
            loss_sum += rec.loss * rec.tokens as f64;
            tokens += rec.tokens;
            count += 1;
            on_step(&rec)?;
        }
        debug_assert!(count > 0);
        Ok(EpochStats {
            epoch,
            mean_loss: loss_sum / tokens as f64,
            tokens,
            tokens_per_sec: tokens as f64 / t0.elapsed().as_secs_f64().max(1e-9),
        })
    }

    /// Trains until `max_epochs` is reached.
    pub fn fit(&mut self, data: &[EncodedSegment], on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while !self.finished() {
            out.push(self.train_epoch(data, on_step)?);
        }
        Ok(out)
    }
}

pub fn targets_for(kind: ModelKind, seg: &EncodedSegment) -> LossTargets {
    LossTargets::new(kind, &seg.input.ids, &seg.loss_mask, &seg.leaf_flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(1, values.len(), values.to_vec()).unwrap()).unwrap();
        s
    }

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper::from(&TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        })
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &[vec![0.0, 0.0]], &mut st, hyper(1e-3)).unwrap();
        assert_eq!(p.tensor(crate::autodiff::ParamId(0)).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut p = store(&[1.0, 1.0]);
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &[vec![0.5, -3.0]], &mut st, hyper(0.1)).unwrap();
        let d = p.tensor(crate::autodiff::ParamId(0)).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn sum_of_squares_decreases() {
        let mut p = store(&[1.5, -0.5, 2.0]);
        let mut st = AdamState::new(&p);
        let id = crate::autodiff::ParamId(0);
        let f = |p: &ParamStore<f32>| p.tensor(id).data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        let mut last = f(&p);
        for _ in 0..10 {
            let g = vec![p.tensor(id).data().iter().map(|&x| 2.0 * x as f64).collect()];
            adam_update(&mut p, &g, &mut st, hyper(0.05)).unwrap();
            let now = f(&p);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        let err = adam_update(&mut p, &[vec![f64::NAN]], &mut st, hyper(1e-3)).unwrap_err();
        assert!(err.to_string().contains("x"), "{err}");
    }

    #[test]
    fn kind_check_message() {
        assert!(check_kinds(ModelKind::Trav, ModelKind::Trav).is_ok());
        let e = check_kinds(ModelKind::RootPath, ModelKind::Trav).unwrap_err();
        assert!(e.to_string().starts_with("kind mismatch"));
    }
}
