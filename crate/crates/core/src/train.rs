//! SGD with momentum, cosine schedule and the per-epoch training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{augment, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::knowledge::argmax;
use crate::model::{Mode, Model, TrainOutcome};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub mu: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Suppressed tokens per image when peak suppression is on.
    pub top_k: usize,
    /// Zero padding before the random crop.
    pub pad: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("mu", "must be finite and nonnegative"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Classic momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Contract("momentum buffers do not match the model".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Updates every parameter from its grad slot, in registration order.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let (m, lr) = (T::lit(self.momentum), T::lit(lr));
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for ((t, v), name) in store.tensors_mut().zip(&mut self.velocity).zip(names) {
            let g = t
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` has no gradient")))?
                .to_vec();
            for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = m * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_kl: Option<f64>,
    pub loss_rep: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `[truth][prediction]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of images whose most similar class embedding is the label;
    /// `None` without knowledge guidance.
    pub knowledge_accuracy: Option<f64>,
}

/// Top-1 accuracy, confusion matrix and knowledge-argmax accuracy of the
/// unsuppressed forward.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, threads: usize) -> Result<Evaluation> {
    let g = model.config().classes;
    let results = parallel_map(data.len(), threads, |i| {
        let a = model.infer(&data.image::<T>(i))?.artifacts;
        Ok((a.prediction(), a.knowledge_prediction()))
    })?;
    let mut confusion = vec![vec![0u64; g]; g];
    let (mut hits, mut khits) = (0usize, 0usize);
    for (i, (pred, kpred)) in results.iter().enumerate() {
        let label = data.labels[i];
        if label >= g {
            return Err(Error::Index {
                what: "label",
                index: label,
                len: g,
            });
        }
        confusion[label][*pred] += 1;
        hits += usize::from(*pred == label);
        khits += usize::from(*kpred == Some(label));
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: hits as f64 / n,
        confusion,
        knowledge_accuracy: model
            .mode()
            .knowledge_guidance()
            .then_some(khits as f64 / n),
    })
}

/// Runs `f` over `0..n`, splitting the range into contiguous chunks across
/// up to `threads` scoped threads. Results come back in index order.
fn parallel_map<R: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * chunk).min(n)..((t + 1) * chunk).min(n);
                s.spawn(move || range.map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Model, optimizer state and position in the schedule.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub sgd: Sgd<T>,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub threads: usize,
    pub record_wall_time: bool,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != model.mode() {
            return Err(Error::config(
                "mode",
                format!("model built for {}, training config says {}", model.mode(), cfg.mode),
            ));
        }
        let sgd = Sgd::new(&model.store, cfg.momentum);
        Ok(Self {
            model,
            sgd,
            cfg,
            epoch: 0,
            step: 0,
            threads: 1,
            record_wall_time: false,
        })
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.cfg.batch) as u64
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        self.steps_per_epoch(train_len) * self.cfg.epochs as u64
    }

    /// Sampling and augmentation stream of one epoch; depends only on the
    /// seed and the epoch index.
    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        rng
    }

    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let started = std::time::Instant::now();
        let mut rng = self.epoch_rng();
        let order = shuffled_indices(train.len(), &mut rng);
        let total = self.total_steps(train.len());
        let (mu, top_k) = (self.cfg.mu, self.cfg.top_k);

        let (mut loss_sum, mut kl_sum, mut rep_sum) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let mut lr = 0.0;
        for batch in order.chunks(self.cfg.batch) {
            let images: Vec<Tensor<T>> = batch
                .iter()
                .map(|&i| {
                    let view = augment(&train.images[i], train.shape, self.cfg.pad, &mut rng);
                    Tensor::new(train.shape.to_vec(), view.iter().map(|&v| T::lit(v)).collect())
                        .expect("augmented image keeps its shape")
                })
                .collect();
            let model = &self.model;
            let outcomes: Vec<TrainOutcome<T>> = parallel_map(batch.len(), self.threads, |k| {
                model.train_step(&images[k], train.labels[batch[k]], mu, top_k)
            })?;

            self.model.store.zero_grads();
            for (k, out) in outcomes.iter().enumerate() {
                self.model.store.accumulate(&out.grads);
                let a = &out.artifacts;
                loss_sum += a.loss_total.unwrap_or(0.0);
                kl_sum += a.loss_kl.unwrap_or(0.0);
                rep_sum += a.loss_rep.unwrap_or(0.0);
                correct += usize::from(argmax(&a.logits) == train.labels[batch[k]]);
            }
            let inv = T::lit(1.0 / batch.len() as f64);
            for t in self.model.store.tensors_mut() {
                t.scale_grad(inv);
            }
            lr = cosine_lr(self.step, total, self.cfg.lr0);
            self.sgd.step(&mut self.model.store, lr)?;
            self.step += 1;
            if let Some(name) = self.model.store.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter `{name}` after step {}",
                    self.step
                )));
            }
        }
        self.epoch += 1;

        let test_acc = evaluate(&self.model, test, self.threads)?.accuracy;
        let n = train.len() as f64;
        let kg = self.model.mode().knowledge_guidance();
        Ok(EpochMetrics {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss_total: loss_sum / n,
            loss_kl: kg.then_some(kl_sum / n),
            loss_rep: kg.then_some(rep_sum / n),
            train_acc: correct as f64 / n,
            test_acc,
            wall_ms: self
                .record_wall_time
                .then(|| started.elapsed().as_millis() as u64),
        })
    }

    /// Trains the remaining epochs, handing each record to `on_epoch`.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.train_epoch(train, test)?;
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}
