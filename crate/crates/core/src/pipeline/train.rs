//! Training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, Preset};
use crate::numerics::Tensor;
use crate::params::{Graph, ParamStore};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::optim::Adam;
use crate::sampling::{make_sd_labels, sample_clip, subsample, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Samples skipped because no clip could hold their labelled cycle.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss or gradient appeared in this epoch.
    Diverged { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last fully completed epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub status: TrainStatus,
}

/// Index lists for a 75 / 12.5 / 12.5 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 3).div_ceil(4);
    let n_val = (n - n_train) / 2;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

struct SampleResult {
    loss: f64,
    grads: Vec<Option<Tensor>>,
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    loss: LossConfig,
    store: ParamStore,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(preset: Preset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(preset, config.sd_mode)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let store = model.init(&mut init_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut optimizer = Adam::new(config.lr, &store);
        optimizer.clip_norm = config.grad_clip;
        Ok(Self {
            loss: config.loss_config(),
            model,
            config,
            store,
            optimizer,
            rng,
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint. `config` may change the epoch budget or
    /// learning rate but must keep the SD mode.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.sd_mode != ckpt.config.sd_mode {
            return Err(Error::Config("cannot change SD mode when resuming".into()));
        }
        let model = ckpt.model()?;
        let mut optimizer = Adam::new(config.lr, &ckpt.params);
        optimizer.clip_norm = config.grad_clip;
        optimizer.state = ckpt.optimizer;
        Ok(Self {
            loss: config.loss_config(),
            model,
            config,
            store: ckpt.params,
            optimizer,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            preset: *self.model.preset(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            params: self.store.clone(),
            optimizer: self.optimizer.state.clone(),
        }
    }

    fn sample(&self, video: &VideoRecord, seed: u64) -> Result<Option<SampleResult>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = match sample_clip(video, self.config.method, self.model.preset().num_frames(), &mut rng) {
            Ok(c) => c,
            Err(Error::SampleRejected(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let labels = make_sd_labels(&clip, self.model.sd_mode());
        let g = Graph::training(&self.store, ChaCha8Rng::seed_from_u64(rng.random()));
        let vars = self.model.forward(&g, &clip.frames, &clip.mask)?;
        let loss = self.model.loss(&g, &vars, &labels, &clip.mask, clip.ef_target, &self.loss)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        Ok(Some(SampleResult {
            loss: value,
            grads: g.param_grads(&mut grads),
        }))
    }

    fn run_batch(&self, batch: &[(&VideoRecord, u64)]) -> Result<Vec<Option<SampleResult>>> {
        if self.config.parallel {
            batch.par_iter().map(|(v, s)| self.sample(v, *s)).collect()
        } else {
            batch.iter().map(|(v, s)| self.sample(v, *s)).collect()
        }
    }

    /// One pass over `videos` (already subsampled). Returns mean loss and skip count.
    pub fn train_epoch(&mut self, videos: &[VideoRecord]) -> Result<(f64, usize)> {
        if videos.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        self.optimizer.lr = self.config.schedule.rate(self.config.lr, self.epoch, self.config.epochs);
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(&VideoRecord, u64)> =
                chunk.iter().map(|&i| (&videos[i], self.rng.random())).collect();
            let results = self.run_batch(&batch)?;
            let mut sum: Vec<Option<Tensor>> = vec![None; self.store.len()];
            let mut n = 0usize;
            for r in results {
                let Some(r) = r else {
                    skipped += 1;
                    continue;
                };
                if !r.loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                total += r.loss;
                n += 1;
                for (acc, g) in sum.iter_mut().zip(r.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            if n == 0 {
                continue;
            }
            used += n;
            let inv = 1.0 / n as f64;
            let grads: Vec<Option<Tensor>> =
                sum.into_iter().map(|g| g.map(|g| g.map(|x| x * inv))).collect();
            self.optimizer.step(&mut self.store, &grads)?;
        }
        self.epoch += 1;
        if used == 0 {
            return Err(Error::SampleRejected("no usable training sample".into()));
        }
        Ok((total / used as f64, skipped))
    }

    /// Mean clip loss without dropout, on clips drawn from a fixed seed.
    pub fn validation_loss(&self, videos: &[VideoRecord]) -> Result<Option<f64>> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (i, video) in videos.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
            rng.set_stream(i as u64);
            let clip = match sample_clip(video, self.config.method, self.model.preset().num_frames(), &mut rng) {
                Ok(c) => c,
                Err(Error::SampleRejected(_)) => continue,
                Err(e) => return Err(e),
            };
            let labels = make_sd_labels(&clip, self.model.sd_mode());
            let g = Graph::inference(&self.store);
            let vars = self.model.forward(&g, &clip.frames, &clip.mask)?;
            let loss = self.model.loss(&g, &vars, &labels, &clip.mask, clip.ef_target, &self.loss)?;
            total += g.value(loss).item();
            n += 1;
        }
        Ok((n > 0).then(|| total / n as f64))
    }

    /// Trains until `config.epochs` epochs have completed in total.
    pub fn run(
        &mut self,
        train: &[VideoRecord],
        val: &[VideoRecord],
        mut on_epoch: impl FnMut(&EpochStats, &Trainer),
    ) -> Result<TrainOutcome> {
        let prepare = |vs: &[VideoRecord]| -> Result<Vec<VideoRecord>> {
            vs.iter()
                .map(|v| {
                    let s = subsample(v);
                    s.validate()?;
                    Ok(s)
                })
                .collect()
        };
        let train = prepare(train)?;
        let val = prepare(val)?;
        let mut history = Vec::new();
        let mut last_good = self.checkpoint();
        while self.epoch < self.config.epochs {
            let (train_loss, skipped) = match self.train_epoch(&train) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    return Ok(TrainOutcome {
                        status: TrainStatus::Diverged {
                            epoch: last_good.epoch + 1,
                        },
                        checkpoint: last_good,
                        history,
                    })
                }
                Err(e) => return Err(e),
            };
            let stats = EpochStats {
                epoch: self.epoch,
                train_loss,
                val_loss: self.validation_loss(&val)?,
                skipped,
            };
            history.push(stats);
            last_good = self.checkpoint();
            on_epoch(&stats, self);
        }
        Ok(TrainOutcome {
            checkpoint: last_good,
            history,
            status: TrainStatus::Completed,
        })
    }
}

/// Trains a fresh model from `config`.
pub fn train(
    preset: Preset,
    config: TrainConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
) -> Result<TrainOutcome> {
    Trainer::new(preset, config)?.run(train, val, |_, _| {})
}
