//! Training loop: AdamW with linear warmup, EMA shadow weights, checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{sample_training_window, TrainingSet};
use crate::edm::{draw_training_sigmas, prepare_training_batch, SigmaGrid, TrainingBatch};
use crate::error::{Error, Result};
use crate::forcing::assign_training_noise;
use crate::guidance::condition_dropout;
use crate::rng::streams;
use crate::sequence::{stack_frames, ConditionBundle, StackedSequence};
use crate::{parameter_gradients, EdmParams, NetConfig, NetWeights, Rng, Scalar, Tensor, UNet};

/// How per-step training noise levels are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Independent log-normal σ per step, each step clean with `clean_prob`.
    LogNormal,
    /// Independent uniform index over the `{0..K}` sampling grid.
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Window length in frames.
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f64,
    pub ema_decay: f64,
    /// Per-channel condition dropout probability.
    pub dropout: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub noise: NoiseMode,
    pub clean_prob: f64,
    /// Grid size used by [`NoiseMode::Discrete`].
    pub levels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 64,
            batch_size: 8,
            steps: 50_000,
            warmup: 5000,
            lr: 4e-4,
            ema_decay: 0.999,
            dropout: 0.1,
            seed: 0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            grad_clip: 1.0,
            noise: NoiseMode::LogNormal,
            clean_prob: 0.1,
            levels: 35,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.seq_len == 0 || self.batch_size == 0 {
            return bad("seq_len and batch_size must be positive");
        }
        if self.warmup > self.steps {
            return bad("warmup must not exceed the total step count");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.clean_prob) {
            return bad("dropout must lie in [0, 1] and clean_prob in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if self.noise == NoiseMode::Discrete && self.levels == 0 {
            return bad("discrete noise needs at least one level");
        }
        Ok(())
    }

    /// Learning rate for the update taken at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            self.lr * step as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

/// One sampled batch of stacked windows with their condition bundles.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub id: u64,
    pub windows: Vec<StackedSequence<T>>,
    pub bundles: Vec<ConditionBundle<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Raw weights, EMA shadow and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub weights: NetWeights<T>,
    pub ema: NetWeights<T>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates taken so far.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(weights: NetWeights<T>) -> Self {
        let zeros: Vec<Tensor<T>> = weights.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            ema: weights.clone(),
            m: zeros.clone(),
            v: zeros,
            weights,
            step: 0,
        }
    }
}

pub struct Trainer<T> {
    pub net: UNet<T>,
    pub config: TrainConfig,
    pub edm: EdmParams,
    pub state: TrainState<T>,
    grid: Option<SigmaGrid>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh network initialized from the training seed.
    pub fn new(net_config: NetConfig, config: TrainConfig, edm: EdmParams) -> Result<Self> {
        let mut rng = Rng::new(config.seed, streams::INIT);
        let (net, weights) = UNet::new(net_config, &mut rng)?;
        Self::from_state(net, config, edm, TrainState::new(weights))
    }

    pub fn from_state(net: UNet<T>, config: TrainConfig, edm: EdmParams, state: TrainState<T>) -> Result<Self> {
        config.validate()?;
        edm.validate()?;
        if config.seq_len % net.config().stack != 0 {
            return Err(Error::NotDivisible {
                len: config.seq_len,
                stack: net.config().stack,
                remainder: config.seq_len % net.config().stack,
            });
        }
        let grid = match config.noise {
            NoiseMode::Discrete => Some(SigmaGrid::karras(config.levels, &edm)?),
            NoiseMode::LogNormal => None,
        };
        let w = &state.weights;
        if state.m.len() != w.len() || state.v.len() != w.len() {
            return Err(Error::Shape("optimizer state does not match the weights".into()));
        }
        UNet::<T>::with_weights(net.config().clone(), w)?;
        w.check_compatible(&state.ema)?;
        Ok(Trainer {
            net,
            config,
            edm,
            state,
            grid,
        })
    }

    /// Batch for the next step, drawn from the `(seed, step)` batch stream.
    pub fn sample_batch(&self, set: &TrainingSet<T>) -> Result<Batch<T>> {
        let id = self.state.step;
        let mut rng = Rng::new(self.config.seed, streams::BATCH).fork(id);
        let stack = self.net.config().stack;
        let mut windows = Vec::with_capacity(self.config.batch_size);
        let mut bundles = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (x, c) = sample_training_window(set, self.config.seq_len, &mut rng)?;
            windows.push(stack_frames(&x, stack)?);
            bundles.push(c);
        }
        Ok(Batch { id, windows, bundles })
    }

    /// Noise levels for every `(window, step)` of a batch.
    fn draw_sigmas(&self, count: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        match &self.grid {
            None => Ok(draw_training_sigmas(count, &self.edm, self.config.clean_prob, rng)),
            Some(grid) => {
                let mut idx = assign_training_noise(count, grid.steps(), rng)?;
                // at least one noisy step keeps the loss defined
                if idx.iter().all(|&k| k == 0) {
                    let i = rng.below(count);
                    idx[i] = 1 + rng.below(grid.steps());
                }
                Ok(idx.into_iter().map(|k| grid.level(k)).collect())
            }
        }
    }

    /// Dropout, noise assignment and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepStats> {
        let step = self.state.step;
        let mut drop_rng = Rng::new(self.config.seed, streams::DROPOUT).fork(step);
        let mut noise_rng = Rng::new(self.config.seed, streams::NOISE).fork(step);
        let bundles: Vec<_> = batch
            .bundles
            .iter()
            .map(|b| condition_dropout(b, self.config.dropout, &mut drop_rng))
            .collect();
        let steps = batch.windows.first().map_or(0, StackedSequence::steps);
        let sigmas = self.draw_sigmas(batch.windows.len() * steps, &mut noise_rng)?;
        let prepared = prepare_training_batch(&batch.windows, &sigmas, &self.edm, &mut noise_rng)?;
        self.apply(&prepared, &bundles, batch.id)
    }

    /// One update on a fully prepared batch (fixed noise), used for overfitting checks.
    pub fn apply(&mut self, prepared: &TrainingBatch<T>, bundles: &[ConditionBundle<T>], batch_id: u64) -> Result<StepStats> {
        let step = self.state.step;
        let fault = |detail: String| Error::TrainingFault {
            step,
            batch: batch_id,
            detail,
            sigmas: prepared.sigmas.iter().map(|s| s.as_f64()).collect(),
        };
        let (loss, grads) = {
            let mut g = Graph::new(self.state.weights.tensors());
            let out = self.net.build(&mut g, &prepared.input(bundles))?;
            let loss = g.weighted_mse(out, prepared.target_tensor(), prepared.weight_tensor())?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(fault(format!("loss is {}", value.as_f64())));
            }
            let grads = parameter_gradients(g.backward(loss)?, &self.state.weights)
                .map_err(|e| fault(e.to_string()))?;
            (value.as_f64(), grads)
        };
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            self.config.grad_clip / grad_norm
        } else {
            1.0
        };
        let lr = self.config.lr_at(step);
        self.adamw(&grads, clip, lr);
        if !self.state.weights.all_finite() {
            return Err(fault("weights became non-finite".into()));
        }
        self.update_ema();
        self.state.step += 1;
        Ok(StepStats {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    fn adamw(&mut self, grads: &[Tensor<T>], clip: f64, lr: f64) {
        let c = &self.config;
        let t = (self.state.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let s = &mut self.state;
        for (i, g) in grads.iter().enumerate() {
            let w = &mut s.weights.tensors_mut()[i];
            // decay only matrices and kernels
            let wd = if w.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (s.m[i].data_mut(), s.v[i].data_mut());
            for (j, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64() * clip;
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gv;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gv * gv;
                m[j] = T::c(mj);
                v[j] = T::c(vj);
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + c.eps) + wd * wv.as_f64();
                *wv = T::c(wv.as_f64() - lr * upd);
            }
        }
    }

    fn update_ema(&mut self) {
        let d = self.config.ema_decay;
        let s = &mut self.state;
        for (e, w) in s.ema.tensors_mut().iter_mut().zip(s.weights.tensors()) {
            for (ev, &wv) in e.data_mut().iter_mut().zip(w.data()) {
                *ev = T::c(d * ev.as_f64() + (1.0 - d) * wv.as_f64());
            }
        }
    }

    /// Repeats updates on one batch with its noise drawn once and no dropout.
    pub fn overfit(&mut self, batch: &Batch<T>, updates: u64) -> Result<Vec<StepStats>> {
        let mut rng = Rng::new(self.config.seed, streams::NOISE).fork(batch.id);
        let steps = batch.windows.first().map_or(0, StackedSequence::steps);
        let sigmas = self.draw_sigmas(batch.windows.len() * steps, &mut rng)?;
        let prepared = prepare_training_batch(&batch.windows, &sigmas, &self.edm, &mut rng)?;
        (0..updates).map(|_| self.apply(&prepared, &batch.bundles, batch.id)).collect()
    }

    /// Trains until `until` updates have been taken, writing one JSON line per step.
    pub fn fit(&mut self, set: &TrainingSet<T>, until: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepStats>> {
        let mut out = Vec::new();
        while self.state.step < until {
            let batch = self.sample_batch(set)?;
            let stats = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &stats)?;
                w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
            }
            out.push(stats);
        }
        Ok(out)
    }

    pub fn checkpoint(&self, manifest_hash: &str) -> Checkpoint<T> {
        Checkpoint {
            net: self.net.config().clone(),
            train: self.config.clone(),
            edm: self.edm.clone(),
            manifest_hash: manifest_hash.to_string(),
            state: self.state.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let net = UNet::with_weights(ck.net.clone(), &ck.state.weights)?;
        Self::from_state(net, ck.train, ck.edm, ck.state)
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub edm: EdmParams,
    pub manifest_hash: String,
    pub state: TrainState<T>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    net: NetConfig,
    train: TrainConfig,
    edm: EdmParams,
    manifest_hash: String,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Layout: magic, u32 version, u64 header length, JSON header, then the raw
/// weights, EMA weights, first and second moments as f64 LE in header order.
pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let s = &ck.state;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        step: s.step,
        net: ck.net.clone(),
        train: ck.train.clone(),
        edm: ck.edm.clone(),
        manifest_hash: ck.manifest_hash.clone(),
        tensors: s
            .weights
            .names()
            .iter()
            .zip(s.weights.tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let groups: [&[Tensor<T>]; 4] = [s.weights.tensors(), s.ema.tensors(), &s.m, &s.v];
    for group in groups {
        for t in group {
            for &x in t.data() {
                buf.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = format!("checkpoint {}", path.display());
    let short = |need: usize| Error::Truncated {
        id: what.clone(),
        expected: need,
        found: bytes.len(),
    };
    if bytes.len() < 16 {
        return Err(short(16));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Magic(what));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + hlen {
        return Err(short(16 + hlen));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
    if header.format_version != version {
        return Err(Error::Data(format!("{what}: header version disagrees with the preamble")));
    }
    let per: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let need = 16 + hlen + 4 * per * 8;
    if bytes.len() != need {
        return Err(short(need));
    }
    let mut pos = 16 + hlen;
    let mut read_group = || -> Result<Vec<Tensor<T>>> {
        header
            .tensors
            .iter()
            .map(|(_, shape)| {
                let n: usize = shape.iter().product();
                let data = bytes[pos..pos + 8 * n]
                    .chunks_exact(8)
                    .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect();
                pos += 8 * n;
                Tensor::new(shape.clone(), data)
            })
            .collect()
    };
    let names: Vec<String> = header.tensors.iter().map(|(n, _)| n.clone()).collect();
    let weights = NetWeights::from_parts(names.clone(), read_group()?)?;
    let ema = NetWeights::from_parts(names, read_group()?)?;
    let m = read_group()?;
    let v = read_group()?;
    Ok(Checkpoint {
        net: header.net,
        train: header.train,
        edm: header.edm,
        manifest_hash: header.manifest_hash,
        state: TrainState {
            weights,
            ema,
            m,
            v,
            step: header.step,
        },
    })
}
