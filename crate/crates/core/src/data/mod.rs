//! Synthetic dataset generation, preprocessing and on-disk format.

mod io;
mod synth;

pub use io::{load_dataset, read_sequence_record, save_dataset, write_sequence_record, FORMAT_VERSION, RECORD_MAGIC};
pub use synth::{
    emotion_offset, gen_stimuli, oracle_response, saturate, Segment, StimuliProfile, SubjectProfile, MAX_LEVEL,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::streams;
use crate::{ConditionBundle, LatentSequence, Rng, Scalar};

/// Dataset generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub dim: usize,
    /// Trailing dimensions holding jaw pose.
    pub jaw_dims: usize,
    pub jaw_scale: f64,
    pub frame_rate: f64,
    pub stack: usize,
    pub train_subjects: usize,
    pub validation_subjects: usize,
    /// Validation subjects drawn with low expressiveness.
    pub low_expressive_validation: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            dim: 53,
            jaw_dims: 3,
            jaw_scale: 100.0,
            frame_rate: 25.0,
            stack: 4,
            train_subjects: 40,
            validation_subjects: 10,
            low_expressive_validation: 2,
            min_frames: 800,
            max_frames: 960,
            noise_std: 0.02,
        }
    }
}

impl DataConfig {
    /// Small latent space used for CPU-scale runs.
    pub fn desk() -> Self {
        DataConfig {
            dim: 8,
            jaw_dims: 2,
            ..DataConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.jaw_dims >= self.dim {
            return fail(format!("need 0 <= jaw_dims < dim, got {} and {}", self.jaw_dims, self.dim));
        }
        if self.stack == 0 || self.frame_rate <= 0.0 || !self.frame_rate.is_finite() {
            return fail("stack and frame rate must be positive".into());
        }
        if self.jaw_scale <= 0.0 || !self.jaw_scale.is_finite() {
            return fail("jaw scale must be positive".into());
        }
        if self.train_subjects == 0 || self.low_expressive_validation > self.validation_subjects {
            return fail("need training subjects and at most as many low-expressive as validation subjects".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames || self.min_frames % self.stack != 0 {
            return fail(format!(
                "frame range {}..={} must be non-empty and start on a multiple of the stack {}",
                self.min_frames, self.max_frames, self.stack
            ));
        }
        if self.noise_std < 0.0 {
            return fail("noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub expressiveness: f64,
    pub emotion: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub subject: String,
    pub frames: usize,
}

/// Everything needed to interpret the sequence records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dim: usize,
    pub frame_rate: f64,
    pub stack: usize,
    /// Dimensions multiplied by `jaw_scale` before standardization.
    pub jaw_dims: Vec<usize>,
    pub jaw_scale: f64,
    pub subjects: Vec<SubjectEntry>,
    pub sequences: Vec<SequenceEntry>,
    /// Per-dimension statistics of the jaw-scaled training split.
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default)]
    pub std: Vec<f64>,
    /// Intensity extraction weights over raw latents.
    #[serde(default)]
    pub extraction: Vec<f64>,
    /// Generator settings, when synthetic.
    #[serde(default)]
    pub generator: Option<DataConfig>,
}

impl DatasetManifest {
    pub fn subject(&self, id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn subject_ids(&self, split: Split) -> Vec<&str> {
        self.subjects.iter().filter(|s| s.split == split).map(|s| s.id.as_str()).collect()
    }

    pub fn has_stats(&self) -> bool {
        self.mean.len() == self.dim && self.std.len() == self.dim
    }

    fn check_stats(&self) -> Result<()> {
        if !self.has_stats() {
            return Err(Error::Data("manifest has no standardization statistics".into()));
        }
        if let Some(dim) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ZeroStd { dim });
        }
        Ok(())
    }

    fn jaw_factor(&self) -> Vec<f64> {
        let mut f = vec![1.0; self.dim];
        for &j in &self.jaw_dims {
            f[j] = self.jaw_scale;
        }
        f
    }

    /// Stable content hash of the manifest.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Jaw scaling followed by per-dimension standardization.
pub fn standardize<T: Scalar>(x: &LatentSequence<T>, manifest: &DatasetManifest) -> Result<LatentSequence<T>> {
    manifest.check_stats()?;
    check_dim(x.dim(), manifest)?;
    let f = manifest.jaw_factor();
    Ok(x.map(|k, v| T::c((v.as_f64() * f[k] - manifest.mean[k]) / manifest.std[k])))
}

/// Exact inverse of [`standardize`] (up to rounding).
pub fn destandardize<T: Scalar>(x: &LatentSequence<T>, manifest: &DatasetManifest) -> Result<LatentSequence<T>> {
    manifest.check_stats()?;
    check_dim(x.dim(), manifest)?;
    let f = manifest.jaw_factor();
    Ok(x.map(|k, v| T::c((v.as_f64() * manifest.std[k] + manifest.mean[k]) / f[k])))
}

fn check_dim(dim: usize, manifest: &DatasetManifest) -> Result<()> {
    if dim != manifest.dim {
        return Err(Error::Shape(format!("latents have {dim} dims, dataset has {}", manifest.dim)));
    }
    Ok(())
}

/// One recorded sequence with its stimulus track.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub subject: String,
    /// Raw (unscaled, unstandardized) latents.
    pub latents: LatentSequence<f64>,
    pub stimuli: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn record(&self, id: &str) -> Option<&SequenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.records
            .iter()
            .filter(move |r| self.manifest.subject(&r.subject).is_some_and(|s| s.split == split))
    }

    /// Full-length condition bundle for a record.
    pub fn bundle<T: Scalar>(&self, record: &SequenceRecord) -> Result<ConditionBundle<T>> {
        let s = self
            .manifest
            .subject(&record.subject)
            .ok_or_else(|| Error::Data(format!("unknown subject {}", record.subject)))?;
        Ok(ConditionBundle::new(
            record.stimuli.iter().map(|&v| T::c(v)).collect(),
            T::c(s.expressiveness),
            T::c(s.emotion),
        ))
    }

    /// Computes standardization statistics from the training split only.
    pub fn compute_stats(&mut self) -> Result<()> {
        let m = &self.manifest;
        let d = m.dim;
        let f = m.jaw_factor();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for r in self.records_in(Split::Train) {
            for row in r.latents.rows() {
                for k in 0..d {
                    sum[k] += row[k] * f[k];
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::Data("training split has fewer than two frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        // second pass for a numerically clean variance
        let mut var = vec![0.0; d];
        for r in self.records_in(Split::Train) {
            for row in r.latents.rows() {
                for k in 0..d {
                    var[k] += (row[k] * f[k] - mean[k]).powi(2);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        if let Some(dim) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ZeroStd { dim });
        }
        self.manifest.mean = mean;
        self.manifest.std = std;
        Ok(())
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.uniform_range(lo, hi)
}

/// Generates the synthetic dataset. Latents are rounded to single precision
/// so that the in-memory dataset equals what the binary records hold.
pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let d = config.dim;
    let mut rng = Rng::new(config.seed, streams::DATA);
    let jaw: Vec<usize> = (d - config.jaw_dims..d).collect();
    let base: Vec<f64> = (0..d)
        .map(|k| {
            let mag = uniform(&mut rng, 0.5, 1.5);
            let sign = if rng.bernoulli(0.3) { -1.0 } else { 1.0 };
            let raw = if jaw.contains(&k) { 0.01 } else { 1.0 };
            sign * mag * raw
        })
        .collect();
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    let extraction: Vec<f64> = base.iter().map(|v| v / norm).collect();

    let total = config.train_subjects + config.validation_subjects;
    let mut subjects = Vec::with_capacity(total);
    let mut sequences = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let mut srng = rng.fork(i as u64);
        let split = if i < config.train_subjects {
            Split::Train
        } else {
            Split::Validation
        };
        let low = match split {
            Split::Train => i % 5 == 0,
            Split::Validation => i - config.train_subjects < config.low_expressive_validation,
        };
        let expressiveness = if low {
            uniform(&mut srng, 0.15, 0.4)
        } else {
            uniform(&mut srng, 0.7, 1.6)
        };
        let emotion = uniform(&mut srng, -1.0, 1.0);
        let gain: Vec<f64> = base.iter().map(|g| g * (1.0 + 0.1 * uniform(&mut srng, -1.0, 1.0))).collect();
        let profile = SubjectProfile {
            expressiveness,
            emotion,
            response_gain: gain,
            latency_frames: 3 + srng.below(10),
            decay: uniform(&mut srng, 0.85, 0.93),
            noise_std: config.noise_std,
        };
        let span = (config.max_frames - config.min_frames) / config.stack;
        let frames = config.min_frames + config.stack * srng.below(span + 1);
        let mut stimuli = gen_stimuli(&StimuliProfile::random(frames, &mut srng))?;
        stimuli.truncate(frames);
        let latents = oracle_response_scaled(&stimuli, &profile, &jaw, config.frame_rate, &mut srng)?;
        let id = format!("s{i:03}");
        subjects.push(SubjectEntry {
            id: id.clone(),
            expressiveness,
            emotion,
            split,
        });
        sequences.push(SequenceEntry {
            id: id.clone(),
            subject: id.clone(),
            frames,
        });
        records.push(SequenceRecord {
            id: id.clone(),
            subject: id,
            latents,
            stimuli,
        });
    }
    let mut ds = Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            dim: d,
            frame_rate: config.frame_rate,
            stack: config.stack,
            jaw_dims: jaw,
            jaw_scale: config.jaw_scale,
            subjects,
            sequences,
            mean: Vec::new(),
            std: Vec::new(),
            extraction,
            generator: Some(config.clone()),
        },
        records,
    };
    ds.compute_stats()?;
    Ok(ds)
}

/// Oracle response whose observation noise on jaw dimensions is scaled like
/// their gains, then rounded to single precision.
fn oracle_response_scaled(
    stimuli: &[f64],
    subject: &SubjectProfile,
    jaw: &[usize],
    frame_rate: f64,
    rng: &mut Rng,
) -> Result<LatentSequence<f64>> {
    let clean = SubjectProfile {
        noise_std: 0.0,
        ..subject.clone()
    };
    let mut y = oracle_response(stimuli, &clean, frame_rate, rng)?.into_vec();
    // the noise enters the recursion, so replay it as an AR(1) process
    let d = subject.dim();
    let mut acc = vec![0.0; d];
    for row in y.chunks_mut(d) {
        for k in 0..d {
            let scale = if jaw.contains(&k) { 0.01 } else { 1.0 };
            acc[k] = subject.decay * acc[k] + subject.noise_std * scale * rng.normal();
            row[k] = ((row[k] + acc[k]) as f32) as f64;
        }
    }
    LatentSequence::new(y, stimuli.len(), d, frame_rate)
}

/// Standardized training sequences with their conditions, ready for windowing.
#[derive(Clone, Debug)]
pub struct TrainingSet<T> {
    pub items: Vec<TrainingItem<T>>,
    pub dim: usize,
    pub frame_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingItem<T> {
    pub id: String,
    pub latents: LatentSequence<T>,
    pub bundle: ConditionBundle<T>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn from_dataset(ds: &Dataset, split: Split) -> Result<Self> {
        let items = ds
            .records_in(split)
            .map(|r| {
                Ok(TrainingItem {
                    id: r.id.clone(),
                    latents: standardize(&r.latents, &ds.manifest)?.cast(),
                    bundle: ds.bundle(r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            items,
            dim: ds.manifest.dim,
            frame_rate: ds.manifest.frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Longest window length every item can provide.
    pub fn min_frames(&self) -> usize {
        self.items.iter().map(|i| i.latents.frames()).min().unwrap_or(0)
    }
}

/// Uniform random window over all admissible start positions. With
/// probability one half, a random non-empty leading part (shorter than the
/// window) of the stimuli is replaced by the null token.
pub fn sample_training_window<T: Scalar>(
    set: &TrainingSet<T>,
    len: usize,
    rng: &mut Rng,
) -> Result<(LatentSequence<T>, ConditionBundle<T>)> {
    if len == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let counts: Vec<usize> = set
        .items
        .iter()
        .map(|i| (i.latents.frames() + 1).saturating_sub(len))
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config(format!("no training sequence has {len} frames")));
    }
    let mut pick = rng.below(total);
    let mut idx = 0;
    while pick >= counts[idx] {
        pick -= counts[idx];
        idx += 1;
    }
    let item = &set.items[idx];
    let latents = item.latents.window(pick, len)?;
    let mut bundle = item.bundle.window(pick, len)?;
    if rng.bernoulli(0.5) && len > 1 {
        bundle.trim = 1 + rng.below(len - 1);
    }
    Ok((latents, bundle))
}
