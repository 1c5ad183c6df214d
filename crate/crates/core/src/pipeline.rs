//! End-to-end steps shared by the command line and the acceptance suite:
//! training on a dataset, sampling from a checkpoint, and scoring methods.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{destandardize, standardize, DataConfig, Dataset, Split, TrainingSet};
use crate::edm::sample_full_sequence;
use crate::forcing::rollout;
use crate::metrics::{intensity_extract, score_sequence, MetricsReport, RetrievalPool, SequenceScores};
use crate::rng::streams;
use crate::trainer::{Checkpoint, StepStats, TrainConfig, Trainer};
use crate::{
    ConditionBundle, Edm, EdmParams, Error, GuidanceWeights, LatentSequence, NetConfig, NetModel, NetWeights, Result,
    Rng, RolloutConfig, Scalar, SigmaGrid, UNet,
};

/// Sampler path for generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Every step of the whole sequence shares one noise level.
    FullSeq,
    /// Windowed rollout with a scheduling matrix.
    Forcing,
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::FullSeq => "full-seq",
            SamplerMode::Forcing => "forcing",
        })
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-seq" => Ok(SamplerMode::FullSeq),
            "forcing" => Ok(SamplerMode::Forcing),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected full-seq or forcing)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub mode: SamplerMode,
    /// Sampling steps `K`.
    pub steps: usize,
    /// Frames to generate.
    pub frames: usize,
    pub rollout: RolloutConfig,
    pub guidance: GuidanceWeights,
    /// Sample with the EMA shadow weights instead of the raw weights.
    pub ema: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: SamplerMode::Forcing,
            steps: 35,
            frames: 640,
            rollout: RolloutConfig::default(),
            guidance: GuidanceWeights::default(),
            ema: true,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.frames == 0 {
            return Err(Error::Config("steps and frames must be positive".into()));
        }
        self.rollout.validate()?;
        self.guidance.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Generations per validation sequence (diversity needs at least two).
    pub samples: usize,
    /// Cap on scored validation sequences; 0 scores all of them.
    pub max_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 2,
            max_sequences: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    /// Context lengths in stacked steps; the horizon stays fixed.
    pub contexts: Vec<usize>,
    pub uncertainties: Vec<f64>,
    /// Triples written `emotion_expressiveness_stimuli`.
    pub guidance: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            contexts: vec![2, 4, 8],
            uncertainties: vec![0.5, 1.0, 2.0, 4.0],
            guidance: ["1_1_1", "1_2_4", "0.5_1_2", "0.25_0.5_1"].map(String::from).to_vec(),
        }
    }
}

impl AblateConfig {
    pub fn guidance_weights(&self) -> Result<Vec<GuidanceWeights>> {
        self.guidance.iter().map(|s| s.parse()).collect()
    }
}

/// Full configuration of a run. `seed` is the single source of randomness and
/// is copied into the data and training sections by [`RunConfig::resolved`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub net: NetConfig,
    pub edm: EdmParams,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub evaluate: EvalConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Desk-scale defaults: small latent, short windows, modest width.
    pub fn desk() -> Self {
        let data = DataConfig::desk();
        RunConfig {
            net: NetConfig {
                dim: data.dim,
                stack: data.stack,
                widths: vec![16],
                levels: 1,
                heads: 4,
                cond_dim: 16,
                emb_dim: 16,
                ..NetConfig::default()
            },
            train: TrainConfig {
                seq_len: 32,
                batch_size: 8,
                steps: 10_000,
                warmup: 500,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            generate: GenerateConfig {
                steps: 12,
                ..GenerateConfig::default()
            },
            data,
            ..RunConfig::default()
        }
    }

    /// Copy of the config with the run seed propagated and cross-section
    /// settings aligned with the data.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.edm.validate()?;
        self.train.validate()?;
        self.generate.validate()?;
        self.ablate.guidance_weights()?;
        if self.evaluate.samples == 0 {
            return Err(Error::Config("evaluate.samples must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Checks that a network fits the dataset it is used with.
pub fn check_net_against_data(net: &NetConfig, ds: &Dataset) -> Result<()> {
    if net.dim != ds.manifest.dim || net.stack != ds.manifest.stack {
        return Err(Error::Config(format!(
            "network expects dim {} / stack {}, dataset has dim {} / stack {}",
            net.dim, net.stack, ds.manifest.dim, ds.manifest.stack
        )));
    }
    Ok(())
}

/// Trains on the training split until `config.train.steps` updates, resuming
/// from `resume` when given.
pub fn train<T: Scalar>(
    config: &RunConfig,
    ds: &Dataset,
    resume: Option<Checkpoint<T>>,
    log: Option<&mut dyn std::io::Write>,
) -> Result<(Trainer<T>, Vec<StepStats>)> {
    check_net_against_data(&config.net, ds)?;
    let set = TrainingSet::<T>::from_dataset(ds, Split::Train)?;
    let mut trainer = match resume {
        Some(ck) => {
            if ck.manifest_hash != ds.manifest.hash() {
                return Err(Error::Data("checkpoint was trained on a different dataset".into()));
            }
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config.steps = config.train.steps;
            t
        }
        None => Trainer::new(config.net.clone(), config.train.clone(), config.edm.clone())?,
    };
    let stats = trainer.fit(&set, config.train.steps, log)?;
    Ok((trainer, stats))
}

/// A network with the weights used for sampling.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: UNet<T>,
    pub weights: NetWeights<T>,
    pub edm: EdmParams,
}

impl<T: Scalar> Model<T> {
    pub fn from_checkpoint(ck: &Checkpoint<T>, ema: bool) -> Result<Self> {
        let weights = if ema { &ck.state.ema } else { &ck.state.weights };
        Ok(Model {
            net: UNet::with_weights(ck.net.clone(), weights)?,
            weights: weights.clone(),
            edm: ck.edm.clone(),
        })
    }

    pub fn from_trainer(t: &Trainer<T>, ema: bool) -> Self {
        Model {
            net: t.net.clone(),
            weights: if ema { t.state.ema.clone() } else { t.state.weights.clone() },
            edm: t.edm.clone(),
        }
    }

    pub fn denoiser(&self) -> Edm<NetModel<'_, T>> {
        Edm {
            predictor: NetModel {
                net: &self.net,
                weights: &self.weights,
            },
            params: self.edm.clone(),
        }
    }
}

/// Generates `cfg.frames` raw-space frames for the given raw conditions.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    bundle: &ConditionBundle<f64>,
    cfg: &GenerateConfig,
    rng: Rng,
) -> Result<LatentSequence<f64>> {
    cfg.validate()?;
    let m = &ds.manifest;
    let frames = cfg.frames;
    if bundle.len() < frames {
        return Err(Error::StimuliUnderrun { frame: bundle.len() });
    }
    let den = model.denoiser();
    let grid = SigmaGrid::karras(cfg.steps, &model.edm)?;
    let b: ConditionBundle<T> = bundle.window(0, frames)?.cast();
    let z = match cfg.mode {
        SamplerMode::Forcing => rollout(&den, &grid, &cfg.rollout, &b, frames, &cfg.guidance, m.frame_rate, None, rng)?,
        SamplerMode::FullSeq => {
            // pad the stimuli to whole stacked steps, then cut back
            let stack = m.stack;
            let padded = frames.div_ceil(stack) * stack;
            let mut pb = b.clone();
            let last = *pb.stimuli.last().expect("non-empty");
            pb.stimuli.resize(padded, last);
            let mut rng = rng;
            let z = sample_full_sequence(&den, &pb, padded, &grid, &cfg.guidance, m.frame_rate, &mut rng)?;
            z.window(0, frames)?
        }
    };
    destandardize(&z.cast::<f64>(), m)
}

/// A validation sequence cut to the evaluation length.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub gt: LatentSequence<f64>,
    pub stimuli: Vec<f64>,
    pub bundle: ConditionBundle<f64>,
}

/// Validation sequences with at least `frames` frames, in manifest order.
pub fn eval_cases(ds: &Dataset, frames: usize, max_sequences: usize) -> Result<Vec<EvalCase>> {
    let mut out = Vec::new();
    for r in ds.records_in(Split::Validation) {
        if r.latents.frames() < frames {
            continue;
        }
        out.push(EvalCase {
            id: r.id.clone(),
            gt: r.latents.window(0, frames)?,
            stimuli: r.stimuli[..frames].to_vec(),
            bundle: ds.bundle::<f64>(r)?.window(0, frames)?,
        });
        if max_sequences > 0 && out.len() == max_sequences {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no validation sequence has {frames} frames")));
    }
    Ok(out)
}

fn sample_rng(seed: u64, case: usize, sample: usize) -> Rng {
    Rng::new(seed, streams::SAMPLE).fork(case as u64).fork(sample as u64)
}

fn score_all(
    ds: &Dataset,
    cases: &[EvalCase],
    samples: usize,
    produce: impl Fn(usize, &EvalCase, usize) -> Result<LatentSequence<f64>> + Sync,
) -> Result<Vec<SequenceScores>> {
    cases
        .par_iter()
        .enumerate()
        .map(|(ci, case)| {
            let gens = (0..samples).map(|s| produce(ci, case, s)).collect::<Result<Vec<_>>>()?;
            score_sequence(&case.id, &gens, &case.gt, &case.stimuli, &ds.manifest)
        })
        .collect()
}

/// Scores the model on the evaluation cases.
pub fn evaluate_model<T: Scalar>(
    label: &str,
    model: &Model<T>,
    ds: &Dataset,
    cases: &[EvalCase],
    gen: &GenerateConfig,
    samples: usize,
    seed: u64,
    config: serde_json::Value,
) -> Result<(MetricsReport, Vec<SequenceScores>)> {
    let cfg = GenerateConfig {
        frames: cases[0].gt.frames(),
        ..gen.clone()
    };
    let scores = score_all(ds, cases, samples, |ci, case, s| {
        generate(model, ds, &case.bundle, &cfg, sample_rng(seed, ci, s))
    })?;
    Ok((MetricsReport::aggregate(label, &scores, seed, config)?, scores))
}

/// Ground truth against itself plus the nearest-neighbor and random baselines.
pub fn evaluate_baselines(
    ds: &Dataset,
    cases: &[EvalCase],
    samples: usize,
    seed: u64,
    config: serde_json::Value,
) -> Result<Vec<MetricsReport>> {
    let pool = RetrievalPool::from_dataset(ds)?;
    let gt = score_all(ds, cases, samples, |_, case, _| Ok(case.gt.clone()))?;
    let nn = score_all(ds, cases, samples, |_, case, _| Ok(pool.nearest_neighbor(&case.stimuli)?.latents))?;
    let random = score_all(ds, cases, samples, |ci, case, s| {
        let mut rng = Rng::new(seed, streams::BASELINE).fork(ci as u64).fork(s as u64);
        Ok(pool.random_window(case.gt.frames(), &mut rng)?.latents)
    })?;
    Ok(vec![
        MetricsReport::aggregate("ground_truth", &gt, seed, config.clone())?,
        MetricsReport::aggregate("nearest_neighbor", &nn, seed, config.clone())?,
        MetricsReport::aggregate("random", &random, seed, config)?,
    ])
}

/// Context, uncertainty and guidance sweeps around the base generation config.
pub fn ablate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    cases: &[EvalCase],
    base: &GenerateConfig,
    grid: &AblateConfig,
    samples: usize,
    seed: u64,
    config: serde_json::Value,
) -> Result<Vec<MetricsReport>> {
    let base = GenerateConfig {
        mode: SamplerMode::Forcing,
        ..base.clone()
    };
    let mut variants = Vec::new();
    for &c in &grid.contexts {
        let mut g = base.clone();
        g.rollout.window = c + g.rollout.horizon;
        variants.push((format!("context={c}"), g));
    }
    for &u in &grid.uncertainties {
        let mut g = base.clone();
        g.rollout.uncertainty = u;
        variants.push((format!("uncertainty={u}"), g));
    }
    for w in grid.guidance_weights()? {
        let mut g = base.clone();
        g.guidance = w;
        variants.push((format!("guidance={w}"), g));
    }
    variants
        .into_iter()
        .map(|(label, g)| {
            let mut cfg = config.clone();
            cfg["variant"] = serde_json::to_value(&g)?;
            Ok(evaluate_model(&label, model, ds, cases, &g, samples, seed, cfg)?.0)
        })
        .collect()
}

/// Largest per-frame L2 norm over the standardized training split.
pub fn training_max_norm(ds: &Dataset) -> Result<f64> {
    let mut best = 0.0f64;
    for r in ds.records_in(Split::Train) {
        let z = standardize(&r.latents, &ds.manifest)?;
        for row in z.rows() {
            best = best.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(best)
}

/// Largest per-frame L2 norm of raw latents after standardization.
pub fn max_norm(x: &LatentSequence<f64>, ds: &Dataset) -> Result<f64> {
    let z = standardize(x, &ds.manifest)?;
    Ok(z.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max))
}

/// Intensity signal of a raw sequence, for writing next to generations.
pub fn intensity(x: &LatentSequence<f64>, ds: &Dataset) -> Result<Vec<f64>> {
    intensity_extract(x, &ds.manifest)
}
