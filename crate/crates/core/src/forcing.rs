//! Per-step training noise, scheduling matrices and windowed rollout.
//!
//! A rollout window holds `W′` stacked steps. After the first window, its
//! leading `W′ − h′` steps are clean context copied from already committed
//! output and the trailing `h′` steps are generated and then committed.

use serde::{Deserialize, Serialize};

use crate::edm::{sampler_step, Denoiser, SamplerHistory, SigmaGrid};
use crate::error::{Error, Result};
use crate::guidance::{guided_denoise, GuidanceWeights};
use crate::{unstack_frames, ConditionBundle, LatentSequence, Rng, Scalar, StackedSequence};

/// Independent uniform noise index in `0..=levels` per step.
pub fn assign_training_noise(steps: usize, levels: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::Config("diffusion forcing needs at least one noise level".into()));
    }
    Ok((0..steps).map(|_| rng.below(levels + 1)).collect())
}

/// Rows are sweeps, columns are window steps, entries are noise indices
/// (0 clean, `levels` pure noise).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedulingMatrix {
    rows: Vec<Vec<usize>>,
    horizon: usize,
    levels: usize,
}

impl SchedulingMatrix {
    /// Staircase over the trailing `new` columns of a `context + new` window.
    ///
    /// Column `j` of the new block waits `⌊j·x⌋` sweeps before it starts
    /// descending one level per sweep, with `x = min(u·K/new, K)` so that no
    /// sweep is idle.
    pub fn staircase(context: usize, new: usize, levels: usize, uncertainty: f64) -> Result<Self> {
        if new == 0 || levels == 0 {
            return Err(Error::Config("scheduling needs new steps and at least one noise level".into()));
        }
        if !uncertainty.is_finite() || uncertainty <= 0.0 {
            return Err(Error::Config(format!("uncertainty must be positive, got {uncertainty}")));
        }
        let slope = (uncertainty * levels as f64 / new as f64).min(levels as f64);
        let lags: Vec<usize> = (0..new)
            .map(|j| (j as f64 * slope).floor() as usize)
            .collect();
        let last = levels + lags[new - 1];
        let rows = (0..=last)
            .map(|r| {
                let mut row = vec![0; context];
                row.extend(lags.iter().map(|&lag| (levels + lag).saturating_sub(r).min(levels)));
                row
            })
            .collect();
        Ok(SchedulingMatrix {
            rows,
            horizon: new,
            levels,
        })
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Number of denoising sweeps (transitions between rows).
    pub fn sweeps(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn window(&self) -> usize {
        self.rows[0].len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn context(&self) -> usize {
        self.window() - self.horizon
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Checks column monotonicity, the zero terminal row and zero context columns.
    pub fn validate(&self) -> Result<()> {
        let w = self.window();
        let bad = |m: &str| Err(Error::Config(format!("invalid scheduling matrix: {m}")));
        if self.rows.iter().any(|r| r.len() != w) {
            return bad("ragged rows");
        }
        if self.rows.iter().flatten().any(|&v| v > self.levels) {
            return bad("entry above the top level");
        }
        if self.rows.last().unwrap().iter().any(|&v| v != 0) {
            return bad("terminal row not clean");
        }
        if self.rows.iter().any(|r| r[..self.context()].iter().any(|&v| v != 0)) {
            return bad("noisy context column");
        }
        for pair in self.rows.windows(2) {
            if pair[0].iter().zip(&pair[1]).any(|(a, b)| b > a) {
                return bad("column noise increases");
            }
            if pair[0] == pair[1] {
                return bad("sweep without progress");
            }
        }
        if self.rows.iter().any(|r| r.windows(2).any(|p| p[1] < p[0])) {
            return bad("later column less noisy than an earlier one");
        }
        Ok(())
    }
}

/// Scheduling matrix for a `window`-step window sliding by `horizon` steps.
pub fn build_scheduling_matrix(window: usize, horizon: usize, levels: usize, uncertainty: f64) -> Result<SchedulingMatrix> {
    if horizon == 0 || horizon >= window {
        return Err(Error::Config(format!(
            "horizon {horizon} must be positive and smaller than the window {window}"
        )));
    }
    SchedulingMatrix::staircase(window - horizon, horizon, levels, uncertainty)
}

/// Reaction delay: committed frames per slide over the frame rate.
pub fn rollout_latency(matrix: &SchedulingMatrix, stack: usize, frame_rate: f64) -> f64 {
    (matrix.horizon() * stack) as f64 / frame_rate
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Window length in stacked steps.
    pub window: usize,
    /// Steps committed per slide.
    pub horizon: usize,
    pub uncertainty: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            window: 8,
            horizon: 4,
            uncertainty: 1.0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        build_scheduling_matrix(self.window, self.horizon, 1, self.uncertainty).map(|_| ())
    }
}

/// Incremental rollout: feed stimuli, take committed steps.
pub struct RolloutState<'a, T: Scalar, D: ?Sized> {
    denoiser: &'a D,
    grid: &'a SigmaGrid,
    guidance: GuidanceWeights,
    first: SchedulingMatrix,
    slide: SchedulingMatrix,
    expressiveness: T,
    emotion: T,
    /// Seed steps followed by committed steps.
    steps: Vec<T>,
    seed_steps: usize,
    stimuli: Vec<T>,
    rng: Rng,
    windows: usize,
}

impl<'a, T: Scalar, D: Denoiser<T> + ?Sized> RolloutState<'a, T, D> {
    /// `seed`, when given, supplies at least `W′ − h′` clean context steps
    /// for the first window; otherwise the first window is generated from
    /// noise in full.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        denoiser: &'a D,
        grid: &'a SigmaGrid,
        config: &RolloutConfig,
        guidance: GuidanceWeights,
        expressiveness: T,
        emotion: T,
        seed: Option<&StackedSequence<T>>,
        rng: Rng,
    ) -> Result<Self> {
        guidance.validate()?;
        let levels = grid.steps();
        let slide = build_scheduling_matrix(config.window, config.horizon, levels, config.uncertainty)?;
        let first = SchedulingMatrix::staircase(0, config.window, levels, config.uncertainty)?;
        let (stack, dim) = (denoiser.stack(), denoiser.dim());
        let mut steps = Vec::new();
        let mut seed_steps = 0;
        if let Some(seed) = seed {
            if seed.stack() != stack || seed.dim() != dim {
                return Err(Error::Shape("seed context does not match the model".into()));
            }
            if seed.steps() < slide.context() {
                return Err(Error::Shape(format!(
                    "seed context has {} steps, need {}",
                    seed.steps(),
                    slide.context()
                )));
            }
            steps.extend_from_slice(seed.as_slice());
            seed_steps = seed.steps();
        }
        Ok(RolloutState {
            denoiser,
            grid,
            guidance,
            first,
            slide,
            expressiveness,
            emotion,
            steps,
            seed_steps,
            stimuli: Vec::new(),
            rng,
            windows: 0,
        })
    }

    pub fn matrix(&self) -> &SchedulingMatrix {
        &self.slide
    }

    fn step_len(&self) -> usize {
        self.denoiser.stack() * self.denoiser.dim()
    }

    /// Committed steps, excluding any seed.
    pub fn committed_steps(&self) -> usize {
        self.steps.len() / self.step_len() - self.seed_steps
    }

    pub fn committed_frames(&self) -> usize {
        self.committed_steps() * self.denoiser.stack()
    }

    pub fn stimuli_received(&self) -> usize {
        self.stimuli.len()
    }

    pub fn windows_run(&self) -> usize {
        self.windows
    }

    pub fn push_stimuli(&mut self, frames: &[T]) {
        self.stimuli.extend_from_slice(frames);
    }

    fn next_matrix(&self) -> &SchedulingMatrix {
        if self.steps.is_empty() {
            &self.first
        } else {
            &self.slide
        }
    }

    /// Stimulus frames required before the next window can run.
    pub fn frames_needed(&self) -> usize {
        (self.committed_steps() + self.next_matrix().horizon()) * self.denoiser.stack()
    }

    pub fn ready(&self) -> bool {
        self.stimuli.len() >= self.frames_needed()
    }

    /// Runs one window if enough stimuli have arrived.
    pub fn advance(&mut self) -> Result<Option<StackedSequence<T>>> {
        if !self.ready() {
            return Ok(None);
        }
        self.run_window(false).map(Some)
    }

    /// Runs one window, holding the last stimulus value past the end of input.
    pub fn advance_padded(&mut self) -> Result<StackedSequence<T>> {
        if self.stimuli.is_empty() {
            return Err(Error::StimuliUnderrun { frame: 0 });
        }
        self.run_window(true)
    }

    fn run_window(&mut self, pad: bool) -> Result<StackedSequence<T>> {
        let (stack, dim) = (self.denoiser.stack(), self.denoiser.dim());
        let step_len = stack * dim;
        let matrix = self.next_matrix().clone();
        let (ctx, new) = (matrix.context(), matrix.horizon());
        let total_steps = self.steps.len() / step_len;
        let ctx_data = &self.steps[(total_steps - ctx) * step_len..];
        // first frame of the window relative to the first generated frame
        let start = (total_steps - ctx) as isize - self.seed_steps as isize;
        let start_frame = start * stack as isize;
        let frames = (ctx + new) * stack;
        let mut stim = Vec::with_capacity(frames);
        let mut trim = 0;
        for i in 0..frames {
            let f = start_frame + i as isize;
            if f < 0 {
                stim.push(T::zero());
                trim = i + 1;
            } else if let Some(&v) = self.stimuli.get(f as usize) {
                stim.push(v);
            } else if pad {
                stim.push(*self.stimuli.last().expect("non-empty stimuli"));
            } else {
                return Err(Error::StimuliUnderrun { frame: f as usize });
            }
        }
        let mut bundle = ConditionBundle::new(stim, self.expressiveness, self.emotion);
        bundle.trim = trim;

        let sigma_max = T::c(self.grid.sigma(0));
        let mut data = ctx_data.to_vec();
        data.extend(self.rng.normal_vec(new * step_len, sigma_max));
        let mut z = StackedSequence::new(data, ctx + new, stack, dim)?;
        let mut history = SamplerHistory::new(ctx + new);
        let sig = |row: &[usize]| -> Vec<T> { row.iter().map(|&k| T::c(self.grid.level(k))).collect() };
        for pair in matrix.rows().windows(2) {
            let (s, sn) = (sig(&pair[0]), sig(&pair[1]));
            z = sampler_step(
                &z,
                &s,
                &sn,
                |z, s| guided_denoise(self.denoiser, z, s, &bundle, 0, &self.guidance),
                &mut history,
            )?;
        }
        let out = z.slice_steps(ctx, new);
        if !out.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("rollout window {}", self.windows)));
        }
        self.steps.extend_from_slice(out.as_slice());
        self.windows += 1;
        Ok(out)
    }

    /// All committed steps, excluding the seed.
    pub fn output(&self) -> Result<StackedSequence<T>> {
        let step_len = self.step_len();
        StackedSequence::new(
            self.steps[self.seed_steps * step_len..].to_vec(),
            self.committed_steps(),
            self.denoiser.stack(),
            self.denoiser.dim(),
        )
    }
}

/// Generates exactly `frames` latent frames driven by `bundle`'s stimuli.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    grid: &SigmaGrid,
    config: &RolloutConfig,
    bundle: &ConditionBundle<T>,
    frames: usize,
    guidance: &GuidanceWeights,
    frame_rate: f64,
    seed: Option<&StackedSequence<T>>,
    rng: Rng,
) -> Result<LatentSequence<T>> {
    if bundle.stimuli.len() < frames {
        return Err(Error::StimuliUnderrun {
            frame: bundle.stimuli.len(),
        });
    }
    let stack = denoiser.stack();
    let min = config.window * stack;
    if frames < min {
        return Err(Error::Config(format!("rollout of {frames} frames is shorter than one window ({min})")));
    }
    let mut state = RolloutState::new(
        denoiser,
        grid,
        config,
        *guidance,
        bundle.expressiveness,
        bundle.emotion,
        seed,
        rng,
    )?;
    state.push_stimuli(&bundle.stimuli[..frames]);
    while state.committed_frames() < frames {
        state.advance_padded()?;
    }
    let z = state.output()?;
    unstack_frames(&z, frame_rate)?.window(0, frames)
}

/// Streaming rollout: pulls stimulus frames from `source` and emits each
/// latent frame as soon as its window is committed. With `total` set, the
/// source must supply that many frames; otherwise generation stops when the
/// source ends. Returns the number of frames emitted.
#[allow(clippy::too_many_arguments)]
pub fn rollout_stream<T: Scalar, D: Denoiser<T> + ?Sized>(
    state: &mut RolloutState<'_, T, D>,
    source: impl IntoIterator<Item = Result<T>>,
    total: Option<usize>,
    mut emit: impl FnMut(&[T]) -> Result<()>,
) -> Result<usize> {
    let mut emitted = 0;
    let dim = state.denoiser.dim();
    let limit = |received: usize| total.unwrap_or(received);
    let mut flush = |out: &StackedSequence<T>, emitted: &mut usize, bound: usize| -> Result<()> {
        for frame in out.as_slice().chunks(dim) {
            if *emitted >= bound {
                break;
            }
            emit(frame)?;
            *emitted += 1;
        }
        Ok(())
    };
    for v in source {
        if total.is_some_and(|t| state.stimuli_received() >= t) {
            break;
        }
        state.push_stimuli(&[v?]);
        while let Some(out) = state.advance()? {
            flush(&out, &mut emitted, limit(usize::MAX))?;
        }
    }
    let received = state.stimuli_received();
    if let Some(t) = total {
        if received < t {
            return Err(Error::StimuliUnderrun { frame: received });
        }
    }
    let bound = limit(received);
    let min = state.slide.window() * state.denoiser.stack();
    if state.committed_frames() == 0 && received < min {
        return Err(Error::StimuliUnderrun { frame: received });
    }
    while state.committed_frames() < bound {
        let out = state.advance_padded()?;
        flush(&out, &mut emitted, bound)?;
    }
    Ok(emitted)
}
