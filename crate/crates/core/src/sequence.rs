//! Latent sequences, frame stacking and the conditioning bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// One expression latent row per frame, stored row-major as `frames × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    data: Vec<T>,
    frames: usize,
    dim: usize,
    frame_rate: f64,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn new(data: Vec<T>, frames: usize, dim: usize, frame_rate: f64) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "latent sequence needs at least one frame and one dimension, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "latent data has {} values, expected {frames}x{dim}",
                data.len()
            )));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::Config(format!("frame rate must be positive, got {frame_rate}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "latent entry at frame {} dim {}",
                i / dim,
                i % dim
            )));
        }
        Ok(LatentSequence {
            data,
            frames,
            dim,
            frame_rate,
        })
    }

    pub fn zeros(frames: usize, dim: usize, frame_rate: f64) -> Result<Self> {
        Self::new(vec![T::zero(); frames * dim], frames, dim, frame_rate)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, k: usize) -> T {
        self.data[t * self.dim + k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside sequence of {} frames",
                start + len,
                self.frames
            )));
        }
        Ok(LatentSequence {
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
            frames: len,
            dim: self.dim,
            frame_rate: self.frame_rate,
        })
    }

    pub fn map(&self, f: impl Fn(usize, T) -> T) -> Self {
        let dim = self.dim;
        LatentSequence {
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| f(i % dim, v))
                .collect(),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> LatentSequence<U> {
        LatentSequence {
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
            frames: self.frames,
            dim: self.dim,
            frame_rate: self.frame_rate,
        }
    }
}

impl<T: Copy> LatentSequence<T> {
    fn clone_shape_from(&self, data: Vec<T>) -> Self {
        LatentSequence {
            data,
            frames: self.frames,
            dim: self.dim,
            frame_rate: self.frame_rate,
        }
    }
}

/// `s` consecutive frames packed into the channel axis: a `steps × stack × dim`
/// tensor. Row-major layout coincides with the unstacked `frames × dim` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedSequence<T> {
    data: Vec<T>,
    steps: usize,
    stack: usize,
    dim: usize,
}

impl<T: Scalar> StackedSequence<T> {
    pub fn new(data: Vec<T>, steps: usize, stack: usize, dim: usize) -> Result<Self> {
        if steps == 0 || stack == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "stacked sequence needs non-zero extents, got {steps}x{stack}x{dim}"
            )));
        }
        if data.len() != steps * stack * dim {
            return Err(Error::Shape(format!(
                "stacked data has {} values, expected {steps}x{stack}x{dim}",
                data.len()
            )));
        }
        Ok(StackedSequence {
            data,
            steps,
            stack,
            dim,
        })
    }

    pub fn zeros(steps: usize, stack: usize, dim: usize) -> Self {
        StackedSequence {
            data: vec![T::zero(); steps * stack * dim],
            steps,
            stack,
            dim,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stack(&self) -> usize {
        self.stack
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Values per stacked step (`stack * dim`).
    pub fn step_len(&self) -> usize {
        self.stack * self.dim
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, step: usize, channel: usize, k: usize) -> T {
        self.data[(step * self.stack + channel) * self.dim + k]
    }

    pub fn step(&self, step: usize) -> &[T] {
        let n = self.step_len();
        &self.data[step * n..(step + 1) * n]
    }

    pub fn step_mut(&mut self, step: usize) -> &mut [T] {
        let n = self.step_len();
        &mut self.data[step * n..(step + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.steps == other.steps && self.stack == other.stack && self.dim == other.dim
    }

    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(data, self.steps, self.stack, self.dim)
    }

    /// Steps `[start, start + len)`.
    pub fn slice_steps(&self, start: usize, len: usize) -> Self {
        let n = self.step_len();
        StackedSequence {
            data: self.data[start * n..(start + len) * n].to_vec(),
            steps: len,
            stack: self.stack,
            dim: self.dim,
        }
    }

    pub fn concat_steps(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut steps = 0;
        for p in parts {
            if p.stack != first.stack || p.dim != first.dim {
                return Err(Error::Shape("stacked parts disagree on stack or dim".into()));
            }
            data.extend_from_slice(&p.data);
            steps += p.steps;
        }
        Self::new(data, steps, first.stack, first.dim)
    }
}

/// Packs `stack` consecutive frames into the channel axis.
pub fn stack_frames<T: Scalar>(x: &LatentSequence<T>, stack: usize) -> Result<StackedSequence<T>> {
    if stack == 0 {
        return Err(Error::Config("frame stack must be at least 1".into()));
    }
    let remainder = x.frames % stack;
    if remainder != 0 {
        return Err(Error::NotDivisible {
            len: x.frames,
            stack,
            remainder,
        });
    }
    StackedSequence::new(x.data.clone(), x.frames / stack, stack, x.dim)
}

pub fn unstack_frames<T: Scalar>(z: &StackedSequence<T>, frame_rate: f64) -> Result<LatentSequence<T>> {
    LatentSequence::new(z.data.clone(), z.steps * z.stack, z.dim, frame_rate)
}

/// Sinusoidal embedding: `sin(t·ω_k)` for the first half, `cos(t·ω_k)` for the
/// second, with `ω_k = 10000^(-2k/dim)`.
pub fn sinusoidal_embed<T: Scalar>(t: T, dim: usize) -> Result<Vec<T>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding width must be even and >= 2, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let omega = T::c(10000f64.powf(-2.0 * k as f64 / dim as f64));
        let a = t * omega;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    Ok(out)
}

/// Condition channels in the fixed order used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionChannel {
    Stimuli,
    Expressiveness,
    Emotion,
}

impl ConditionChannel {
    pub const ALL: [ConditionChannel; 3] = [
        ConditionChannel::Stimuli,
        ConditionChannel::Expressiveness,
        ConditionChannel::Emotion,
    ];

    pub fn index(self) -> usize {
        match self {
            ConditionChannel::Stimuli => 0,
            ConditionChannel::Expressiveness => 1,
            ConditionChannel::Emotion => 2,
        }
    }
}

/// Stimulus track plus per-subject configuration scalars.
///
/// `trim` leading stimulus frames are treated as absent (null) even when the
/// stimuli channel itself is not masked.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T> {
    pub stimuli: Vec<T>,
    pub expressiveness: T,
    pub emotion: T,
    pub null_mask: [bool; 3],
    pub trim: usize,
}

impl<T: Scalar> ConditionBundle<T> {
    pub fn new(stimuli: Vec<T>, expressiveness: T, emotion: T) -> Self {
        ConditionBundle {
            stimuli,
            expressiveness,
            emotion,
            null_mask: [false; 3],
            trim: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.stimuli.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stimuli.is_empty()
    }

    pub fn is_null(&self, channel: ConditionChannel) -> bool {
        self.null_mask[channel.index()]
    }

    /// Whether frame `t` carries a usable stimulus value.
    pub fn stimulus_present(&self, t: usize) -> bool {
        !self.null_mask[0] && t >= self.trim
    }

    pub fn with_null(&self, channel: ConditionChannel) -> Self {
        let mut b = self.clone();
        b.null_mask[channel.index()] = true;
        b
    }

    pub fn all_null(&self) -> Self {
        let mut b = self.clone();
        b.null_mask = [true; 3];
        b
    }

    /// Frames `[start, start + len)`; trimming is carried over relative to the window.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.stimuli.len() {
            return Err(Error::StimuliUnderrun {
                frame: self.stimuli.len().max(start),
            });
        }
        Ok(ConditionBundle {
            stimuli: self.stimuli[start..start + len].to_vec(),
            expressiveness: self.expressiveness,
            emotion: self.emotion,
            null_mask: self.null_mask,
            trim: self.trim.saturating_sub(start).min(len),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ConditionBundle<U> {
        ConditionBundle {
            stimuli: self.stimuli.iter().map(|v| U::c(v.as_f64())).collect(),
            expressiveness: U::c(self.expressiveness.as_f64()),
            emotion: U::c(self.emotion.as_f64()),
            null_mask: self.null_mask,
            trim: self.trim,
        }
    }
}

impl<T: Scalar> LatentSequence<T> {
    /// Elementwise combination with another sequence of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.frames != other.frames || self.dim != other.dim {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.frames, self.dim, other.frames, other.dim
            )));
        }
        Ok(self.clone_shape_from(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }
}
