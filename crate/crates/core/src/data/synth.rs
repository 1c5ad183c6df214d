//! Synthetic stimuli tracks and the known response process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{LatentSequence, Rng};

/// Highest stimulus intensity level.
pub const MAX_LEVEL: u8 = 4;

/// One plateau of a stimulus track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub level: u8,
    /// Plateau length in frames.
    pub duration: usize,
}

/// Piecewise-trapezoid stimulus description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimuliProfile {
    pub segments: Vec<Segment>,
    /// Frames of linear rise before, and fall after, each plateau.
    pub ramp: usize,
}

impl StimuliProfile {
    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if s.duration == 0 {
                return Err(Error::Config("stimulus segment durations must be at least 1".into()));
            }
            if s.level > MAX_LEVEL {
                return Err(Error::Config(format!("stimulus level {} above {MAX_LEVEL}", s.level)));
            }
        }
        Ok(())
    }

    /// Frames produced by [`gen_stimuli`].
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.duration + 2 * self.ramp).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Alternating rest and stimulation blocks covering at least `frames` frames.
    pub fn random(frames: usize, rng: &mut Rng) -> Self {
        let ramp = 4 + rng.below(7);
        let mut segments = Vec::new();
        let mut total = 0;
        let mut rest = true;
        while total < frames {
            let seg = if rest {
                Segment {
                    level: 0,
                    duration: 30 + rng.below(71),
                }
            } else {
                Segment {
                    level: 1 + rng.below(MAX_LEVEL as usize) as u8,
                    duration: 40 + rng.below(61),
                }
            };
            total += seg.duration + 2 * ramp;
            segments.push(seg);
            rest = !rest;
        }
        StimuliProfile { segments, ramp }
    }
}

/// Renders the profile: per segment a rise over `ramp` frames starting at 0,
/// the plateau, and a fall over `ramp` frames ending at 0.
pub fn gen_stimuli(profile: &StimuliProfile) -> Result<Vec<f64>> {
    profile.validate()?;
    let r = profile.ramp;
    let mut out = Vec::with_capacity(profile.len());
    for s in &profile.segments {
        let level = s.level as f64;
        out.extend((0..r).map(|i| level * i as f64 / r as f64));
        out.extend(std::iter::repeat_n(level, s.duration));
        out.extend((1..=r).map(|i| level * (1.0 - i as f64 / r as f64)));
    }
    Ok(out)
}

/// Parameters of one synthetic subject's response process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub expressiveness: f64,
    pub emotion: f64,
    pub response_gain: Vec<f64>,
    pub latency_frames: usize,
    pub decay: f64,
    pub noise_std: f64,
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if self.response_gain.is_empty() || self.noise_std < 0.0 {
            return Err(Error::Config("subject needs a gain vector and non-negative noise".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.response_gain.len()
    }

    /// Per-dimension response direction `gain + e(emotion)`.
    pub fn direction(&self) -> Vec<f64> {
        let e = emotion_offset(self.emotion, self.dim());
        self.response_gain.iter().zip(e).map(|(g, e)| g + e).collect()
    }

    /// Noise-free fixed point for a constant stimulus.
    pub fn steady_state(&self, stimulus: f64) -> Vec<f64> {
        let amp = self.expressiveness * saturate(stimulus);
        self.direction().into_iter().map(|v| amp * v).collect()
    }
}

/// `x / (1 + x)` for non-negative input.
pub fn saturate(x: f64) -> f64 {
    let x = x.max(0.0);
    x / (1.0 + x)
}

/// Fixed sinusoidal per-dimension offset of the emotion index, bounded by 0.3.
pub fn emotion_offset(emotion: f64, dim: usize) -> Vec<f64> {
    (0..dim).map(|k| 0.3 * ((k + 1) as f64 * emotion).sin()).collect()
}

/// `y_t = decay·y_{t−1} + (1−decay)·𝒫·f(c_{t−lat})·(gain + e(ℰ)) + noise_t`, `y_{−1} = 0`.
pub fn oracle_response(
    stimuli: &[f64],
    subject: &SubjectProfile,
    frame_rate: f64,
    rng: &mut Rng,
) -> Result<LatentSequence<f64>> {
    subject.validate()?;
    let d = subject.dim();
    let dir = subject.direction();
    let a = subject.decay;
    let mut y = vec![0.0; d];
    let mut out = Vec::with_capacity(stimuli.len() * d);
    for t in 0..stimuli.len() {
        let c = t.checked_sub(subject.latency_frames).map_or(0.0, |i| stimuli[i]);
        let drive = (1.0 - a) * subject.expressiveness * saturate(c);
        for k in 0..d {
            let noise = if subject.noise_std > 0.0 {
                subject.noise_std * rng.normal()
            } else {
                0.0
            };
            y[k] = a * y[k] + drive * dir[k] + noise;
        }
        out.extend_from_slice(&y);
    }
    LatentSequence::new(out, stimuli.len(), d, frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(p: f64) -> SubjectProfile {
        SubjectProfile {
            expressiveness: p,
            emotion: 0.4,
            response_gain: vec![1.0, -0.5, 0.8, 0.01],
            latency_frames: 3,
            decay: 0.9,
            noise_std: 0.0,
        }
    }

    #[test]
    fn stimulus_shapes() {
        let zero = StimuliProfile {
            segments: vec![Segment { level: 0, duration: 7 }],
            ramp: 3,
        };
        assert_eq!(gen_stimuli(&zero).unwrap(), vec![0.0; 13]);
        let step = StimuliProfile {
            segments: vec![Segment { level: 0, duration: 2 }, Segment { level: 4, duration: 3 }],
            ramp: 0,
        };
        assert_eq!(gen_stimuli(&step).unwrap(), vec![0.0, 0.0, 4.0, 4.0, 4.0]);
        let trap = StimuliProfile {
            segments: vec![Segment { level: 2, duration: 10 }],
            ramp: 5,
        };
        let s = gen_stimuli(&trap).unwrap();
        assert_eq!(s.len(), 20);
        let expect_up = [0.0, 0.4, 0.8, 1.2, 1.6];
        for (a, b) in s[..5].iter().zip(expect_up) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s[5..15].iter().all(|&v| v == 2.0));
        let expect_down = [1.6, 1.2, 0.8, 0.4, 0.0];
        for (a, b) in s[15..].iter().zip(expect_down) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gen_stimuli(&StimuliProfile {
            segments: vec![Segment { level: 1, duration: 0 }],
            ramp: 1
        })
        .is_err());
    }

    #[test]
    fn random_profiles_cover_request() {
        let mut rng = Rng::new(1, 0);
        for _ in 0..20 {
            let p = StimuliProfile::random(900, &mut rng);
            let s = gen_stimuli(&p).unwrap();
            assert!(s.len() >= 900);
            assert!(s.iter().all(|&v| (0.0..=4.0).contains(&v)));
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let y = oracle_response(&[0.0; 50], &subject(1.0), 25.0, &mut Rng::new(1, 0)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn converges_to_fixed_point_and_scales_with_expressiveness() {
        let mut s = subject(1.3);
        s.latency_frames = 0;
        let y = oracle_response(&[2.5; 400], &s, 25.0, &mut Rng::new(1, 0)).unwrap();
        let fixed = s.steady_state(2.5);
        for k in 0..4 {
            let expect = 1.3 * 2.5 / 3.5 * (s.response_gain[k] + 0.3 * ((k + 1) as f64 * 0.4).sin());
            assert!((fixed[k] - expect).abs() < 1e-12);
            assert!((y.get(399, k) - fixed[k]).abs() < 1e-12);
            // geometric approach: error shrinks by the decay every frame
            let e1 = y.get(10, k) - fixed[k];
            let e2 = y.get(11, k) - fixed[k];
            assert!((e2 - 0.9 * e1).abs() < 1e-12);
        }
        let mut s2 = s.clone();
        s2.expressiveness *= 2.0;
        let y2 = oracle_response(&[2.5; 400], &s2, 25.0, &mut Rng::new(1, 0)).unwrap();
        for (a, b) in y.as_slice().iter().zip(y2.as_slice()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn latency_delays_response() {
        let y = oracle_response(&[1.0; 10], &subject(1.0), 25.0, &mut Rng::new(1, 0)).unwrap();
        assert!(y.frame(2).iter().all(|&v| v == 0.0));
        assert!(y.frame(3).iter().any(|&v| v != 0.0));
    }
}
