//! Multi-condition classifier-free guidance and training-time condition dropout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edm::Denoiser;
use crate::error::{Error, Result};
use crate::{ConditionBundle, ConditionChannel, Rng, Scalar, StackedSequence};

/// Guidance strength per condition channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceWeights {
    pub stimuli: f64,
    pub expressiveness: f64,
    pub emotion: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights {
            stimuli: 1.0,
            expressiveness: 0.5,
            emotion: 0.25,
        }
    }
}

impl GuidanceWeights {
    pub const NONE: GuidanceWeights = GuidanceWeights {
        stimuli: 0.0,
        expressiveness: 0.0,
        emotion: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for c in ConditionChannel::ALL {
            let v = self.get(c);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("guidance weight for {c:?} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, channel: ConditionChannel) -> f64 {
        match channel {
            ConditionChannel::Stimuli => self.stimuli,
            ConditionChannel::Expressiveness => self.expressiveness,
            ConditionChannel::Emotion => self.emotion,
        }
    }

    pub fn total(&self) -> f64 {
        self.stimuli + self.expressiveness + self.emotion
    }

    /// Channels that need an extra nulled pass.
    pub fn active(&self) -> Vec<ConditionChannel> {
        ConditionChannel::ALL.into_iter().filter(|&c| self.get(c) > 0.0).collect()
    }
}

/// Written as `emotion_expressiveness_stimuli`, e.g. `0.25_0.5_1`.
impl fmt::Display for GuidanceWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.emotion, self.expressiveness, self.stimuli)
    }
}

impl FromStr for GuidanceWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('_').collect();
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad guidance weight {p:?} in {s:?}")))
        };
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "guidance triple {s:?} must be emotion_expressiveness_stimuli"
            )));
        }
        let w = GuidanceWeights {
            emotion: parse(parts[0])?,
            expressiveness: parse(parts[1])?,
            stimuli: parse(parts[2])?,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Independently nulls each channel with probability `p`.
pub fn condition_dropout<T: Scalar>(bundle: &ConditionBundle<T>, p: f64, rng: &mut Rng) -> ConditionBundle<T> {
    let mut out = bundle.clone();
    for c in ConditionChannel::ALL {
        if rng.bernoulli(p) {
            out.null_mask[c.index()] = true;
        }
    }
    out
}

/// `(1 + Σλ)·D(C) − Σ λ_c·D(C with c nulled)`.
pub fn guided_denoise<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    z: &StackedSequence<T>,
    sigmas: &[T],
    bundle: &ConditionBundle<T>,
    t0: usize,
    weights: &GuidanceWeights,
) -> Result<StackedSequence<T>> {
    let active = weights.active();
    if active.is_empty() {
        return denoiser.denoise(z, sigmas, bundle, t0);
    }
    let mut bundles = Vec::with_capacity(1 + active.len());
    bundles.push(bundle.clone());
    bundles.extend(active.iter().map(|&c| bundle.with_null(c)));
    let outs = denoiser.denoise_each(z, sigmas, &bundles, t0)?;
    if outs.len() != bundles.len() || outs.iter().any(|o| !o.same_shape(z)) {
        return Err(Error::Shape("denoiser returned mismatched outputs".into()));
    }
    let lead = T::c(1.0 + active.iter().map(|&c| weights.get(c)).sum::<f64>());
    let lambdas: Vec<T> = active.iter().map(|&c| T::c(weights.get(c))).collect();
    let mut data: Vec<T> = outs[0].as_slice().iter().map(|&v| lead * v).collect();
    for (lam, o) in lambdas.iter().zip(&outs[1..]) {
        for (d, &v) in data.iter_mut().zip(o.as_slice()) {
            *d = *d - *lam * v;
        }
    }
    z.with_data(data)
}
