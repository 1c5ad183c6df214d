//! Temporal latent U-Net.
//!
//! Input: stacked noisy latents `[B, S, s, d]`, per-step noise conditioning
//! values, one [`ConditionBundle`] per batch item and a temporal start index.
//! Output: a tensor of the same shape.

mod blocks;
mod config;
mod weights;

pub use config::NetConfig;
pub use weights::NetWeights;

use blocks::{ConvP, Embeddings, Fwd, LevelP, MlpP, NormP};
use weights::{Init, ParamBuilder};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::sequence::sinusoidal_embed;
use crate::{ConditionBundle, Rng, Scalar, StackedSequence, Tensor};

#[derive(Clone, Debug)]
struct CondEncoderP {
    null_stimuli: usize,
    null_expressiveness: usize,
    null_emotion: usize,
    mlp: MlpP,
}

#[derive(Clone, Debug)]
struct Layout {
    cond: CondEncoderP,
    noise_mlp: MlpP,
    time_mlp: MlpP,
    conv_in: ConvP,
    down: Vec<LevelP>,
    downsample: Vec<ConvP>,
    mid: LevelP,
    upsample: Vec<ConvP>,
    up: Vec<LevelP>,
    out_norm: NormP,
    conv_out: ConvP,
}

/// Network architecture; parameters live in a separate [`NetWeights`].
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: NetConfig,
    layout: Layout,
    param_count: usize,
    _scalar: std::marker::PhantomData<T>,
}

/// One batched network evaluation.
pub struct NetInput<'a, T> {
    /// Flattened `[batch, steps, stack, dim]` values.
    pub z: &'a [T],
    pub batch: usize,
    pub steps: usize,
    /// `c_noise` per `(batch, step)`, flattened.
    pub c_noise: &'a [T],
    /// One bundle per batch item, each covering `steps * stack` frames.
    pub bundles: &'a [ConditionBundle<T>],
    /// Temporal index of the first step.
    pub t0: usize,
}

impl<T: Scalar> UNet<T> {
    /// Builds the architecture and freshly initialised weights.
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<(Self, NetWeights<T>)> {
        config.validate()?;
        let mut weights = NetWeights::empty();
        let mut pb = ParamBuilder {
            weights: &mut weights,
            rng,
        };
        let layout = Self::build_layout(&config, &mut pb);
        Ok((
            UNet {
                config,
                layout,
                param_count: weights.len(),
                _scalar: std::marker::PhantomData,
            },
            weights,
        ))
    }

    /// Architecture only; `weights` must come from a network with the same config.
    pub fn with_weights(config: NetConfig, weights: &NetWeights<T>) -> Result<Self> {
        let mut rng = Rng::new(0, 0);
        let (net, fresh) = Self::new(config, &mut rng)?;
        fresh.check_compatible(weights)?;
        Ok(net)
    }

    fn build_layout(cfg: &NetConfig, pb: &mut ParamBuilder<T>) -> Layout {
        let (s, e, cd) = (cfg.stack, cfg.emb_dim, cfg.cond_dim);
        let cond = CondEncoderP {
            null_stimuli: pb.add("cond.null_stimuli", &[s], Init::Normal(1.0)),
            null_expressiveness: pb.add("cond.null_expressiveness", &[1], Init::Normal(1.0)),
            null_emotion: pb.add("cond.null_emotion", &[1], Init::Normal(1.0)),
            mlp: MlpP::new(pb, "cond.mlp", s + 2, cd, cd),
        };
        let noise_mlp = MlpP::new(pb, "noise_mlp", e, e, e);
        let time_mlp = MlpP::new(pb, "time_mlp", e, e, e);
        let w0 = cfg.widths[0];
        let conv_in = ConvP::new(pb, "conv_in", s, w0, 3, 1, false);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cur = w0;
        for (i, &w) in cfg.widths.iter().enumerate() {
            down.push(LevelP::new(pb, &format!("down{i}"), cur, w, cfg));
            downsample.push(ConvP::new(pb, &format!("down{i}.downsample"), w, w, 3, 2, false));
            cur = w;
        }
        let mid = LevelP::new(pb, "mid", cur, cur, cfg);
        let mut upsample = Vec::new();
        let mut up = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate().rev() {
            upsample.push(ConvP::new(pb, &format!("up{i}.upsample"), cur, cur, 3, 1, false));
            up.push(LevelP::new(pb, &format!("up{i}"), cur + w, w, cfg));
            cur = w;
        }
        let out_norm = NormP::new(pb, "out_norm", cur);
        let conv_out = ConvP::new(pb, "conv_out", cur, s, 3, 1, true);
        Layout {
            cond,
            noise_mlp,
            time_mlp,
            conv_in,
            down,
            downsample,
            mid,
            upsample,
            up,
            out_norm,
            conv_out,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn check_input(&self, param_count: usize, input: &NetInput<T>) -> Result<()> {
        let c = &self.config;
        if input.batch == 0 || input.steps == 0 {
            return Err(Error::Shape("empty network input".into()));
        }
        let expect = input.batch * input.steps * c.stack * c.dim;
        if input.z.len() != expect {
            return Err(Error::Shape(format!(
                "network input has {} values, expected {}x{}x{}x{}",
                input.z.len(),
                input.batch,
                input.steps,
                c.stack,
                c.dim
            )));
        }
        if input.c_noise.len() != input.batch * input.steps {
            return Err(Error::Shape(format!(
                "expected {} noise levels, got {}",
                input.batch * input.steps,
                input.c_noise.len()
            )));
        }
        if input.bundles.len() != input.batch {
            return Err(Error::Shape(format!(
                "expected {} condition bundles, got {}",
                input.batch,
                input.bundles.len()
            )));
        }
        for b in input.bundles {
            if b.len() != input.steps * c.stack {
                return Err(Error::Shape(format!(
                    "condition bundle covers {} frames, window has {}",
                    b.len(),
                    input.steps * c.stack
                )));
            }
        }
        if param_count != self.param_count {
            return Err(Error::Shape(format!(
                "network expects {} parameter tensors, got {param_count}",
                self.param_count
            )));
        }
        Ok(())
    }

    /// Pure forward pass returning `[batch, steps, stack, dim]`.
    pub fn forward(&self, weights: &NetWeights<T>, input: &NetInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(weights.tensors());
        let out = self.build(&mut g, input)?;
        Ok(g.value(out).clone())
    }

    /// Single-sequence convenience wrapper.
    pub fn forward_sequence(
        &self,
        weights: &NetWeights<T>,
        z: &StackedSequence<T>,
        c_noise: &[T],
        bundle: &ConditionBundle<T>,
        t0: usize,
    ) -> Result<StackedSequence<T>> {
        let out = self.forward(
            weights,
            &NetInput {
                z: z.as_slice(),
                batch: 1,
                steps: z.steps(),
                c_noise,
                bundles: std::slice::from_ref(bundle),
                t0,
            },
        )?;
        z.with_data(out.into_data())
    }

    /// Records the forward pass on `g` and returns the output node.
    pub fn build<'w>(&self, g: &mut Graph<'w, T>, input: &NetInput<T>) -> Result<Var> {
        let c = &self.config;
        let (b, steps) = (input.batch, input.steps);
        let n = b * steps;
        self.check_input(g.param_count(), input)?;
        let p: Vec<Var> = (0..g.param_count()).map(|i| g.param(i)).collect();
        let mut f = Fwd { g, p };
        let lay = &self.layout;

        // condition tokens
        let cond = self.encode_conditions_graph(&mut f, input.bundles, steps)?;
        let cond = f.g.reshape(cond, &[n, 1, c.cond_dim])?;

        // noise embedding per (batch, step)
        let mut ne = Vec::with_capacity(n * c.emb_dim);
        for &cn in input.c_noise {
            let t = (T::c(c.noise_scale) * (cn + T::c(c.noise_shift))).max(T::zero());
            ne.extend(sinusoidal_embed(t, c.emb_dim)?);
        }
        let ne = f.g.input(Tensor::new(vec![n, c.emb_dim], ne)?);
        let noise_emb = lay.noise_mlp.fwd(&mut f, ne)?;
        let noise_act = f.g.silu(noise_emb);

        // temporal position embedding per step, added to the noise embedding
        let step_act = if c.temporal_embedding {
            let mut te = Vec::with_capacity(steps * c.emb_dim);
            for s in 0..steps {
                te.extend(sinusoidal_embed(T::from_usize_lossy(input.t0 + s), c.emb_dim)?);
            }
            let te = f.g.input(Tensor::new(vec![1, steps, c.emb_dim], te)?);
            let time_emb = lay.time_mlp.fwd(&mut f, te)?;
            let ne3 = f.g.reshape(noise_emb, &[b, steps, c.emb_dim])?;
            let sum = f.g.add(ne3, time_emb)?;
            let sum = f.g.reshape(sum, &[n, c.emb_dim])?;
            f.g.silu(sum)
        } else {
            noise_act
        };
        let emb = Embeddings {
            noise_act,
            step_act,
            cond,
        };

        let x = f.g.input(Tensor::new(vec![n, c.stack, c.dim], input.z.to_vec())?);
        let mut h = lay.conv_in.fwd(&mut f, x)?;
        let mut skips = Vec::with_capacity(c.levels);
        for (level, ds) in lay.down.iter().zip(&lay.downsample) {
            h = level.fwd(&mut f, h, &emb, b)?;
            skips.push(h);
            h = ds.fwd(&mut f, h)?;
        }
        h = lay.mid.fwd(&mut f, h, &emb, b)?;
        for (level, us) in lay.up.iter().zip(&lay.upsample) {
            let skip = skips.pop().expect("one skip per level");
            let len = f.g.shape(skip)[2];
            h = f.g.upsample_nearest(h, len)?;
            h = us.fwd(&mut f, h)?;
            h = f.g.concat(&[h, skip], 1)?;
            h = level.fwd(&mut f, h, &emb, b)?;
        }
        let h = lay.out_norm.fwd(&mut f, h)?;
        let h = f.g.silu(h);
        let out = lay.conv_out.fwd(&mut f, h)?;
        f.g.reshape(out, &[b, steps, c.stack, c.dim])
    }

    fn encode_conditions_graph(&self, f: &mut Fwd<T>, bundles: &[ConditionBundle<T>], steps: usize) -> Result<Var> {
        let s = self.config.stack;
        let width = s + 2;
        let mut raw = Vec::with_capacity(bundles.len() * steps * width);
        let mut mask = Vec::with_capacity(raw.capacity());
        for bundle in bundles {
            if bundle.len() != steps * s {
                return Err(Error::Shape(format!(
                    "condition bundle covers {} frames, expected {}",
                    bundle.len(),
                    steps * s
                )));
            }
            for st in 0..steps {
                for j in 0..s {
                    let t = st * s + j;
                    let present = bundle.stimulus_present(t);
                    raw.push(if present { bundle.stimuli[t] } else { T::zero() });
                    mask.push(if present { T::zero() } else { T::one() });
                }
                for (v, null) in [
                    (bundle.expressiveness, bundle.null_mask[1]),
                    (bundle.emotion, bundle.null_mask[2]),
                ] {
                    raw.push(if null { T::zero() } else { v });
                    mask.push(if null { T::one() } else { T::zero() });
                }
            }
        }
        let shape = vec![bundles.len(), steps, width];
        let raw = f.g.input(Tensor::new(shape.clone(), raw)?);
        let mask = f.g.input(Tensor::new(shape, mask)?);
        let lay = &self.layout.cond;
        let nulls = [
            f.v(lay.null_stimuli),
            f.v(lay.null_expressiveness),
            f.v(lay.null_emotion),
        ];
        let null_vec = f.g.concat(&nulls, 0)?;
        let masked_null = f.g.mul(null_vec, mask)?;
        let x = f.g.add(raw, masked_null)?;
        lay.mlp.fwd(f, x)
    }

    /// Condition embeddings `[batch, steps, cond_dim]` for the given bundles.
    pub fn encode_conditions(
        &self,
        weights: &NetWeights<T>,
        bundles: &[ConditionBundle<T>],
        steps: usize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new(weights.tensors());
        let p: Vec<Var> = (0..weights.len()).map(|i| g.param(i)).collect();
        let mut f = Fwd { g: &mut g, p };
        let out = self.encode_conditions_graph(&mut f, bundles, steps)?;
        Ok(g.value(out).clone())
    }
}

/// Gradients for every parameter, rejecting non-finite values.
pub fn parameter_gradients<T: Scalar>(
    grads: Gradients<T>,
    weights: &NetWeights<T>,
) -> Result<Vec<Tensor<T>>> {
    let dense = grads.into_param_grads(weights.tensors());
    for (name, g) in weights.names().iter().zip(&dense) {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(dense)
}

#[cfg(test)]
mod tests;
