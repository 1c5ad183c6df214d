//! Preconditioned denoiser, training objective, noise schedules and the
//! deterministic multistep sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{guided_denoise, GuidanceWeights};
use crate::{unstack_frames, ConditionBundle, LatentSequence, NetInput, NetWeights, Rng, Scalar, StackedSequence, Tensor, UNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmParams {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        EdmParams {
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma_data, self.sigma_min, self.sigma_max, self.rho, self.p_mean, self.p_std]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("noise parameters must be finite".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.sigma_data <= 0.0 {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        if self.rho <= 0.0 || self.p_std < 0.0 {
            return Err(Error::Config("rho must be positive and p_std non-negative".into()));
        }
        Ok(())
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond<T> {
    pub c_skip: T,
    pub c_out: T,
    pub c_in: T,
    pub c_noise: T,
}

pub fn precondition_coeffs<T: Scalar>(sigma: T, params: &EdmParams) -> Result<Precond<T>> {
    if !(sigma >= T::zero()) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise level must be finite and non-negative, got {sigma}")));
    }
    let sd = T::c(params.sigma_data);
    let total = sigma * sigma + sd * sd;
    let root = total.sqrt();
    let log_sigma = if sigma > T::zero() { sigma.ln() } else { T::c(params.sigma_min).ln() };
    Ok(Precond {
        c_skip: sd * sd / total,
        c_out: sigma * sd / root,
        c_in: T::one() / root,
        c_noise: log_sigma / T::c(4.0),
    })
}

/// Loss weight turning the network-space loss into the data-space one.
pub fn loss_weight(sigma: f64, params: &EdmParams) -> f64 {
    let sd = params.sigma_data;
    (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
}

/// Decreasing noise levels `σ_0 = σ_max > … > σ_{K-1} = σ_min`, then `σ_K = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaGrid {
    sigmas: Vec<f64>,
}

impl SigmaGrid {
    pub fn karras(k: usize, params: &EdmParams) -> Result<Self> {
        params.validate()?;
        if k == 0 {
            return Err(Error::Config("need at least one sampling step".into()));
        }
        let inv = 1.0 / params.rho;
        let (hi, lo) = (params.sigma_max.powf(inv), params.sigma_min.powf(inv));
        let mut sigmas: Vec<f64> = (0..k)
            .map(|i| {
                if i == 0 {
                    params.sigma_max
                } else if i == k - 1 {
                    params.sigma_min
                } else {
                    (hi + i as f64 / (k - 1) as f64 * (lo - hi)).powf(params.rho)
                }
            })
            .collect();
        sigmas.push(0.0);
        Self::from_levels(sigmas)
    }

    /// Arbitrary strictly decreasing levels ending at zero.
    pub fn from_levels(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 || *sigmas.last().unwrap() != 0.0 {
            return Err(Error::Config("noise grid must end at zero".into()));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) || sigmas.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("noise grid must be strictly decreasing".into()));
        }
        Ok(SigmaGrid { sigmas })
    }

    /// Number of sampling steps `K`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    /// σ for a noise index where 0 is clean and `K` is `σ_max`.
    pub fn level(&self, k: usize) -> f64 {
        self.sigmas[self.steps() - k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sigmas
    }
}

/// The raw network `F_θ`.
pub trait Predictor<T: Scalar> {
    fn stack(&self) -> usize;
    fn dim(&self) -> usize;
    fn predict(&self, input: &NetInput<T>) -> Result<Tensor<T>>;
}

/// A network together with its weights.
#[derive(Clone, Copy)]
pub struct NetModel<'a, T> {
    pub net: &'a UNet<T>,
    pub weights: &'a NetWeights<T>,
}

impl<T: Scalar> Predictor<T> for NetModel<'_, T> {
    fn stack(&self) -> usize {
        self.net.config().stack
    }

    fn dim(&self) -> usize {
        self.net.config().dim
    }

    fn predict(&self, input: &NetInput<T>) -> Result<Tensor<T>> {
        self.net.forward(self.weights, input)
    }
}

/// A denoiser `D(z, σ; C)` with per-step noise levels.
pub trait Denoiser<T: Scalar> {
    fn stack(&self) -> usize;
    fn dim(&self) -> usize;

    /// Evaluates `D` once per bundle on the same `z` and noise levels.
    fn denoise_each(
        &self,
        z: &StackedSequence<T>,
        sigmas: &[T],
        bundles: &[ConditionBundle<T>],
        t0: usize,
    ) -> Result<Vec<StackedSequence<T>>>;

    fn denoise(
        &self,
        z: &StackedSequence<T>,
        sigmas: &[T],
        bundle: &ConditionBundle<T>,
        t0: usize,
    ) -> Result<StackedSequence<T>> {
        let mut out = self.denoise_each(z, sigmas, std::slice::from_ref(bundle), t0)?;
        Ok(out.pop().expect("one output per bundle"))
    }
}

/// `D = c_skip·z + c_out·F(c_in·z, c_noise)` around a predictor.
#[derive(Clone)]
pub struct Edm<P> {
    pub predictor: P,
    pub params: EdmParams,
}

impl<T: Scalar, P: Predictor<T>> Denoiser<T> for Edm<P> {
    fn stack(&self) -> usize {
        self.predictor.stack()
    }

    fn dim(&self) -> usize {
        self.predictor.dim()
    }

    fn denoise_each(
        &self,
        z: &StackedSequence<T>,
        sigmas: &[T],
        bundles: &[ConditionBundle<T>],
        t0: usize,
    ) -> Result<Vec<StackedSequence<T>>> {
        let steps = z.steps();
        if sigmas.len() != steps {
            return Err(Error::Shape(format!("{} noise levels for {steps} steps", sigmas.len())));
        }
        let coeffs = sigmas
            .iter()
            .map(|&s| precondition_coeffs(s, &self.params))
            .collect::<Result<Vec<_>>>()?;
        let step_len = z.step_len();
        let mut x_in = Vec::with_capacity(z.as_slice().len() * bundles.len());
        let mut c_noise = Vec::with_capacity(steps * bundles.len());
        for _ in bundles {
            for (st, c) in coeffs.iter().enumerate() {
                x_in.extend(z.step(st).iter().map(|&v| c.c_in * v));
                c_noise.push(c.c_noise);
            }
        }
        let f = self.predictor.predict(&NetInput {
            z: &x_in,
            batch: bundles.len(),
            steps,
            c_noise: &c_noise,
            bundles,
            t0,
        })?;
        let per = steps * step_len;
        f.data()
            .chunks(per)
            .map(|fb| {
                let mut out = Vec::with_capacity(per);
                for (st, c) in coeffs.iter().enumerate() {
                    let zs = z.step(st);
                    let fs = &fb[st * step_len..(st + 1) * step_len];
                    out.extend(zs.iter().zip(fs).map(|(&zv, &fv)| c.c_skip * zv + c.c_out * fv));
                }
                z.with_data(out)
            })
            .collect()
    }
}

/// Network inputs and regression targets for one training batch.
#[derive(Clone, Debug)]
pub struct TrainingBatch<T> {
    pub batch: usize,
    pub steps: usize,
    pub stack: usize,
    pub dim: usize,
    /// σ per `(batch, step)`.
    pub sigmas: Vec<T>,
    pub c_noise: Vec<T>,
    /// Clean data `y`.
    pub clean: Vec<T>,
    /// `y + n`.
    pub noisy: Vec<T>,
    /// `c_in·(y + n)`.
    pub x_in: Vec<T>,
    /// `(y − c_skip·(y + n)) / c_out`, zero on clean steps.
    pub target: Vec<T>,
    /// 1 on noisy steps, 0 on clean context steps.
    pub weights: Vec<T>,
}

impl<T: Scalar> TrainingBatch<T> {
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.steps, self.stack, self.dim]
    }

    pub fn input<'a>(&'a self, bundles: &'a [ConditionBundle<T>]) -> NetInput<'a, T> {
        NetInput {
            z: &self.x_in,
            batch: self.batch,
            steps: self.steps,
            c_noise: &self.c_noise,
            bundles,
            t0: 0,
        }
    }

    pub fn target_tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape().to_vec(), self.target.clone()).expect("consistent batch")
    }

    /// `None` when every step carries noise.
    pub fn weight_tensor(&self) -> Option<Tensor<T>> {
        if self.weights.iter().all(|&w| w == T::one()) {
            None
        } else {
            Some(Tensor::new(self.shape().to_vec(), self.weights.clone()).expect("consistent batch"))
        }
    }

    /// Weighted mean squared error of a prediction against the targets.
    pub fn loss_of(&self, pred: &[T]) -> Result<T> {
        if pred.len() != self.target.len() {
            return Err(Error::Shape("prediction does not match the batch".into()));
        }
        let mut num = T::zero();
        let mut den = T::zero();
        for ((&p, &t), &w) in pred.iter().zip(&self.target).zip(&self.weights) {
            num = num + w * (p - t) * (p - t);
            den = den + w;
        }
        Ok(num / den)
    }
}

/// Per-step noise levels: log-normal, except that each step is left clean
/// with probability `clean_prob`. At least one step is always noisy.
pub fn draw_training_sigmas(count: usize, params: &EdmParams, clean_prob: f64, rng: &mut Rng) -> Vec<f64> {
    let draw = |rng: &mut Rng| (params.p_mean + params.p_std * rng.normal()).exp();
    let mut out: Vec<f64> = (0..count)
        .map(|_| {
            let clean = clean_prob > 0.0 && rng.bernoulli(clean_prob);
            let s = draw(rng);
            if clean {
                0.0
            } else {
                s
            }
        })
        .collect();
    if count > 0 && out.iter().all(|&s| s == 0.0) {
        let i = rng.below(count);
        out[i] = draw(rng);
    }
    out
}

/// Adds noise at the given per-step levels and forms the regression targets.
pub fn prepare_training_batch<T: Scalar>(
    windows: &[StackedSequence<T>],
    sigmas: &[f64],
    params: &EdmParams,
    rng: &mut Rng,
) -> Result<TrainingBatch<T>> {
    let first = windows.first().ok_or_else(|| Error::Shape("empty training batch".into()))?;
    let (steps, stack, dim) = (first.steps(), first.stack(), first.dim());
    if windows.iter().any(|w| !w.same_shape(first)) {
        return Err(Error::Shape("training windows differ in shape".into()));
    }
    if sigmas.len() != windows.len() * steps {
        return Err(Error::Shape(format!(
            "{} noise levels for {} steps",
            sigmas.len(),
            windows.len() * steps
        )));
    }
    let n = windows.len() * first.as_slice().len();
    let step_len = first.step_len();
    let mut b = TrainingBatch {
        batch: windows.len(),
        steps,
        stack,
        dim,
        sigmas: Vec::with_capacity(sigmas.len()),
        c_noise: Vec::with_capacity(sigmas.len()),
        clean: Vec::with_capacity(n),
        noisy: Vec::with_capacity(n),
        x_in: Vec::with_capacity(n),
        target: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
    };
    for (wi, w) in windows.iter().enumerate() {
        for st in 0..steps {
            let sigma = T::c(sigmas[wi * steps + st]);
            let c = precondition_coeffs(sigma, params)?;
            b.sigmas.push(sigma);
            b.c_noise.push(c.c_noise);
            let clean_step = sigma == T::zero();
            for &y in w.step(st) {
                let noisy = y + sigma * rng.normal_scalar::<T>();
                b.clean.push(y);
                b.noisy.push(noisy);
                b.x_in.push(c.c_in * noisy);
                if clean_step {
                    b.target.push(T::zero());
                    b.weights.push(T::zero());
                } else {
                    b.target.push((y - c.c_skip * noisy) / c.c_out);
                    b.weights.push(T::one());
                }
            }
        }
    }
    debug_assert_eq!(b.x_in.len(), windows.len() * steps * step_len);
    Ok(b)
}

/// Training objective evaluated with an arbitrary predictor (no gradients).
pub fn training_loss<T: Scalar, P: Predictor<T>>(
    predictor: &P,
    params: &EdmParams,
    windows: &[StackedSequence<T>],
    bundles: &[ConditionBundle<T>],
    clean_prob: f64,
    rng: &mut Rng,
) -> Result<T> {
    let steps = windows.first().map_or(0, StackedSequence::steps);
    let sigmas = draw_training_sigmas(windows.len() * steps, params, clean_prob, rng);
    let batch = prepare_training_batch(windows, &sigmas, params, rng)?;
    let pred = predictor.predict(&batch.input(bundles))?;
    batch.loss_of(pred.data())
}

/// Per-step state of the multistep sampler: the last log-σ step and denoised value.
#[derive(Clone, Debug, Default)]
pub struct SamplerHistory<T> {
    last: Vec<Option<(T, Vec<T>)>>,
}

impl<T: Scalar> SamplerHistory<T> {
    pub fn new(steps: usize) -> Self {
        SamplerHistory { last: vec![None; steps] }
    }

    pub fn has_history(&self, step: usize) -> bool {
        self.last.get(step).is_some_and(Option::is_some)
    }
}

/// One deterministic DPM-Solver++(2M) step with per-step noise levels.
///
/// Steps whose level does not change are left untouched. Steps landing on
/// zero, and steps without history, take the first-order update.
pub fn sampler_step<T: Scalar>(
    z: &StackedSequence<T>,
    sigma: &[T],
    sigma_next: &[T],
    denoise_fn: impl FnOnce(&StackedSequence<T>, &[T]) -> Result<StackedSequence<T>>,
    history: &mut SamplerHistory<T>,
) -> Result<StackedSequence<T>> {
    let steps = z.steps();
    if sigma.len() != steps || sigma_next.len() != steps || history.last.len() != steps {
        return Err(Error::Shape("sampler noise levels do not match the window".into()));
    }
    if sigma.iter().zip(sigma_next).any(|(&a, &b)| !(b <= a) || b < T::zero()) {
        return Err(Error::Config("noise levels must not increase during sampling".into()));
    }
    if sigma.iter().zip(sigma_next).all(|(a, b)| a == b) {
        return Err(Error::Config("sampler step does not reduce any noise level".into()));
    }
    let d = denoise_fn(z, sigma)?;
    if !d.same_shape(z) {
        return Err(Error::Shape("denoiser changed the window shape".into()));
    }
    let mut out = z.clone();
    let half = T::c(0.5);
    for st in 0..steps {
        let (s, sn) = (sigma[st], sigma_next[st]);
        if s == sn {
            continue;
        }
        let ds = d.step(st);
        let zs = out.step_mut(st);
        if sn == T::zero() {
            zs.copy_from_slice(ds);
            history.last[st] = None;
            continue;
        }
        let h = (s / sn).ln();
        let ratio = sn / s;
        match &history.last[st] {
            Some((h_last, d_old)) => {
                let r = *h_last / h;
                let a = T::one() + half / r;
                let b = half / r;
                for ((zv, &dv), &dov) in zs.iter_mut().zip(ds).zip(d_old) {
                    *zv = ratio * *zv + (T::one() - ratio) * (a * dv - b * dov);
                }
            }
            None => {
                for (zv, &dv) in zs.iter_mut().zip(ds) {
                    *zv = ratio * *zv + (T::one() - ratio) * dv;
                }
            }
        }
        history.last[st] = Some((h, ds.to_vec()));
    }
    Ok(out)
}

/// Runs the whole grid with the same level on every step.
pub fn sample_grid<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    mut z: StackedSequence<T>,
    grid: &SigmaGrid,
    bundle: &ConditionBundle<T>,
    guidance: &GuidanceWeights,
    t0: usize,
) -> Result<StackedSequence<T>> {
    let steps = z.steps();
    let mut history = SamplerHistory::new(steps);
    for i in 0..grid.steps() {
        let s = vec![T::c(grid.sigma(i)); steps];
        let sn = vec![T::c(grid.sigma(i + 1)); steps];
        z = sampler_step(
            &z,
            &s,
            &sn,
            |z, s| guided_denoise(denoiser, z, s, bundle, t0, guidance),
            &mut history,
        )?;
    }
    Ok(z)
}

/// Full-sequence diffusion: one noise level shared by every frame.
pub fn sample_full_sequence<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    bundle: &ConditionBundle<T>,
    frames: usize,
    grid: &SigmaGrid,
    guidance: &GuidanceWeights,
    frame_rate: f64,
    rng: &mut Rng,
) -> Result<LatentSequence<T>> {
    let stack = denoiser.stack();
    if frames == 0 || frames % stack != 0 {
        return Err(Error::NotDivisible {
            len: frames,
            stack,
            remainder: frames % stack,
        });
    }
    if bundle.len() != frames {
        return Err(Error::Shape(format!("condition covers {} frames, need {frames}", bundle.len())));
    }
    let steps = frames / stack;
    let dim = denoiser.dim();
    let z0 = rng.normal_vec(steps * stack * dim, T::c(grid.sigma(0)));
    let z = StackedSequence::new(z0, steps, stack, dim)?;
    let z = sample_grid(denoiser, z, grid, bundle, guidance, 0)?;
    unstack_frames(&z, frame_rate)
}
