//! Noise schedule, forward noising, the conditional training objective and
//! the ancestral reverse sampler.
//!
//! Tensors are `[B, K, L]` batches. In mode `D1` the conditioned entries
//! (mask 1) are pinned to the observed signal and only the remaining entries
//! are diffused; in `D0` the whole signal is diffused.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior variances; entry 0 is set to `beta[0]` and never used.
    pub sigma2: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly spaced betas from `beta0` to `beta1` over `steps` steps.
    pub fn linear(steps: usize, beta0: f64, beta1: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::domain("make_schedule", format!("need at least 2 steps, got {steps}")));
        }
        if !(beta0 > 0.0 && beta0 <= beta1 && beta1 < 1.0) {
            return Err(Error::domain(
                "make_schedule",
                format!("need 0 < beta0 <= beta1 < 1, got {beta0}, {beta1}"),
            ));
        }
        let span = (beta1 - beta0) / (steps - 1) as f64;
        let beta = (0..steps)
            .map(|i| if i + 1 == steps { beta1 } else { beta0 + span * i as f64 })
            .collect();
        Self::from_betas(beta)
    }

    /// Schedule from explicit betas (any length >= 1), each in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::domain("make_schedule", "betas must be non-empty and in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma2 = (0..beta.len())
            .map(|t| {
                if t == 0 {
                    beta[0]
                } else {
                    beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma2,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::domain("q_sample", format!("step {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::dim("q_sample", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
    Ok(Tensor::from_parts(
        x0.shape().to_vec(),
        x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffusionMode {
    /// Diffuse the full signal.
    D0,
    /// Diffuse only the imputation targets; conditioned entries are pinned.
    D1,
}

/// What the network output is trained to predict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// The injected noise.
    #[default]
    Epsilon,
    /// The clean signal.
    X0,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub mode: DiffusionMode,
    #[serde(default)]
    pub parametrization: Parametrization,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta0: 1e-4,
            beta1: 0.02,
            mode: DiffusionMode::D1,
            parametrization: Parametrization::Epsilon,
        }
    }
}

impl DiffusionConfig {
    pub fn reference() -> Self {
        Self {
            steps: 200,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta0, self.beta1)
    }
}

/// A noise-prediction network `net(x_t, t, c)`.
///
/// `x_t: [B, K, L]`, `steps: [B]`, `cond: [B, 2K, L]`; returns `[B, K, L]`.
pub trait Denoiser {
    fn params(&self) -> &ParamStore;

    fn forward<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, steps: &[usize], cond: Var<'t>) -> Result<Var<'t>>;
}

/// Observed signal and its effective mask `M = m_imp * m_mvi`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `x0 * M`, exactly zero wherever the mask is zero.
    pub cond: Tensor,
    pub mask: Tensor,
}

impl ConditioningBundle {
    pub fn new(x0: &Tensor, mask: &Tensor) -> Result<Self> {
        if x0.shape() != mask.shape() || x0.shape().len() != 3 {
            return Err(Error::dim(
                "conditioning",
                format!("signal {:?}, mask {:?}", x0.shape(), mask.shape()),
            ));
        }
        let cond = x0
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| if m != 0.0 { x } else { 0.0 })
            .collect();
        Ok(Self {
            cond: Tensor::from_parts(x0.shape().to_vec(), cond),
            mask: mask.clone(),
        })
    }

    /// Channel-wise concatenation `[x0 * M, M]`, shape `[B, 2K, L]`.
    pub fn stacked(&self) -> Tensor {
        let s = self.cond.shape();
        let (nb, k, len) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(2 * self.cond.numel());
        for (c, m) in self.cond.data().chunks(k * len).zip(self.mask.data().chunks(k * len)) {
            out.extend_from_slice(c);
            out.extend_from_slice(m);
        }
        Tensor::from_parts(vec![nb, 2 * k, len], out)
    }
}

/// Pointwise product of binary masks.
fn combine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mask", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    ))
}

/// One training batch; all tensors `[B, K, L]`.
#[derive(Clone, Copy, Debug)]
pub struct TrainingBatch<'a> {
    pub x0: &'a Tensor,
    pub m_imp: &'a Tensor,
    pub m_mvi: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Gradients in the network's parameter declaration order.
    pub grads: Vec<Tensor>,
    pub steps: Vec<usize>,
}

/// Draws a diffusion step per sample and Gaussian noise, then evaluates
/// [`training_loss`].
pub fn training_step(
    net: &dyn Denoiser,
    batch: TrainingBatch<'_>,
    sched: &DiffusionSchedule,
    cfg: &DiffusionConfig,
    rng: &mut SeededRng,
) -> Result<StepOutput> {
    let nb = batch.x0.shape().first().copied().unwrap_or(0);
    let noise = Tensor::from_parts(batch.x0.shape().to_vec(), rng.normal_vec(batch.x0.numel()));
    let steps: Vec<usize> = (0..nb).map(|_| rng.below(sched.steps())).collect();
    training_loss(net, batch, sched, cfg, &steps, &noise, true)
}

/// The training objective for fixed steps and noise.
///
/// In `D1` the noise tensor is overwritten with the clean signal on
/// conditioned entries before mixing, and the loss covers only imputation
/// targets that have ground truth (`(1 - M) * m_mvi`). In `D0` the loss
/// covers every entry with ground truth. The loss is the mean squared error
/// over covered entries, or 0 when none are covered.
pub fn training_loss(
    net: &dyn Denoiser,
    batch: TrainingBatch<'_>,
    sched: &DiffusionSchedule,
    cfg: &DiffusionConfig,
    steps: &[usize],
    noise: &Tensor,
    with_grads: bool,
) -> Result<StepOutput> {
    let x0 = batch.x0;
    let shape = x0.shape().to_vec();
    let (nb, per) = match shape.as_slice() {
        [b, k, l] => (*b, k * l),
        s => return Err(Error::dim("training_step", format!("expected [batch, K, L], got {s:?}"))),
    };
    if steps.len() != nb || noise.shape() != shape.as_slice() {
        return Err(Error::dim(
            "training_step",
            format!("{} steps, noise {:?} for signal {shape:?}", steps.len(), noise.shape()),
        ));
    }
    for &t in steps {
        sched.check_step(t)?;
    }
    let mask = combine(batch.m_imp, batch.m_mvi)?;
    let bundle = ConditioningBundle::new(x0, &mask)?;
    let mut x_std = noise.data().to_vec();
    if cfg.mode == DiffusionMode::D1 {
        for ((v, &x), &m) in x_std.iter_mut().zip(x0.data()).zip(mask.data()) {
            *v = x * m + *v * (1.0 - m);
        }
    }
    let mut x_bar = vec![0.0; x0.numel()];
    for b in 0..nb {
        let ab = sched.alpha_bar[steps[b]];
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in b * per..(b + 1) * per {
            x_bar[i] = sa * x0.data()[i] + sb * x_std[i];
        }
    }
    let target = match cfg.parametrization {
        Parametrization::Epsilon => x_std,
        Parametrization::X0 => x0.data().to_vec(),
    };
    let loss_mask: Vec<f64> = match cfg.mode {
        DiffusionMode::D0 => batch.m_mvi.data().to_vec(),
        DiffusionMode::D1 => mask
            .data()
            .iter()
            .zip(batch.m_mvi.data())
            .map(|(m, v)| (1.0 - m) * v)
            .collect(),
    };
    let covered: f64 = loss_mask.iter().sum();
    if covered == 0.0 {
        log::warn!("training batch has no imputation targets; loss defined as 0");
    }

    let tape = Tape::new();
    let params = net.params().bind(&tape, with_grads);
    let x_t = tape.constant(Tensor::from_parts(shape.clone(), x_bar));
    let cond = tape.constant(bundle.stacked());
    let y = net.forward(&params, x_t, steps, cond)?;
    let residual = y.sub(tape.constant(Tensor::from_parts(shape.clone(), target)))?;
    let weighted = residual
        .square()?
        .mul(tape.constant(Tensor::from_parts(shape, loss_mask)))?;
    let loss = weighted.sum()?.scale(1.0 / covered.max(1.0))?;
    let value = loss.value().item();
    let grads = if with_grads && loss.requires_grad() {
        let mut g = loss.backward()?;
        params.gradients(&mut g)
    } else {
        net.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
    };
    Ok(StepOutput {
        loss: value,
        grads,
        steps: steps.to_vec(),
    })
}

/// Draws one imputation per batch element by running the reverse chain
/// from `t = T-1` down to 0.
pub fn reverse_sample(
    net: &dyn Denoiser,
    bundle: &ConditioningBundle,
    sched: &DiffusionSchedule,
    cfg: &DiffusionConfig,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    reverse_sample_observed(net, bundle, sched, cfg, rng, |_, _| {})
}

/// [`reverse_sample`], calling `observe(t, x_t)` with the network input at
/// every step.
pub fn reverse_sample_observed(
    net: &dyn Denoiser,
    bundle: &ConditioningBundle,
    sched: &DiffusionSchedule,
    cfg: &DiffusionConfig,
    rng: &mut SeededRng,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let shape = bundle.cond.shape().to_vec();
    let nb = shape[0];
    let stacked = bundle.stacked();
    let pin = |x: &mut [f64]| {
        for ((v, &c), &m) in x.iter_mut().zip(bundle.cond.data()).zip(bundle.mask.data()) {
            if m != 0.0 {
                *v = c;
            }
        }
    };
    let mut x = rng.normal_vec(bundle.cond.numel());
    for t in (0..sched.steps()).rev() {
        if cfg.mode == DiffusionMode::D1 {
            pin(&mut x);
        }
        let x_t = Tensor::from_parts(shape.clone(), x);
        observe(t, &x_t);
        let out = {
            let tape = Tape::new();
            let params = net.params().bind(&tape, false);
            let y = net.forward(&params, tape.constant(x_t.clone()), &vec![t; nb], tape.constant(stacked.clone()))?;
            let v = y.value().clone();
            v
        };
        if out.shape() != shape.as_slice() {
            return Err(Error::dim("reverse_sample", format!("network returned {:?}", out.shape())));
        }
        let (alpha, ab) = (sched.alpha[t], sched.alpha_bar[t]);
        let eps: Vec<f64> = match cfg.parametrization {
            Parametrization::Epsilon => out.into_data(),
            Parametrization::X0 => x_t
                .data()
                .iter()
                .zip(out.data())
                .map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect(),
        };
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        x = x_t
            .data()
            .iter()
            .zip(&eps)
            .map(|(xt, e)| (xt - coef * e) * inv)
            .collect();
        if t > 0 {
            let sigma = sched.sigma2[t].sqrt();
            x.iter_mut().for_each(|v| *v += sigma * rng.normal());
        }
    }
    if cfg.mode == DiffusionMode::D1 {
        pin(&mut x);
    }
    let out = Tensor::from_parts(shape, x);
    if !out.is_finite() {
        return Err(Error::NonFinite("reverse_sample"));
    }
    Ok(out)
}

/// Per-entry empirical quantiles and mean of a sample ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSummary {
    pub levels: Vec<f64>,
    /// One surface per level, each shaped like a sample.
    pub surfaces: Vec<Tensor>,
    pub mean: Tensor,
}

/// Quantiles by linear interpolation between order statistics
/// (position `(S - 1) q`).
pub fn summarize_samples(samples: &[Tensor], levels: &[f64]) -> Result<QuantileSummary> {
    let first = samples
        .first()
        .ok_or_else(|| Error::domain("summarize_samples", "empty sample set"))?;
    if let Some(q) = levels.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::domain("summarize_samples", format!("quantile {q} outside (0, 1)")));
    }
    if samples.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::dim("summarize_samples", "samples differ in shape"));
    }
    let n = first.numel();
    let s = samples.len();
    let mut surfaces = vec![vec![0.0; n]; levels.len()];
    let mut mean = vec![0.0; n];
    let mut column = vec![0.0; s];
    for i in 0..n {
        for (c, sample) in column.iter_mut().zip(samples) {
            *c = sample.data()[i];
        }
        mean[i] = column.iter().sum::<f64>() / s as f64;
        column.sort_by(f64::total_cmp);
        for (surface, &q) in surfaces.iter_mut().zip(levels) {
            surface[i] = interpolate_sorted(&column, q);
        }
    }
    let shape = first.shape().to_vec();
    Ok(QuantileSummary {
        levels: levels.to_vec(),
        surfaces: surfaces
            .into_iter()
            .map(|v| Tensor::from_parts(shape.clone(), v))
            .collect(),
        mean: Tensor::from_parts(shape, mean),
    })
}

fn interpolate_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
