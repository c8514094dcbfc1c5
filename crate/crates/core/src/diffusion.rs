//! DDPM with x̂₀-parameterization: schedule, respacing, closed-form noising,
//! the denoising objective, and ancestral sampling with a four-way
//! condition mixture.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rmd_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixtureWeights;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFER_STEPS: usize = 50;

/// Linear-β noise schedule, indexed `1..=T` (index 0 holds the identity step).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Contract("schedule needs at least one step".into()));
        }
        let ok = 0.0 < beta_start && beta_start < 1.0 && beta_end < 1.0;
        let ordered = if steps == 1 { beta_start <= beta_end } else { beta_start < beta_end };
        if !(ok && ordered) {
            return Err(Error::Contract(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut beta = vec![0.0f64; steps + 1];
        let mut alpha_bar = vec![1.0f64; steps + 1];
        let span = (steps - 1).max(1) as f64;
        for t in 1..=steps {
            beta[t] = beta_start + (beta_end - beta_start) * (t - 1) as f64 / span;
            // Accumulate in log space; the product of 1000 factors stays accurate.
            alpha_bar[t] = (alpha_bar[t - 1].ln() + (-beta[t]).ln_1p()).exp();
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// Uniform-stride subsequence of `n` timesteps from 1 to T.
    pub fn respace(&self, n: usize) -> Result<RespacedSchedule> {
        let t_max = self.steps();
        if n == 0 || n > t_max {
            return Err(Error::Contract(format!("inference steps must be in 1..={t_max}, got {n}")));
        }
        let kept: Vec<usize> = if n == 1 {
            vec![t_max]
        } else {
            (0..n)
                .map(|i| 1 + ((i * (t_max - 1)) as f64 / (n - 1) as f64).round() as usize)
                .collect()
        };
        let mut beta = Vec::with_capacity(n);
        let mut prev = 1.0;
        for &t in &kept {
            beta.push(1.0 - self.alpha_bar[t] / prev);
            prev = self.alpha_bar[t];
        }
        let alpha_bar = kept.iter().map(|&t| self.alpha_bar[t]).collect();
        Ok(RespacedSchedule {
            kept,
            beta,
            alpha_bar,
        })
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

/// A subsequence of timesteps with per-step betas recomputed so that the
/// cumulative products at kept steps equal the full schedule's.
#[derive(Clone, Debug, PartialEq)]
pub struct RespacedSchedule {
    pub kept: Vec<usize>,
    /// `β̂_s = 1 − ᾱ(kept[s]) / ᾱ(kept[s−1])`.
    pub beta: Vec<f64>,
    /// `ᾱ(kept[s])`, copied from the full schedule.
    pub alpha_bar: Vec<f64>,
}

impl RespacedSchedule {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// `ᾱ` one step earlier; 1 before the first kept step.
    pub fn alpha_bar_prev(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bar[s - 1]
        }
    }

    /// Cumulative product of the recomputed `1 − β̂`, for checking.
    pub fn cumulative_alpha(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect()
    }

    /// Coefficients `(c_x0, c_xt, σ²)` of the reverse step at position `s`.
    pub fn posterior(&self, s: usize, rule: PosteriorRule) -> (f64, f64, f64) {
        let ab = self.alpha_bar[s];
        let ab_prev = self.alpha_bar_prev(s);
        let beta = self.beta[s];
        let var = if s == 0 { 0.0 } else { beta };
        match rule {
            PosteriorRule::Standard => (
                ab_prev.sqrt() * beta / (1.0 - ab),
                (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
                var,
            ),
            PosteriorRule::Transcribed => {
                // μ = √ᾱ·S + √(1−ᾱ)·ε, ε = (x/√ᾱ − S)·√(1/ᾱ − 1)
                let r = (1.0 / ab - 1.0).sqrt();
                let c_eps = (1.0 - ab).sqrt();
                (ab.sqrt() - c_eps * r, c_eps * r / ab.sqrt(), var)
            }
        }
    }
}

/// Which reverse-step mean to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorRule {
    /// The x̂₀-parameterized DDPM posterior.
    #[default]
    Standard,
    /// A term-by-term transcription that scales the ε-like term by √(1/ᾱ − 1)
    /// twice, so it is not the posterior mean; kept for comparison only.
    Transcribed,
}

/// One reverse step: `x_prev = c_x0·Ŝ + c_xt·x_t + σ·z`. `noise` is ignored
/// at the final step.
pub fn p_sample_step(
    respaced: &RespacedSchedule,
    s: usize,
    x_t: &Tensor,
    s_hat: &Tensor,
    noise: Option<&Tensor>,
    rule: PosteriorRule,
) -> Result<Tensor> {
    let (cx0, cxt, var) = respaced.posterior(s, rule);
    let mut mean = s_hat.zip_map(x_t, |a, b| cx0 * a + cxt * b)?;
    if var > 0.0 {
        if let Some(z) = noise {
            let sd = var.sqrt();
            mean = mean.zip_map(z, |m, z| m + sd * z)?;
        }
    }
    Ok(mean)
}

/// Graph version of [`p_sample_step`], differentiable in `x_t`, `s_hat`.
pub fn p_sample_step_graph(
    g: &mut Graph,
    respaced: &RespacedSchedule,
    s: usize,
    x_t: Var,
    s_hat: Var,
    noise: Option<&Tensor>,
    rule: PosteriorRule,
) -> Result<Var> {
    let (cx0, cxt, var) = respaced.posterior(s, rule);
    let a = g.scale(s_hat, cx0);
    let b = g.scale(x_t, cxt);
    let mut out = g.add(a, b)?;
    if var > 0.0 {
        if let Some(z) = noise {
            let z = g.constant(z.scale(var.sqrt()));
            out = g.add(out, z)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Conditions

/// The condition subsets the denoiser is evaluated under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSet {
    Both,
    Text,
    Retr,
    None,
}

impl ConditionSet {
    /// Order matching the mixture weights `(w1, w2, w3, w4)`.
    pub const ALL: [ConditionSet; 4] = [Self::Both, Self::Text, Self::Retr, Self::None];

    pub fn from_flags(text: bool, retr: bool) -> Self {
        match (text, retr) {
            (true, true) => Self::Both,
            (true, false) => Self::Text,
            (false, true) => Self::Retr,
            (false, false) => Self::None,
        }
    }

    pub fn text(self) -> bool {
        matches!(self, Self::Both | Self::Text)
    }

    pub fn retr(self) -> bool {
        matches!(self, Self::Both | Self::Retr)
    }
}

/// Independently drops the text condition with probability `p_text`, then
/// the retrieval condition with probability `p_retr`. Always consumes two
/// uniform draws, text first.
pub fn draw_condition_mask<R: Rng + ?Sized>(rng: &mut R, p_text: f64, p_retr: f64) -> ConditionSet {
    let drop_text = rng.random::<f64>() < p_text;
    let drop_retr = rng.random::<f64>() < p_retr;
    ConditionSet::from_flags(!drop_text, !drop_retr)
}

/// Encoded conditions on one graph. Each slot holds a model-defined feature
/// block; a missing slot is an absent condition.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub text: Vec<Option<Var>>,
    pub retr: Vec<Option<Var>>,
}

impl Context {
    pub fn has_text(&self) -> bool {
        self.text.iter().any(Option::is_some)
    }

    pub fn has_retr(&self) -> bool {
        self.retr.iter().any(Option::is_some)
    }

    /// Keeps only the slots enabled by `subset`.
    pub fn masked(&self, subset: ConditionSet) -> Self {
        let keep = |v: &[Option<Var>], on: bool| v.iter().map(|x| x.filter(|_| on)).collect();
        Self {
            text: keep(&self.text, subset.text()),
            retr: keep(&self.retr, subset.retr()),
        }
    }

    pub fn freeze(&self, g: &Graph) -> FrozenContext {
        let f = |v: &[Option<Var>]| v.iter().map(|x| x.map(|x| g.value(x).clone())).collect();
        FrozenContext {
            text: f(&self.text),
            retr: f(&self.retr),
        }
    }
}

/// Context values detached from any graph, so they can be reused across
/// sampling steps without re-encoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenContext {
    pub text: Vec<Option<Tensor>>,
    pub retr: Vec<Option<Tensor>>,
}

impl FrozenContext {
    pub fn attach(&self, g: &mut Graph) -> Context {
        let mut f = |v: &[Option<Tensor>]| {
            v.iter()
                .map(|x| x.as_ref().map(|x| g.constant(x.clone())))
                .collect()
        };
        Context {
            text: f(&self.text),
            retr: f(&self.retr),
        }
    }
}

/// A conditional x̂₀ predictor.
pub trait Denoiser {
    /// Raw condition data (prompt features, retrieved samples, …).
    type Cond;

    fn params(&self) -> &ParamStore;

    /// Encodes every available condition; independent of the timestep.
    fn encode(&self, g: &mut Graph, p: &Bound, cond: &Self::Cond) -> Result<Context>;

    /// Predicts `x₀` from `x_t`; absent context slots are treated as ABSENT.
    fn denoise(&self, g: &mut Graph, p: &Bound, ctx: &Context, x_t: Var, t: usize) -> Result<Var>;

    /// Encodes `cond` with frozen parameters.
    fn encode_frozen(&self, cond: &Self::Cond) -> Result<FrozenContext> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false);
        let ctx = self.encode(&mut g, &p, cond)?;
        Ok(ctx.freeze(&g))
    }
}

/// `(S_rt, S_t, S_r, S_none)` at one `x_t`.
pub fn classifier_free_estimates<M: Denoiser>(
    model: &M,
    g: &mut Graph,
    p: &Bound,
    ctx: &Context,
    x_t: Var,
    t: usize,
) -> Result<[Var; 4]> {
    let mut out = [x_t; 4];
    for (slot, subset) in out.iter_mut().zip(ConditionSet::ALL) {
        *slot = model.denoise(g, p, &ctx.masked(subset), x_t, t)?;
    }
    Ok(out)
}

/// `Ŝ = w1·S_rt + w2·S_t + w3·S_r + w4·S_none`.
pub fn mix_estimates(estimates: &[Tensor; 4], w: &MixtureWeights) -> Result<Tensor> {
    w.validate()?;
    let mut out = Tensor::zeros(estimates[0].shape());
    for (e, &wi) in estimates.iter().zip(&w.as_array()) {
        out = out.zip_map(e, |a, b| a + wi * b)?;
    }
    Ok(out)
}

/// Mixed estimate on a graph, skipping subsets whose weight is exactly zero.
pub fn mixed_estimate<M: Denoiser>(
    model: &M,
    g: &mut Graph,
    p: &Bound,
    ctx: &Context,
    x_t: Var,
    t: usize,
    w: &MixtureWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (subset, wi) in ConditionSet::ALL.into_iter().zip(w.as_array()) {
        if wi == 0.0 {
            continue;
        }
        let s = model.denoise(g, p, &ctx.masked(subset), x_t, t)?;
        let term = if wi == 1.0 { s } else { g.scale(s, wi) };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Err(Error::Contract("all mixture weights are zero".into())),
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Pre-drawn randomness for one sampling trajectory: the start `x_T` and
/// the noise for every non-final step (index `s` for step `s`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryNoise {
    pub start: Tensor,
    pub steps: Vec<Option<Tensor>>,
}

impl TrajectoryNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, frames: usize, dim: usize, n_steps: usize) -> Self {
        let start = standard_normal(&[frames, dim], rng);
        let mut steps = vec![None; n_steps];
        for s in (1..n_steps).rev() {
            steps[s] = Some(standard_normal(&[frames, dim], rng));
        }
        Self { start, steps }
    }

    pub fn zeros(frames: usize, dim: usize, n_steps: usize) -> Self {
        Self {
            start: Tensor::zeros(&[frames, dim]),
            steps: vec![None; n_steps],
        }
    }
}

/// Runs reverse steps `from_s` down to `to_s` (inclusive) with a constant
/// weight tuple and no gradient tracking. Returns the state after step `to_s`.
#[allow(clippy::too_many_arguments)]
pub fn run_steps<M: Denoiser>(
    model: &M,
    ctx: &FrozenContext,
    respaced: &RespacedSchedule,
    mut x: Tensor,
    steps: std::ops::RangeInclusive<usize>,
    w: &MixtureWeights,
    noise: &TrajectoryNoise,
    rule: PosteriorRule,
) -> Result<Tensor> {
    for s in steps.rev() {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let c = ctx.attach(&mut g);
        let xv = g.constant(x.clone());
        let s_hat = mixed_estimate(model, &mut g, &p, &c, xv, respaced.kept[s], w)?;
        x = p_sample_step(respaced, s, &x, g.value(s_hat), noise.steps[s].as_ref(), rule)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "sampling diverged at step {s} (t = {})",
                respaced.kept[s]
            )));
        }
    }
    Ok(x)
}

/// Full ancestral sampling in normalized units.
pub fn sample_normalized<M: Denoiser>(
    model: &M,
    ctx: &FrozenContext,
    respaced: &RespacedSchedule,
    w: &MixtureWeights,
    noise: &TrajectoryNoise,
    rule: PosteriorRule,
) -> Result<Tensor> {
    w.validate()?;
    let n = respaced.len();
    run_steps(model, ctx, respaced, noise.start.clone(), 0..=n - 1, w, noise, rule)
}

// ---------------------------------------------------------------------------
// Training objective

/// The random quantities of one loss term, drawn in a fixed order: `t`,
/// then `ε`, then the condition mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw {
    pub t: usize,
    pub eps: Tensor,
    pub subset: ConditionSet,
}

impl LossDraw {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        schedule: &DiffusionSchedule,
        shape: &[usize],
        p_text: f64,
        p_retr: f64,
    ) -> Self {
        let t = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(shape, rng);
        let subset = draw_condition_mask(rng, p_text, p_retr);
        Self { t, eps, subset }
    }
}

/// `mean((x₀ − S(x_t, t, cond))²)` for one sequence.
pub fn denoising_loss<M: Denoiser>(
    model: &M,
    g: &mut Graph,
    p: &Bound,
    ctx: &Context,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    draw: &LossDraw,
) -> Result<Var> {
    let x_t = schedule.q_sample(x0, draw.t, &draw.eps)?;
    let x_t = g.constant(x_t);
    let pred = model.denoise(g, p, &ctx.masked(draw.subset), x_t, draw.t)?;
    let target = g.constant(x0.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Average of [`denoising_loss`] over a batch of `(condition, x₀, draw)`.
pub fn batch_loss<M: Denoiser>(
    model: &M,
    g: &mut Graph,
    p: &Bound,
    schedule: &DiffusionSchedule,
    batch: &[(&M::Cond, &Tensor, &LossDraw)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut total: Option<Var> = None;
    for (cond, x0, draw) in batch {
        let ctx = model.encode(g, p, cond)?;
        let l = denoising_loss(model, g, p, &ctx, schedule, x0, draw)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / batch.len() as f64))
}
