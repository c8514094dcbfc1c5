//! The four-way condition mixture `Ŝ = w1·S_rt + w2·S_t + w3·S_r + w4·S_none`
//! and its two-stage optimizer: a coarse grid over `(w1, w2)` with `w4 = 0`,
//! then gradient finetuning of `(w1, w2, w3)` through the last sampling
//! steps.

use rmd_tensor::nn::ParamStore;
use rmd_tensor::optim::Adam;
use rmd_tensor::{Bound, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    p_sample_step_graph, run_steps, ConditionSet, Denoiser, FrozenContext, PosteriorRule,
    RespacedSchedule, TrajectoryNoise,
};
use crate::error::{Error, Result};
use crate::metrics::{fid_graph, Gaussian};
use crate::seed;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl MixtureWeights {
    pub fn new(w1: f64, w2: f64, w3: f64, w4: f64) -> Result<Self> {
        let w = Self { w1, w2, w3, w4 };
        w.validate()?;
        Ok(w)
    }

    /// `w4 = 1 − w1 − w2 − w3`.
    pub fn from_free(w1: f64, w2: f64, w3: f64) -> Self {
        Self {
            w1,
            w2,
            w3,
            w4: 1.0 - w1 - w2 - w3,
        }
    }

    /// Grid parameterization: `w3 = 1 − w1 − w2`, `w4 = 0`.
    pub fn from_grid(w1: f64, w2: f64) -> Self {
        Self {
            w1,
            w2,
            w3: 1.0 - w1 - w2,
            w4: 0.0,
        }
    }

    /// Retrieval + text only.
    pub fn full_condition() -> Self {
        Self {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w1, self.w2, self.w3, self.w4]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|w| !w.is_finite()) {
            return Err(Error::Contract(format!("non-finite mixture weights {a:?}")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("mixture weights {a:?} sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn weight(&self, subset: ConditionSet) -> f64 {
        match subset {
            ConditionSet::Both => self.w1,
            ConditionSet::Text => self.w2,
            ConditionSet::Retr => self.w3,
            ConditionSet::None => self.w4,
        }
    }
}

impl std::str::FromStr for MixtureWeights {
    type Err = Error;

    /// Parses `w1,w2,w3,w4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Contract(format!("bad weights {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c, d] => Self::new(a, b, c, d),
            _ => Err(Error::Contract(format!("expected four comma-separated weights, got {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Grid search

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            step: 0.5,
        }
    }
}

impl GridSpec {
    /// Axis values `lo, lo+step, …, hi`, each computed from its index.
    pub fn axis(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0 && self.hi >= self.lo && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(Error::Contract(format!("invalid grid {self:?}")));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.lo + i as f64 * self.step).collect())
    }

    /// Every grid tuple, `w1`-major then `w2`, ascending.
    pub fn points(&self) -> Result<Vec<MixtureWeights>> {
        let axis = self.axis()?;
        Ok(axis
            .iter()
            .flat_map(|&w1| axis.iter().map(move |&w2| MixtureWeights::from_grid(w1, w2)))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub w1: f64,
    pub w2: f64,
    /// `None` when sampling diverged at this point.
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub spec: GridSpec,
    pub grid: Vec<GridPoint>,
    pub best: MixtureWeights,
    pub best_fid: f64,
}

/// Evaluates `objective` at every grid tuple and returns the minimizer; ties
/// keep the lexicographically smallest `(w1, w2)`. Numeric failures at a
/// point are recorded as diverged rather than aborting the sweep.
pub fn grid_search<F>(spec: &GridSpec, mut objective: F) -> Result<GridSearchReport>
where
    F: FnMut(&MixtureWeights) -> Result<f64>,
{
    let mut grid = Vec::new();
    let mut best: Option<(MixtureWeights, f64)> = None;
    for w in spec.points()? {
        let fid = match objective(&w) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) | Err(Error::Numeric(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(v) = fid {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((w, v));
            }
        }
        grid.push(GridPoint {
            w1: w.w1,
            w2: w.w2,
            fid,
        });
    }
    let (best, best_fid) =
        best.ok_or_else(|| Error::Numeric("every grid point diverged".into()))?;
    Ok(GridSearchReport {
        spec: *spec,
        grid,
        best,
        best_fid,
    })
}

// ---------------------------------------------------------------------------
// Tail finetuning

/// Maps a generated motion (on a graph) to one feature row.
pub trait FeatureExtractor {
    fn feature_params(&self) -> &ParamStore;

    /// `F×D` motion → `1×d` feature row.
    fn motion_features(&self, g: &mut Graph, p: &Bound, motion: Var) -> Result<Var>;

    fn features_of(&self, motions: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.feature_params().bind(&mut g, false);
        let mut rows = Vec::with_capacity(motions.len());
        for m in motions {
            let x = g.constant(m.clone());
            rows.push(self.motion_features(&mut g, &p, x)?);
        }
        if rows.is_empty() {
            return Err(Error::Contract("no motions to featurize".into()));
        }
        let all = g.concat_rows(&rows)?;
        Ok(g.value(all).clone())
    }
}

/// Flattens the whole motion into one feature row.
#[derive(Clone, Debug, Default)]
pub struct FlattenFeatures {
    empty: ParamStore,
}

impl FeatureExtractor for FlattenFeatures {
    fn feature_params(&self) -> &ParamStore {
        &self.empty
    }

    fn motion_features(&self, g: &mut Graph, _: &Bound, motion: Var) -> Result<Var> {
        let n = g.value(motion).numel();
        Ok(g.reshape(motion, vec![1, n])?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailConfig {
    /// Trailing sampling steps whose weights are learned.
    pub tail_steps: usize,
    pub opt_steps: usize,
    pub lr: f64,
    /// Draw fresh tail noise for every optimization step (held fixed within it).
    pub resample_noise: bool,
    /// Abort when the objective exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    /// Set from the run seed; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            tail_steps: 10,
            opt_steps: 1000,
            lr: 0.01,
            resample_noise: true,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

/// One evaluation prompt: its encoded conditions and output length.
#[derive(Clone, Debug)]
pub struct TailItem {
    pub ctx: FrozenContext,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub weights: MixtureWeights,
    /// Objective before each update.
    pub history: Vec<f64>,
}

/// Noise for item `i`, shared by the frozen head and (unless resampled) the tail.
pub fn item_noise(seed: u64, i: usize, frames: usize, dim: usize, n_steps: usize) -> TrajectoryNoise {
    TrajectoryNoise::draw(&mut seed::stream(seed, &format!("mixture/item/{i}")), frames, dim, n_steps)
}

/// Learns a shared `(w1, w2, w3)` for the last `tail_steps` sampling steps;
/// earlier steps use `w_init` without gradients. The model and the feature
/// extractor are frozen.
#[allow(clippy::too_many_arguments)]
pub fn finetune_tail<M: Denoiser, E: FeatureExtractor>(
    model: &M,
    extractor: &E,
    items: &[TailItem],
    dim: usize,
    respaced: &RespacedSchedule,
    w_init: &MixtureWeights,
    real: &Gaussian,
    cfg: &TailConfig,
    rule: PosteriorRule,
) -> Result<TailReport> {
    w_init.validate()?;
    if items.len() < 2 {
        return Err(Error::Contract("tail finetuning needs at least two evaluation items".into()));
    }
    let n = respaced.len();
    let tail = cfg.tail_steps.min(n);
    if tail == 0 {
        return Err(Error::Contract("tail_steps must be at least 1".into()));
    }

    let noises: Vec<TrajectoryNoise> = items
        .iter()
        .enumerate()
        .map(|(i, it)| item_noise(cfg.seed, i, it.frames, dim, n))
        .collect();
    let heads = items
        .iter()
        .zip(&noises)
        .map(|(it, nz)| {
            if tail == n {
                Ok(nz.start.clone())
            } else {
                run_steps(model, &it.ctx, respaced, nz.start.clone(), tail..=n - 1, w_init, nz, rule)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut free = ParamStore::new();
    let ids = [
        free.add("w1", Tensor::scalar(w_init.w1)),
        free.add("w2", Tensor::scalar(w_init.w2)),
        free.add("w3", Tensor::scalar(w_init.w3)),
    ];
    let mut adam = Adam::new(&free, cfg.lr);
    let mut history = Vec::with_capacity(cfg.opt_steps);

    for step in 0..cfg.opt_steps {
        let mut g = Graph::new();
        let wb = free.bind(&mut g, true);
        let w: Vec<Var> = ids.iter().map(|&id| wb.get(id)).collect();
        let s12 = g.add(w[0], w[1])?;
        let s123 = g.add(s12, w[2])?;
        let neg = g.scale(s123, -1.0);
        let w4 = g.add_scalar(neg, 1.0);
        let weights = [w[0], w[1], w[2], w4];

        let mp = model.params().bind(&mut g, false);
        let fp = extractor.feature_params().bind(&mut g, false);
        let mut rows = Vec::with_capacity(items.len());
        for (i, (item, head)) in items.iter().zip(&heads).enumerate() {
            let ctx = item.ctx.attach(&mut g);
            let mut x = g.constant(head.clone());
            for s in (0..tail).rev() {
                let t = respaced.kept[s];
                let mut acc: Option<Var> = None;
                for (subset, &wv) in ConditionSet::ALL.iter().zip(&weights) {
                    let est = model.denoise(&mut g, &mp, &ctx.masked(*subset), x, t)?;
                    let term = g.scale_by(est, wv)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, term)?,
                        None => term,
                    });
                }
                let z = if s == 0 {
                    None
                } else if cfg.resample_noise {
                    let label = format!("mixture/tail/{step}/{i}/{s}");
                    Some(crate::diffusion::standard_normal(
                        &[item.frames, dim],
                        &mut seed::stream(cfg.seed, &label),
                    ))
                } else {
                    noises[i].steps[s].clone()
                };
                x = p_sample_step_graph(&mut g, respaced, s, x, acc.unwrap(), z.as_ref(), rule)?;
            }
            rows.push(extractor.motion_features(&mut g, &fp, x)?);
        }
        let feats = g.concat_rows(&rows)?;
        let loss = fid_graph(&mut g, feats, real)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("objective became {value} at step {step}")));
        }
        if let Some(&first) = history.first() {
            let first: f64 = first;
            if value > cfg.divergence_factor * first.max(1e-12) {
                return Err(Error::Numeric(format!(
                    "finetuning diverged: objective {value:.6} exceeds {}× the initial {first:.6}",
                    cfg.divergence_factor
                )));
            }
        }
        history.push(value);
        g.backward(loss)?;
        let grads = wb.grads(&g);
        adam.step(&mut free, &grads);
    }

    let w = |i: usize| free.get(ids[i]).item();
    Ok(TailReport {
        weights: MixtureWeights::from_free(w(0), w(1), w(2)),
        history,
    })
}
