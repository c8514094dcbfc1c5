//! Denoiser training and text-to-motion sampling on top of the retrieval index.

use std::collections::BTreeMap;

use rand::Rng;
use rmd_tensor::optim::Adam;
use rmd_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    batch_loss, sample_normalized, Denoiser, DiffusionSchedule, LossDraw, PosteriorRule, RespacedSchedule,
    TrajectoryNoise,
};
use crate::error::{Error, Result};
use crate::mixture::MixtureWeights;
use crate::motion::{MotionSequence, NormStats};
use crate::retrieval::{Hit, RetrievalIndex};
use crate::seed;
use crate::smt::{RetrievedSample, SmtCondition, SmtModel};
use crate::text::TextProvider;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// The learning rate follows a cosine from `lr` down to `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub p_text: f64,
    pub p_retr: f64,
    /// When false the retrieval condition is never supplied (masked baseline).
    pub use_retrieval: bool,
    /// Set from the run seed; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 2e-3,
            final_lr_fraction: 0.1,
            p_text: 0.1,
            p_retr: 0.1,
            use_retrieval: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Contract("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        for (name, p) in [
            ("p_text", self.p_text),
            ("p_retr", self.p_retr),
            ("final_lr_fraction", self.final_lr_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

/// One (sequence, caption) training pair with its conditions resolved.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub id: String,
    pub caption: String,
    /// Normalized frames.
    pub x0: Tensor,
    pub cond: SmtCondition,
}

/// Looks up retrieval hits in the dataset they were indexed from.
#[derive(Clone, Debug)]
pub struct RetrievalSource<'a> {
    by_id: BTreeMap<&'a str, &'a MotionSequence>,
    stats: &'a NormStats,
}

impl<'a> RetrievalSource<'a> {
    pub fn new(train: &'a [MotionSequence], stats: &'a NormStats) -> Self {
        Self {
            by_id: train.iter().map(|s| (s.id.as_str(), s)).collect(),
            stats,
        }
    }

    /// Normalized motion and caption token features for each hit.
    pub fn resolve(&self, hits: &[Hit], provider: &TextProvider) -> Result<Vec<RetrievedSample>> {
        hits.iter()
            .map(|hit| {
                let seq = self.by_id.get(hit.motion_ref.as_str()).ok_or_else(|| Error::MissingMotion {
                    id: hit.motion_ref.clone(),
                    path: Default::default(),
                })?;
                let caption = caption_of(seq, &hit.id)?;
                Ok(RetrievedSample {
                    motion: self.stats.normalize_frames(&seq.frames)?,
                    caption_tokens: provider.embed_tokens(caption)?.matrix,
                })
            })
            .collect()
    }
}

fn caption_of<'s>(seq: &'s MotionSequence, entry_id: &str) -> Result<&'s str> {
    let idx = entry_id
        .rsplit_once('#')
        .and_then(|(_, i)| i.parse::<usize>().ok())
        .ok_or_else(|| Error::Format(format!("malformed index entry id {entry_id:?}")))?;
    seq.captions
        .get(idx)
        .map(String::as_str)
        .ok_or_else(|| Error::Schema(format!("index entry {entry_id} names a caption the dataset lacks")))
}

/// Builds one item per (sequence, caption). Retrieval uses the caption's own
/// embedding and the sequence's true length, excluding the sequence itself.
pub fn prepare_items(
    train: &[MotionSequence],
    stats: &NormStats,
    index: &RetrievalIndex,
    provider: &TextProvider,
    k: usize,
    use_retrieval: bool,
) -> Result<Vec<TrainingItem>> {
    index.check_provider(provider, true)?;
    let source = RetrievalSource::new(train, stats);
    let mut items = Vec::new();
    for seq in train {
        let x0 = stats.normalize_frames(&seq.frames)?;
        for caption in &seq.captions {
            let retrieved = if use_retrieval {
                let q = provider.embed_sentence(caption)?;
                let hits = index.search(&q.vector, seq.len(), k, Some(&seq.id))?;
                source.resolve(&hits.ranked, provider)?
            } else {
                Vec::new()
            };
            items.push(TrainingItem {
                id: seq.id.clone(),
                caption: caption.clone(),
                x0: x0.clone(),
                cond: SmtCondition {
                    prompt: Some(provider.embed_tokens(caption)?.matrix),
                    retrieved,
                },
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Contract("no captioned training sequences".into()));
    }
    Ok(items)
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

fn draw_batch(
    items: &[TrainingItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    label: &str,
) -> Vec<(usize, LossDraw)> {
    let mut rng = seed::stream(cfg.seed, label);
    (0..cfg.batch)
        .map(|_| {
            let i = rng.random_range(0..items.len());
            let draw = LossDraw::draw(&mut rng, schedule, items[i].x0.shape(), cfg.p_text, cfg.p_retr);
            (i, draw)
        })
        .collect()
}

fn loss_of<M: Denoiser<Cond = SmtCondition>>(
    model: &M,
    g: &mut Graph,
    p: &rmd_tensor::Bound,
    schedule: &DiffusionSchedule,
    items: &[TrainingItem],
    batch: &[(usize, LossDraw)],
) -> Result<rmd_tensor::Var> {
    let refs: Vec<_> = batch.iter().map(|(i, d)| (&items[*i].cond, &items[*i].x0, d)).collect();
    batch_loss(model, g, p, schedule, &refs)
}

/// Adam on the denoising objective. Each step's batch and draws come from a
/// stream named by the step index, so runs are reproducible from the seed.
pub fn train(
    model: &mut SmtModel,
    items: &[TrainingItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("no training items".into()));
    }
    let mut adam = Adam::new(model.store(), cfg.lr);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = draw_batch(items, schedule, cfg, &format!("train/step/{step}"));
        let mut g = Graph::new();
        let p = model.store().bind(&mut g, true);
        let loss = loss_of(model, &mut g, &p, schedule, items, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value} at step {step}")));
        }
        g.backward(loss)?;
        let grads = p.grads(&g);
        adam.lr = cfg.lr_at(step);
        adam.step(model.store_mut(), &grads);
        report.losses.push(value);
        on_step(step, value);
    }
    Ok(report)
}

/// Loss on a fixed set of draws (`rounds` batches from a dedicated stream),
/// for comparing a model before and after training.
pub fn evaluation_loss(
    model: &SmtModel,
    items: &[TrainingItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rounds: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..rounds {
        let batch = draw_batch(items, schedule, cfg, &format!("train/eval/{r}"));
        let mut g = Graph::new();
        let p = model.store().bind(&mut g, false);
        let loss = loss_of(model, &mut g, &p, schedule, items, &batch)?;
        total += g.value(loss).item();
    }
    Ok(total / rounds.max(1) as f64)
}

/// Everything needed to turn a prompt into a motion.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub model: &'a SmtModel,
    pub index: &'a RetrievalIndex,
    pub source: &'a RetrievalSource<'a>,
    pub provider: &'a TextProvider,
    pub respaced: &'a RespacedSchedule,
    pub rule: PosteriorRule,
    /// When false no retrieval is performed (for models trained without it).
    pub use_retrieval: bool,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Denormalized frames.
    pub frames: Tensor,
    pub normalized: Tensor,
    pub retrieved_ids: Vec<String>,
}

impl Sampler<'_> {
    /// Retrieves once, then runs the full respaced reverse process from
    /// noise drawn from `seed`.
    pub fn condition(&self, prompt: &str, length: usize, exclude: Option<&str>) -> Result<(SmtCondition, Vec<String>)> {
        let (retrieved, ids) = if self.use_retrieval {
            let q = self.provider.embed_sentence(prompt)?;
            let hits = self.index.search(&q.vector, length, self.model.config().k, exclude)?;
            let ids = hits.ranked.iter().map(|h| h.id.clone()).collect();
            (self.source.resolve(&hits.ranked, self.provider)?, ids)
        } else {
            (Vec::new(), Vec::new())
        };
        let cond = SmtCondition {
            prompt: Some(self.provider.embed_tokens(prompt)?.matrix),
            retrieved,
        };
        Ok((cond, ids))
    }

    pub fn sample(
        &self,
        prompt: &str,
        length: usize,
        w: &MixtureWeights,
        seed_: u64,
        exclude: Option<&str>,
    ) -> Result<SampleOutput> {
        if length == 0 || length > self.model.config().max_frames {
            return Err(Error::Contract(format!(
                "length must be in 1..={}, got {length}",
                self.model.config().max_frames
            )));
        }
        let (cond, retrieved_ids) = self.condition(prompt, length, exclude)?;
        let ctx = self.model.encode_frozen(&cond)?;
        let dim = self.model.config().pose_dim();
        let noise = TrajectoryNoise::draw(&mut seed::stream(seed_, "sample/noise"), length, dim, self.respaced.len());
        let normalized = sample_normalized(self.model, &ctx, self.respaced, w, &noise, self.rule)?;
        let frames = self.source.stats.denormalize_frames(&normalized)?;
        Ok(SampleOutput {
            frames,
            normalized,
            retrieved_ids,
        })
    }
}
