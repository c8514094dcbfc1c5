//! Contrastive text–motion evaluator: a motion encoder and a text encoder
//! trained so paired captions and motions land close in a shared space and
//! mismatched pairs are pushed at least a margin apart.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rmd_tensor::nn::{Linear, Mlp};
use rmd_tensor::optim::Adam;
use rmd_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::mixture::FeatureExtractor;
use crate::motion::{MotionSequence, NormStats};
use crate::seed;
use crate::smt::SequenceEncoder;
use crate::text::TextProvider;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    pub pose_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub margin: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            pose_dim: crate::motion::PoseLayout::new(4).dim(),
            text_dim: crate::text::STUB_DIM,
            hidden_dim: 32,
            embed_dim: 32,
            n_layers: 4,
            margin: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Set from the run seed; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvaluatorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvaluatorModel {
    cfg: EvaluatorConfig,
    store: ParamStore,
    motion_enc: SequenceEncoder,
    motion_head: Linear,
    text_enc: Mlp,
}

impl EvaluatorModel {
    pub fn new<R: Rng + ?Sized>(cfg: EvaluatorConfig, rng: &mut R) -> Result<Self> {
        if [cfg.pose_dim, cfg.text_dim, cfg.hidden_dim, cfg.embed_dim].contains(&0) {
            return Err(Error::Contract("evaluator dimensions must be positive".into()));
        }
        let mut s = ParamStore::new();
        let motion_enc = SequenceEncoder::new(&mut s, "motion", cfg.pose_dim, cfg.hidden_dim, cfg.n_layers, 2, rng);
        let motion_head = Linear::new(&mut s, "motion_head", cfg.hidden_dim, cfg.embed_dim, true, rng);
        let text_enc = Mlp::new(&mut s, "text", cfg.text_dim, cfg.hidden_dim, cfg.embed_dim, rng);
        Ok(Self {
            cfg,
            store: s,
            motion_enc,
            motion_head,
            text_enc,
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.cfg
    }

    /// `1×d_text` sentence embedding → `1×d_eval`.
    pub fn text_features_var(&self, g: &mut Graph, p: &Bound, sentence: Var) -> Result<Var> {
        Ok(self.text_enc.forward(g, p, sentence)?)
    }

    /// One feature row per caption.
    pub fn text_features(&self, provider: &TextProvider, captions: &[String]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let mut rows = Vec::with_capacity(captions.len());
        for c in captions {
            let e = provider.embed_sentence(c)?;
            check_dim("sentence embedding", e.dim(), self.cfg.text_dim)?;
            let x = g.constant(Tensor::matrix(1, e.dim(), e.vector)?);
            rows.push(self.text_features_var(&mut g, &p, x)?);
        }
        if rows.is_empty() {
            return Err(Error::Contract("no captions to featurize".into()));
        }
        let all = g.concat_rows(&rows)?;
        Ok(g.value(all).clone())
    }

    pub fn save(&self, path: &Path, stats: &NormStats) -> Result<()> {
        let meta = serde_json::json!({ "kind": "evaluator", "config": self.cfg, "norm": stats });
        checkpoint::save(path, &meta, &self.store)
    }

    /// Returns the evaluator and the normalization it was trained under.
    pub fn load(path: &Path) -> Result<(Self, NormStats)> {
        let (meta, tensors) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("evaluator") {
            return Err(Error::Format(format!("{}: not an evaluator checkpoint", path.display())));
        }
        let bad = |e: serde_json::Error| Error::Format(format!("{}: bad evaluator metadata: {e}", path.display()));
        let cfg: EvaluatorConfig = serde_json::from_value(meta["config"].clone()).map_err(bad)?;
        let stats: NormStats = serde_json::from_value(meta["norm"].clone()).map_err(bad)?;
        let mut model = Self::new(cfg, &mut seed::stream(0, "evaluator/load"))?;
        checkpoint::restore(&mut model.store, tensors)?;
        Ok((model, stats))
    }
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what} has dimension {got}, evaluator expects {want}")));
    }
    Ok(())
}

impl FeatureExtractor for EvaluatorModel {
    fn feature_params(&self) -> &ParamStore {
        &self.store
    }

    /// Mean-pooled encoder output through the projection head. Expects
    /// normalized frames.
    fn motion_features(&self, g: &mut Graph, p: &Bound, motion: Var) -> Result<Var> {
        check_dim("motion", g.shape(motion)[1], self.cfg.pose_dim)?;
        let h = self.motion_enc.forward(g, p, motion)?;
        let pooled = g.mean_rows(h)?;
        Ok(self.motion_head.forward(g, p, pooled)?)
    }
}

fn sq_dist(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d2 = g.mul(d, d)?;
    Ok(g.sum(d2))
}

/// Contrastive loss over a batch of `(motion, caption)` pairs: squared
/// distance of matched pairs plus squared hinge `max(0, margin − ‖m_i − s_j‖)`
/// over every mismatched pair.
fn contrastive_loss(g: &mut Graph, motion: &[Var], text: &[Var], margin: f64) -> Result<Var> {
    let n = motion.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::new();
    for i in 0..n {
        pos.push(sq_dist(g, motion[i], text[i])?);
        for j in (0..n).filter(|&j| j != i) {
            let d2 = sq_dist(g, motion[i], text[j])?;
            let d2 = g.add_scalar(d2, 1e-12);
            let d = g.sqrt(d2)?;
            let gap = g.scale(d, -1.0);
            let gap = g.add_scalar(gap, margin);
            let hinge = g.relu(gap);
            neg.push(g.mul(hinge, hinge)?);
        }
    }
    let mean = |g: &mut Graph, v: &[Var]| -> Result<Option<Var>> {
        if v.is_empty() {
            return Ok(None);
        }
        let mut acc = v[0];
        for &x in &v[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(Some(g.scale(acc, 1.0 / v.len() as f64)))
    };
    let p = mean(g, &pos)?.expect("non-empty batch");
    match mean(g, &neg)? {
        Some(q) => Ok(g.add(p, q)?),
        None => Ok(p),
    }
}

/// One training pair for the evaluator.
#[derive(Clone, Debug)]
pub struct EvalPair {
    /// Normalized frames.
    pub motion: Tensor,
    pub sentence: Vec<f64>,
    pub caption: String,
}

pub fn eval_pairs(train: &[MotionSequence], stats: &NormStats, provider: &TextProvider) -> Result<Vec<EvalPair>> {
    let mut out = Vec::new();
    for seq in train {
        let motion = stats.normalize_frames(&seq.frames)?;
        for c in &seq.captions {
            out.push(EvalPair {
                motion: motion.clone(),
                sentence: provider.embed_sentence(c)?.vector,
                caption: c.clone(),
            });
        }
    }
    Ok(out)
}

/// Batch loss on the given pairs (no training).
pub fn pair_loss(model: &EvaluatorModel, pairs: &[&EvalPair]) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let loss = batch_loss(model, &mut g, &p, pairs)?;
    Ok(g.value(loss).item())
}

fn batch_loss(model: &EvaluatorModel, g: &mut Graph, p: &Bound, pairs: &[&EvalPair]) -> Result<Var> {
    let mut ms = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for pair in pairs {
        check_dim("sentence embedding", pair.sentence.len(), model.cfg.text_dim)?;
        let x = g.constant(pair.motion.clone());
        ms.push(model.motion_features(g, p, x)?);
        let s = g.constant(Tensor::matrix(1, pair.sentence.len(), pair.sentence.clone())?);
        ts.push(model.text_features_var(g, p, s)?);
    }
    contrastive_loss(g, &ms, &ts, model.cfg.margin)
}

/// Adam on the contrastive loss with shuffled mini-batches drawn per epoch.
/// Returns the per-step losses. `steps = 0` leaves the model untouched.
pub fn train_evaluator(
    model: &mut EvaluatorModel,
    pairs: &[EvalPair],
    cfg: &EvaluatorTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::Contract("evaluator training needs at least two pairs".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::Contract("evaluator batch must hold at least two pairs".into()));
    }
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut rng = seed::stream(cfg.seed, "evaluator/batches");
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < cfg.batch.min(pairs.len()) {
            let mut epoch: Vec<usize> = (0..pairs.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<&EvalPair> = order.drain(..cfg.batch.min(pairs.len())).map(|i| &pairs[i]).collect();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let loss = batch_loss(model, &mut g, &p, &picked)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("evaluator loss became {value} at step {step}")));
        }
        g.backward(loss)?;
        let grads = p.grads(&g);
        adam.step(&mut model.store, &grads);
        losses.push(value);
        on_step(step, value);
    }
    Ok(losses)
}
