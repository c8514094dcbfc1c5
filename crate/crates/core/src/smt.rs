//! The semantics-modulated transformer denoiser.
//!
//! Decoder layers alternate semantics-modulated attention (SMA) with a
//! feed-forward block; both end in a stylization block that injects the
//! timestep embedding. SMA attends from the motion to keys/values gathered
//! from the motion itself, the encoded prompt, and the retrieved samples.
//! All attention is single-head linear attention.

use std::path::Path;

use rand::Rng;
use rmd_tensor::nn::{LayerNorm, Linear, Mlp};
use rmd_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffusion::{Context, Denoiser};
use crate::error::{Error, Result};
use crate::motion::PoseLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmtConfig {
    pub joints: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    pub n_layers: usize,
    pub n_retr_layers: usize,
    /// Encoder layers on top of token features (prompt and retrieved captions).
    pub n_text_layers: usize,
    pub ffn_mult: usize,
    pub k: usize,
    pub stride: usize,
    pub max_frames: usize,
}

impl Default for SmtConfig {
    fn default() -> Self {
        Self {
            joints: 4,
            text_dim: crate::text::STUB_DIM,
            latent_dim: 64,
            n_layers: 2,
            n_retr_layers: 4,
            n_text_layers: 2,
            ffn_mult: 2,
            k: crate::retrieval::DEFAULT_K,
            stride: 4,
            max_frames: 32,
        }
    }
}

impl SmtConfig {
    pub fn pose_dim(&self) -> usize {
        PoseLayout::new(self.joints).dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("joints", self.joints),
            ("text_dim", self.text_dim),
            ("latent_dim", self.latent_dim),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
            ("k", self.k),
            ("stride", self.stride),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("model config field {name} must be positive")));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a scalar position: `d/2` sines then `d/2` cosines.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

fn positions(n: usize, d: usize) -> Tensor {
    let data = (0..n).flat_map(|p| sinusoid(p as f64, d)).collect();
    Tensor::matrix(n, d, data).expect("n×d table")
}

/// Residual sublayer output `X + P(SiLU(LN(Y)·(1 + m(e)) + a(e)))`. The
/// timestep heads `m` and `a` start at zero, so training begins from an
/// unmodulated block.
#[derive(Clone, Copy, Debug)]
pub struct Stylization {
    scale: Linear,
    shift: Linear,
    norm: LayerNorm,
    out: Linear,
}

impl Stylization {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            scale: Linear::zeros(s, &format!("{name}.scale"), d, d, true),
            shift: Linear::zeros(s, &format!("{name}.shift"), d, d, true),
            norm: LayerNorm::new(s, &format!("{name}.norm"), d),
            out: Linear::new(s, &format!("{name}.out"), d, d, true, rng),
        }
    }

    /// `x`: residual input, `y`: sublayer output, `e`: SiLU of the timestep embedding (`1×d`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, y: Var, e: Var) -> Result<Var> {
        let n = g.shape(y)[0];
        let m = self.scale.forward(g, p, e)?;
        let m = g.add_scalar(m, 1.0);
        let m = g.expand_rows(m, n)?;
        let a = self.shift.forward(g, p, e)?;
        let a = g.expand_rows(a, n)?;
        let h = self.norm.forward(g, p, y)?;
        let h = g.mul(h, m)?;
        let h = g.add(h, a)?;
        let h = g.silu(h);
        let h = self.out.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Pre-norm linear self-attention + feed-forward encoder layer.
#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            q: Linear::new(s, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(s, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(s, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, true, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
            ffn: Mlp::new(s, &format!("{name}.ffn"), d, d * mult, d, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let n = self.ln1.forward(g, p, h)?;
        let q = self.q.forward(g, p, n)?;
        let k = self.k.forward(g, p, n)?;
        let v = self.v.forward(g, p, n)?;
        let a = g.linear_attention(q, k, v)?;
        let a = self.o.forward(g, p, a)?;
        let h = g.add(h, a)?;
        let n = self.ln2.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, n)?;
        Ok(g.add(h, f)?)
    }
}

/// Projection + positional encoding + encoder stack + final norm.
#[derive(Clone, Debug)]
pub(crate) struct SequenceEncoder {
    proj: Linear,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    dim: usize,
}

impl SequenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng + ?Sized>(
        s: &mut ParamStore,
        name: &str,
        d_in: usize,
        d: usize,
        n_layers: usize,
        mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(s, &format!("{name}.proj"), d_in, d, true, rng),
            layers: (0..n_layers)
                .map(|i| EncoderLayer::new(s, &format!("{name}.layer{i}"), d, mult, rng))
                .collect(),
            norm: LayerNorm::new(s, &format!("{name}.norm"), d),
            dim: d,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.proj.forward(g, p, x)?;
        let pos = g.constant(positions(n, self.dim));
        let mut h = g.add(h, pos)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h)?;
        }
        Ok(self.norm.forward(g, p, h)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct SmaLayer {
    ln: LayerNorm,
    q: Linear,
    k_self: Linear,
    v_self: Linear,
    k_text: Linear,
    v_text: Linear,
    k_retr: Linear,
    v_retr: Linear,
    style: Stylization,
}

impl SmaLayer {
    fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let mut lin = |part: &str| Linear::new(s, &format!("{name}.{part}"), d, d, false, rng);
        let (q, k_self, v_self) = (lin("q"), lin("k_self"), lin("v_self"));
        let (k_text, v_text, k_retr, v_retr) = (lin("k_text"), lin("v_text"), lin("k_retr"), lin("v_retr"));
        Self {
            ln: LayerNorm::new(s, &format!("{name}.ln"), d),
            q,
            k_self,
            v_self,
            k_text,
            v_text,
            k_retr,
            v_retr,
            style: Stylization::new(s, &format!("{name}.style"), d, rng),
        }
    }

    /// Key/value row counts are returned for inspection.
    fn forward(&self, g: &mut Graph, p: &Bound, h: Var, ctx: &Context, e: Var) -> Result<(Var, usize)> {
        let n = self.ln.forward(g, p, h)?;
        let q = self.q.forward(g, p, n)?;
        let mut keys = vec![self.k_self.forward(g, p, n)?];
        let mut values = vec![self.v_self.forward(g, p, n)?];
        if let Some(Some(prompt)) = ctx.text.first() {
            keys.push(self.k_text.forward(g, p, *prompt)?);
            values.push(self.v_text.forward(g, p, *prompt)?);
        }
        if let [Some(fused), Some(rm)] = ctx.retr[..] {
            keys.push(self.k_retr.forward(g, p, fused)?);
            values.push(self.v_retr.forward(g, p, rm)?);
        }
        let k = g.concat_rows(&keys)?;
        let v = g.concat_rows(&values)?;
        let rows = g.shape(k)[0];
        if rows != g.shape(v)[0] {
            return Err(Error::Contract(format!(
                "key rows {rows} != value rows {}",
                g.shape(v)[0]
            )));
        }
        let y = g.linear_attention(q, k, v)?;
        Ok((self.style.forward(g, p, h, y, e)?, rows))
    }
}

#[derive(Clone, Copy, Debug)]
struct FfnLayer {
    ln: LayerNorm,
    ffn: Mlp,
    style: Stylization,
}

impl FfnLayer {
    fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(s, &format!("{name}.ln"), d),
            ffn: Mlp::new(s, &format!("{name}.ffn"), d, d * mult, d, rng),
            style: Stylization::new(s, &format!("{name}.style"), d, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, h: Var, e: Var) -> Result<Var> {
        let n = self.ln.forward(g, p, h)?;
        let y = self.ffn.forward(g, p, n)?;
        self.style.forward(g, p, h, y, e)
    }
}

/// One retrieved training sample, in normalized pose units.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedSample {
    pub motion: Tensor,
    /// Token features of the sample's caption.
    pub caption_tokens: Tensor,
}

/// Raw conditions for one generation: prompt token features (or none) and
/// the retrieved samples (empty when retrieval is absent).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmtCondition {
    pub prompt: Option<Tensor>,
    pub retrieved: Vec<RetrievedSample>,
}

#[derive(Clone, Debug)]
pub struct SmtModel {
    cfg: SmtConfig,
    store: ParamStore,
    time_mlp: Mlp,
    prompt_enc: SequenceEncoder,
    retr_text_enc: SequenceEncoder,
    retr_motion_enc: SequenceEncoder,
    fuse: Linear,
    input: Linear,
    sma: Vec<SmaLayer>,
    ffn: Vec<FfnLayer>,
    out_norm: LayerNorm,
    output: Linear,
}

impl SmtModel {
    pub fn new<R: Rng + ?Sized>(cfg: SmtConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let pose = cfg.pose_dim();
        let mut s = ParamStore::new();
        let time_mlp = Mlp::new(&mut s, "time", d, d, d, rng);
        let prompt_enc = SequenceEncoder::new(&mut s, "prompt", cfg.text_dim, d, cfg.n_text_layers, cfg.ffn_mult, rng);
        let retr_text_enc =
            SequenceEncoder::new(&mut s, "retr_text", cfg.text_dim, d, cfg.n_text_layers, cfg.ffn_mult, rng);
        let retr_motion_enc =
            SequenceEncoder::new(&mut s, "retr_motion", pose, d, cfg.n_retr_layers, cfg.ffn_mult, rng);
        let fuse = Linear::new(&mut s, "retr_fuse", 2 * d, d, true, rng);
        let input = Linear::new(&mut s, "input", pose, d, true, rng);
        let mut sma = Vec::new();
        let mut ffn = Vec::new();
        for i in 0..cfg.n_layers {
            sma.push(SmaLayer::new(&mut s, &format!("decoder{i}.sma"), d, rng));
            ffn.push(FfnLayer::new(&mut s, &format!("decoder{i}.ffn"), d, cfg.ffn_mult, rng));
        }
        let out_norm = LayerNorm::new(&mut s, "out_norm", d);
        let output = Linear::new(&mut s, "output", d, pose, true, rng);
        Ok(Self {
            cfg,
            store: s,
            time_mlp,
            prompt_enc,
            retr_text_enc,
            retr_motion_enc,
            fuse,
            input,
            sma,
            ffn,
            out_norm,
            output,
        })
    }

    pub fn config(&self) -> &SmtConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `e_t`: sinusoidal encoding of `t` through a two-layer MLP (`1×D`).
    pub fn timestep_embedding(&self, g: &mut Graph, p: &Bound, t: usize) -> Result<Var> {
        let d = self.cfg.latent_dim;
        let s = g.constant(Tensor::matrix(1, d, sinusoid(t as f64, d))?);
        Ok(self.time_mlp.forward(g, p, s)?)
    }

    /// `n_tok × D` prompt features.
    pub fn encode_prompt(&self, g: &mut Graph, p: &Bound, tokens: &Tensor) -> Result<Var> {
        self.check_tokens(tokens)?;
        let x = g.constant(tokens.clone());
        self.prompt_enc.forward(g, p, x)
    }

    fn check_tokens(&self, tokens: &Tensor) -> Result<()> {
        if !tokens.is_matrix() || tokens.rows() == 0 || tokens.cols() != self.cfg.text_dim {
            return Err(Error::Dimension(format!(
                "token features must be n×{}, got {:?}",
                self.cfg.text_dim,
                tokens.shape()
            )));
        }
        Ok(())
    }

    /// `(R^m, R^t, fused keys)`: per-sample motion features at the configured
    /// stride, stacked; one last-token caption feature per sample; and the
    /// channel fusion of each `R^m` block with its sample's `R^t` row.
    pub fn encode_retrieval(
        &self,
        g: &mut Graph,
        p: &Bound,
        samples: &[RetrievedSample],
    ) -> Result<(Var, Var, Var)> {
        if samples.is_empty() {
            return Err(Error::Contract("retrieval condition present but no samples given".into()));
        }
        let mut rm_blocks = Vec::with_capacity(samples.len());
        let mut rt_rows = Vec::with_capacity(samples.len());
        let mut fused = Vec::with_capacity(samples.len());
        for s in samples {
            self.check_motion(&s.motion)?;
            self.check_tokens(&s.caption_tokens)?;
            let x = g.constant(s.motion.clone());
            let h = self.retr_motion_enc.forward(g, p, x)?;
            let keep: Vec<usize> = (0..s.motion.rows()).step_by(self.cfg.stride).collect();
            let rm = g.select_rows(h, &keep)?;
            let tok = g.constant(s.caption_tokens.clone());
            let th = self.retr_text_enc.forward(g, p, tok)?;
            let last = s.caption_tokens.rows() - 1;
            let rt = g.slice_rows(th, last, last + 1)?;
            let rt_b = g.expand_rows(rt, keep.len())?;
            let cat = g.concat_cols(&[rm, rt_b])?;
            fused.push(self.fuse.forward(g, p, cat)?);
            rm_blocks.push(rm);
            rt_rows.push(rt);
        }
        let rm = g.concat_rows(&rm_blocks)?;
        let rt = g.concat_rows(&rt_rows)?;
        let fused = g.concat_rows(&fused)?;
        Ok((rm, rt, fused))
    }

    fn check_motion(&self, m: &Tensor) -> Result<()> {
        if !m.is_matrix() || m.rows() == 0 || m.cols() != self.cfg.pose_dim() {
            return Err(Error::Dimension(format!(
                "motion must be F×{}, got {:?}",
                self.cfg.pose_dim(),
                m.shape()
            )));
        }
        if m.rows() > self.cfg.max_frames {
            return Err(Error::Contract(format!(
                "{} frames exceed the model maximum of {}",
                m.rows(),
                self.cfg.max_frames
            )));
        }
        Ok(())
    }

    /// Forward pass returning the x̂₀ estimate and the key row count of each
    /// SMA layer.
    pub fn forward_inspect(
        &self,
        g: &mut Graph,
        p: &Bound,
        ctx: &Context,
        x_t: Var,
        t: usize,
    ) -> Result<(Var, Vec<usize>)> {
        self.check_motion(g.value(x_t))?;
        let f = g.shape(x_t)[0];
        let e = self.timestep_embedding(g, p, t)?;
        let e = g.silu(e);
        let h = self.input.forward(g, p, x_t)?;
        let pos = g.constant(positions(f, self.cfg.latent_dim));
        let mut h = g.add(h, pos)?;
        let mut rows = Vec::with_capacity(self.sma.len());
        for (sma, ffn) in self.sma.iter().zip(&self.ffn) {
            let (next, r) = sma.forward(g, p, h, ctx, e)?;
            rows.push(r);
            h = ffn.forward(g, p, next, e)?;
        }
        let h = self.out_norm.forward(g, p, h)?;
        Ok((self.output.forward(g, p, h)?, rows))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "kind": "smt", "config": self.cfg, "extra": extra });
        checkpoint::save(path, &meta, &self.store)
    }

    /// Loads a checkpoint; returns the model and the `extra` metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (meta, tensors) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("smt") {
            return Err(Error::Format(format!("{}: not a denoiser checkpoint", path.display())));
        }
        let cfg: SmtConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("{}: bad model config: {e}", path.display())))?;
        let mut model = Self::new(cfg, &mut crate::seed::stream(0, "smt/load"))?;
        checkpoint::restore(&mut model.store, tensors)?;
        Ok((model, meta["extra"].clone()))
    }
}

impl Denoiser for SmtModel {
    type Cond = SmtCondition;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn encode(&self, g: &mut Graph, p: &Bound, cond: &SmtCondition) -> Result<Context> {
        let text = match &cond.prompt {
            Some(tokens) => Some(self.encode_prompt(g, p, tokens)?),
            None => None,
        };
        let retr = if cond.retrieved.is_empty() {
            vec![None, None]
        } else {
            let (rm, _rt, fused) = self.encode_retrieval(g, p, &cond.retrieved)?;
            vec![Some(fused), Some(rm)]
        };
        Ok(Context {
            text: vec![text],
            retr,
        })
    }

    fn denoise(&self, g: &mut Graph, p: &Bound, ctx: &Context, x_t: Var, t: usize) -> Result<Var> {
        Ok(self.forward_inspect(g, p, ctx, x_t, t)?.0)
    }
}

impl SmtModel {
    /// Overwrites every parameter (including zero-initialized heads) with
    /// `N(0, scale²)` draws, so that no path through the network is inert.
    pub fn randomize_params<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            *self.store.get_mut(id) = Tensor::randn(&shape, rng).map(|v| v * scale);
        }
    }

    /// Worst relative central-difference disagreement of the denoising loss
    /// gradient over every parameter tensor of the model.
    pub fn loss_gradcheck(
        &self,
        schedule: &crate::diffusion::DiffusionSchedule,
        cond: &SmtCondition,
        x0: &Tensor,
        draw: &crate::diffusion::LossDraw,
        h: f64,
    ) -> Result<f64> {
        let mut worst = 0.0f64;
        for id in self.store.ids() {
            let err = rmd_tensor::finite_diff_check(
                |g, leaf| {
                    let mut p = self.store.bind(g, false);
                    p.set(id, leaf);
                    crate::diffusion::batch_loss(self, g, &p, schedule, &[(cond, x0, draw)])
                        .map_err(|e| rmd_tensor::TensorError::Contract(e.to_string()))
                },
                self.store.get(id),
                h,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}
