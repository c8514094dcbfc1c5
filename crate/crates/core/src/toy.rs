//! A linear denoiser with closed-form conditional outputs,
//! `S(x_t) = x_t·A + 1[text]·C_t + 1[retr]·C_r + 1[text ∧ retr]·C_tr`,
//! used as an oracle for the mixture and sampling machinery.

use rand::Rng;
use rmd_tensor::nn::ParamId;
use rmd_tensor::{Bound, Graph, ParamStore, Tensor, Var};

use crate::diffusion::{Context, Denoiser};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearToy {
    store: ParamStore,
    a: ParamId,
    c_text: ParamId,
    c_retr: ParamId,
    c_both: ParamId,
}

/// Which conditions the toy "has"; absent ones are never encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyCond {
    pub text: bool,
    pub retr: bool,
}

impl ToyCond {
    pub const FULL: Self = Self {
        text: true,
        retr: true,
    };
}

impl LinearToy {
    pub fn new(a: Tensor, c_text: Tensor, c_retr: Tensor, c_both: Tensor) -> Result<Self> {
        let d = a.rows();
        if a.shape() != [d, d] {
            return Err(Error::Dimension(format!("A must be square, got {:?}", a.shape())));
        }
        for c in [&c_text, &c_retr, &c_both] {
            if c.shape() != c_text.shape() || c.cols() != d || !c.is_matrix() {
                return Err(Error::Dimension(format!(
                    "offsets must be F×{d} and equal-shaped, got {:?}",
                    c.shape()
                )));
            }
        }
        let mut store = ParamStore::new();
        Ok(Self {
            a: store.add("a", a),
            c_text: store.add("c_text", c_text),
            c_retr: store.add("c_retr", c_retr),
            c_both: store.add("c_both", c_both),
            store,
        })
    }

    /// `A = scale·I` and standard-normal offsets.
    pub fn random<R: Rng + ?Sized>(frames: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let offsets = |rng: &mut R| crate::diffusion::standard_normal(&[frames, dim], rng);
        let (ct, cr, cb) = (offsets(rng), offsets(rng), offsets(rng));
        Self::new(Tensor::eye(dim).scale(scale), ct, cr, cb).expect("consistent shapes")
    }

    pub fn frames(&self) -> usize {
        self.store.get(self.c_text).rows()
    }

    pub fn dim(&self) -> usize {
        self.store.get(self.a).rows()
    }

    /// Direct evaluation, for oracles.
    pub fn eval(&self, x_t: &Tensor, text: bool, retr: bool) -> Result<Tensor> {
        let mut out = rmd_tensor::matmul(x_t, self.store.get(self.a))?;
        let terms = [
            (text, self.c_text),
            (retr, self.c_retr),
            (text && retr, self.c_both),
        ];
        for (on, id) in terms {
            if on {
                out.add_assign(self.store.get(id));
            }
        }
        Ok(out)
    }
}

impl Denoiser for LinearToy {
    type Cond = ToyCond;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn encode(&self, g: &mut Graph, _: &Bound, cond: &ToyCond) -> Result<Context> {
        let mut marker = |on: bool| on.then(|| g.constant(Tensor::scalar(1.0)));
        Ok(Context {
            text: vec![marker(cond.text)],
            retr: vec![marker(cond.retr)],
        })
    }

    fn denoise(&self, g: &mut Graph, p: &Bound, ctx: &Context, x_t: Var, _t: usize) -> Result<Var> {
        let (text, retr) = (ctx.has_text(), ctx.has_retr());
        let mut out = g.matmul(x_t, p.get(self.a))?;
        let terms = [
            (text, self.c_text),
            (retr, self.c_retr),
            (text && retr, self.c_both),
        ];
        for (on, id) in terms {
            if on {
                out = g.add(out, p.get(id))?;
            }
        }
        Ok(out)
    }
}

/// A tail-finetuning problem with a known answer: reference motions are
/// sampled with `w_init` for the head and `w_star` for the tail, using the
/// same per-item noise the optimizer sees, so the objective is minimized
/// exactly at `w_star`.
pub struct PlantedTail {
    pub model: LinearToy,
    pub items: Vec<crate::mixture::TailItem>,
    pub respaced: crate::diffusion::RespacedSchedule,
    pub real: crate::metrics::Gaussian,
    pub w_init: crate::mixture::MixtureWeights,
    pub w_star: crate::mixture::MixtureWeights,
    pub noise_seed: u64,
}

impl PlantedTail {
    pub fn new(
        seed: u64,
        n_items: usize,
        w_init: crate::mixture::MixtureWeights,
        w_star: crate::mixture::MixtureWeights,
        tail_steps: usize,
    ) -> Result<Self> {
        use crate::diffusion::{run_steps, DiffusionSchedule, PosteriorRule};
        use crate::mixture::{item_noise, FeatureExtractor, FlattenFeatures, TailItem};

        let (frames, dim) = (2, 2);
        let model = LinearToy::random(frames, dim, 0.5, &mut crate::seed::stream(seed, "planted/model"));
        let respaced = DiffusionSchedule::default().respace(crate::diffusion::DEFAULT_INFER_STEPS)?;
        let n = respaced.len();
        let ctx = model.encode_frozen(&ToyCond::FULL)?;
        let items: Vec<TailItem> = (0..n_items)
            .map(|_| TailItem {
                ctx: ctx.clone(),
                frames,
            })
            .collect();
        let noise_seed = seed ^ 0x7a11;
        let mut real_motions = Vec::with_capacity(n_items);
        for (i, item) in items.iter().enumerate() {
            let nz = item_noise(noise_seed, i, frames, dim, n);
            let rule = PosteriorRule::Standard;
            let head = run_steps(&model, &item.ctx, &respaced, nz.start.clone(), tail_steps..=n - 1, &w_init, &nz, rule)?;
            real_motions.push(run_steps(&model, &item.ctx, &respaced, head, 0..=tail_steps - 1, &w_star, &nz, rule)?);
        }
        let real = crate::metrics::Gaussian::fit(&FlattenFeatures::default().features_of(&real_motions)?)?;
        Ok(Self {
            model,
            items,
            respaced,
            real,
            w_init,
            w_star,
            noise_seed,
        })
    }

    /// Runs the finetuner on this problem with fixed (non-resampled) noise.
    pub fn solve(&self, opt_steps: usize, lr: f64, tail_steps: usize) -> Result<crate::mixture::TailReport> {
        let cfg = crate::mixture::TailConfig {
            tail_steps,
            opt_steps,
            lr,
            resample_noise: false,
            divergence_factor: 10.0,
            seed: self.noise_seed,
        };
        crate::mixture::finetune_tail(
            &self.model,
            &crate::mixture::FlattenFeatures::default(),
            &self.items,
            self.model.dim(),
            &self.respaced,
            &self.w_init,
            &self.real,
            &cfg,
            crate::diffusion::PosteriorRule::Standard,
        )
    }
}
