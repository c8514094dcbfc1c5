use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmd_core::diffusion::{
    batch_loss, classifier_free_estimates, mix_estimates, p_sample_step, sample_normalized,
    standard_normal, Context, Denoiser, DiffusionSchedule, LossDraw, PosteriorRule,
    TrajectoryNoise, ConditionSet,
};
use rmd_core::mixture::MixtureWeights;
use rmd_core::toy::{LinearToy, ToyCond};
use rmd_core::Result;
use rmd_tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[test]
fn respaced_alpha_bar_matches_exactly() {
    let s = DiffusionSchedule::default();
    for n in [1, 2, 7, 50, 333, 1000] {
        let r = s.respace(n).unwrap();
        for (i, (&t, c)) in r.kept.iter().zip(r.cumulative_alpha()).enumerate() {
            assert!((c - s.alpha_bar(t)).abs() <= 1e-12, "n={n} s={i}");
            assert_eq!(r.alpha_bar[i], s.alpha_bar(t));
        }
    }
}

#[test]
fn zero_noise_round_trip_recovers_x0() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = standard_normal(&[6, 5], &mut rng);
    for n in [50, 1000] {
        let r = s.respace(n).unwrap();
        let last = r.len() - 1;
        let zero = Tensor::zeros(x0.shape());
        let mut x = s.q_sample(&x0, r.kept[last], &zero).unwrap();
        for step in (0..=last).rev() {
            // With ε = 0 every intermediate state is √ᾱ·x₀.
            let expect = x0.scale(r.alpha_bar_prev(step).sqrt());
            x = p_sample_step(&r, step, &x, &x0, None, PosteriorRule::Standard).unwrap();
            assert!(x.max_abs_diff(&expect) <= 1e-10, "step {step}");
        }
        assert!(x.max_abs_diff(&x0) <= 1e-8);
    }
}

#[test]
fn q_sample_limits_and_moments() {
    let s = DiffusionSchedule::default();
    let x0 = Tensor::from_rows(&[vec![3.0, -2.0, 1.5, 4.0], vec![-3.5, 2.5, 2.0, -1.0]]).unwrap();
    let zero = Tensor::zeros(x0.shape());
    let t = 150;
    let ab = s.alpha_bar(t);
    assert!(s.q_sample(&x0, t, &zero).unwrap().max_abs_diff(&x0.scale(ab.sqrt())) < 1e-15);
    let eps = Tensor::full(x0.shape(), 0.7);
    let far = s.q_sample(&x0, 1000, &eps).unwrap();
    assert!(far.max_abs_diff(&eps) < 0.03);
    assert!(s.q_sample(&x0, 0, &zero).is_err());
    assert!(s.q_sample(&x0, 1001, &zero).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 10_000;
    let n = x0.numel();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        let e = standard_normal(x0.shape(), &mut rng);
        let xt = s.q_sample(&x0, t, &e).unwrap();
        for (i, v) in xt.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let mut pooled_var = 0.0;
    for i in 0..n {
        let mean = sum[i] / draws as f64;
        let expect = ab.sqrt() * x0.data()[i];
        assert!((mean - expect).abs() <= 0.02 * expect.abs(), "mean {mean} vs {expect}");
        pooled_var += sq[i] / draws as f64 - mean * mean;
    }
    pooled_var /= n as f64;
    assert!((pooled_var / (1.0 - ab) - 1.0).abs() <= 0.02, "{pooled_var}");
}

/// Returns `x_t` unchanged.
struct Identity(ParamStore);

impl Denoiser for Identity {
    type Cond = ();
    fn params(&self) -> &ParamStore {
        &self.0
    }
    fn encode(&self, _: &mut Graph, _: &Bound, _: &()) -> Result<Context> {
        Ok(Context::default())
    }
    fn denoise(&self, _: &mut Graph, _: &Bound, _: &Context, x_t: Var, _: usize) -> Result<Var> {
        Ok(x_t)
    }
}

/// Returns a fixed tensor.
struct Oracle(ParamStore, Tensor);

impl Denoiser for Oracle {
    type Cond = ();
    fn params(&self) -> &ParamStore {
        &self.0
    }
    fn encode(&self, _: &mut Graph, _: &Bound, _: &()) -> Result<Context> {
        Ok(Context::default())
    }
    fn denoise(&self, g: &mut Graph, _: &Bound, _: &Context, _: Var, _: usize) -> Result<Var> {
        Ok(g.constant(self.1.clone()))
    }
}

#[test]
fn loss_oracles() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0s: Vec<Tensor> = (0..3).map(|_| standard_normal(&[4, 3], &mut rng)).collect();
    let draws: Vec<LossDraw> = (0..3).map(|_| LossDraw::draw(&mut rng, &s, &[4, 3], 0.1, 0.1)).collect();
    assert!(draws.iter().all(|d| (1..=1000).contains(&d.t)));

    let id = Identity(ParamStore::new());
    let mut g = Graph::new();
    let p = id.params().bind(&mut g, false);
    let batch: Vec<_> = x0s.iter().zip(&draws).map(|(x, d)| (&(), x, d)).collect();
    let lv = batch_loss(&id, &mut g, &p, &s, &batch).unwrap();
    let loss = g.value(lv).item();
    let mut direct = 0.0;
    for (x0, d) in x0s.iter().zip(&draws) {
        let xt = s.q_sample(x0, d.t, &d.eps).unwrap();
        direct += x0.zip_map(&xt, |a, b| (a - b) * (a - b)).unwrap().sum() / 12.0;
    }
    assert!((loss - direct / 3.0).abs() < 1e-12);
    assert!(loss >= 0.0);

    let exact = Oracle(ParamStore::new(), x0s[0].clone());
    let mut g = Graph::new();
    let p = exact.params().bind(&mut g, false);
    let l = batch_loss(&exact, &mut g, &p, &s, &[(&(), &x0s[0], &draws[0])]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn posterior_with_exact_estimate() {
    let s = DiffusionSchedule::default();
    let r = s.respace(50).unwrap();
    let x0 = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
    for step in [1, 17, 49] {
        let xt = s.q_sample(&x0, r.kept[step], &Tensor::zeros(x0.shape())).unwrap();
        let mu = p_sample_step(&r, step, &xt, &x0, None, PosteriorRule::Standard).unwrap();
        assert!(mu.max_abs_diff(&x0.scale(r.alpha_bar_prev(step).sqrt())) < 1e-12);
    }
}

fn toy() -> LinearToy {
    LinearToy::random(3, 2, 0.5, &mut ChaCha8Rng::seed_from_u64(8))
}

#[test]
fn classifier_free_estimates_match_linear_oracle() {
    let m = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = standard_normal(&[3, 2], &mut rng);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let ctx = m.encode(&mut g, &p, &ToyCond::FULL).unwrap();
    let xv = g.constant(x.clone());
    let est = classifier_free_estimates(&m, &mut g, &p, &ctx, xv, 10).unwrap();
    let flags = [(true, true), (true, false), (false, true), (false, false)];
    let mut vals = Vec::new();
    for (v, (t, r)) in est.iter().zip(flags) {
        let want = m.eval(&x, t, r).unwrap();
        assert_eq!(g.shape(*v), x.shape());
        assert_eq!(g.value(*v), &want);
        vals.push(want);
    }
    // S_t equals a forward pass whose context simply lacks retrieval.
    let no_retr = m.encode(&mut g, &p, &ToyCond { text: true, retr: false }).unwrap();
    let direct = m.denoise(&mut g, &p, &no_retr, xv, 10).unwrap();
    assert_eq!(g.value(direct), g.value(est[1]));
    assert_eq!(ctx.masked(ConditionSet::Text).has_retr(), false);

    let w = MixtureWeights::new(1.5, -0.25, 0.5, -0.75).unwrap();
    let arr: [Tensor; 4] = vals.try_into().unwrap();
    let mixed = mix_estimates(&arr, &w).unwrap();
    let mut want = Tensor::zeros(x.shape());
    for (e, wi) in arr.iter().zip(w.as_array()) {
        want.add_assign(&e.scale(wi));
    }
    assert!(mixed.max_abs_diff(&want) < 1e-12);
}

#[test]
fn sampling_is_seed_deterministic() {
    let m = toy();
    let s = DiffusionSchedule::default();
    let r = s.respace(50).unwrap();
    let ctx = m.encode_frozen(&ToyCond::FULL).unwrap();
    let w = MixtureWeights::full_condition();
    let run = |seed| {
        let noise = TrajectoryNoise::draw(&mut ChaCha8Rng::seed_from_u64(seed), 3, 2, 50);
        sample_normalized(&m, &ctx, &r, &w, &noise, PosteriorRule::Standard).unwrap()
    };
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), &[3, 2]);
    let literal = {
        let noise = TrajectoryNoise::draw(&mut ChaCha8Rng::seed_from_u64(4), 3, 2, 50);
        sample_normalized(&m, &ctx, &r, &w, &noise, PosteriorRule::Transcribed).unwrap()
    };
    assert!(literal.is_finite());
}
