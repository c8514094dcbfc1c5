//! Seeded synthetic motion corpus.
//!
//! Captions read "a person {action} {style}". The action fixes a per-dimension
//! sinusoid (amplitude, phase, base frequency); the style rescales tempo and
//! amplitude and adds a static pose offset. Holding out some (action, style)
//! pairs yields test captions whose words were all seen in training but never
//! together.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rmd_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, PoseLayout};
use crate::seed;

pub const ACTIONS: [&str; 8] = [
    "walks", "jumps", "waves", "kicks", "spins", "crouches", "stretches", "punches",
];
pub const STYLES: [&str; 8] = [
    "slowly", "quickly", "forward", "backward", "happily", "carefully", "sideways", "twice",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub joints: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    pub actions: usize,
    pub styles: usize,
    /// Sequences generated per (action, style) pair.
    pub instances: usize,
    /// Standard deviation of per-instance jitter.
    pub noise: f64,
    /// (action, style) index pairs routed to the test split.
    #[serde(default)]
    pub holdout: Vec<(usize, usize)>,
    /// Set from the run seed; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            joints: 4,
            min_frames: 16,
            max_frames: 16,
            fps: 20.0,
            actions: 4,
            styles: 4,
            instances: 1,
            noise: 0.05,
            holdout: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Holds out the diagonal pairs `(i, i)`, so every action and style still
    /// occurs in training as long as there are at least two of each.
    pub fn with_diagonal_holdout(mut self) -> Self {
        let n = self.actions.min(self.styles);
        self.holdout = (0..n).map(|i| (i, i)).collect();
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.actions == 0 || self.actions > ACTIONS.len() {
            return bad(format!("actions must be in 1..={}", ACTIONS.len()));
        }
        if self.styles == 0 || self.styles > STYLES.len() {
            return bad(format!("styles must be in 1..={}", STYLES.len()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 <= min_frames <= max_frames".into());
        }
        if self.instances == 0 {
            return bad("instances must be at least 1".into());
        }
        // Written with negations so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let invalid = !(self.fps > 0.0) || !(self.noise >= 0.0);
        if invalid {
            return bad("fps must be positive and noise non-negative".into());
        }
        if let Some(&(a, s)) = self.holdout.iter().find(|&&(a, s)| a >= self.actions || s >= self.styles) {
            return bad(format!("holdout pair ({a}, {s}) out of range"));
        }
        Ok(())
    }
}

pub fn caption(action: usize, style: usize) -> String {
    format!("a person {} {}", ACTIONS[action], STYLES[style])
}

struct ActionParams {
    amp: Vec<f64>,
    phase: Vec<f64>,
    omega: f64,
}

struct StyleParams {
    tempo: f64,
    gain: f64,
    offset: Vec<f64>,
}

fn action_params(seed: u64, a: usize, d: usize) -> ActionParams {
    let mut rng = seed::stream(seed, &format!("synthetic/action/{a}"));
    let amp = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let phase = (0..d)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    // Between half a cycle and one and a half cycles per 16 frames.
    let omega = std::f64::consts::TAU * rng.random_range(0.5..1.5) / 16.0;
    ActionParams { amp, phase, omega }
}

fn style_params(seed: u64, s: usize, d: usize) -> StyleParams {
    let mut rng = seed::stream(seed, &format!("synthetic/style/{s}"));
    let tempo = rng.random_range(0.6..1.6);
    let gain = rng.random_range(0.6..1.4);
    let offset = (0..d)
        .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    StyleParams {
        tempo,
        gain,
        offset,
    }
}

/// Generates `(train, test)` splits. Ids are `seq{n:04}` in generation order.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Vec<MotionSequence>, Vec<MotionSequence>)> {
    cfg.validate()?;
    let d = PoseLayout::new(cfg.joints).dim();
    let actions: Vec<_> = (0..cfg.actions).map(|a| action_params(cfg.seed, a, d)).collect();
    let styles: Vec<_> = (0..cfg.styles).map(|s| style_params(cfg.seed, s, d)).collect();
    let mut rng = seed::stream(cfg.seed, "synthetic/instances");

    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut n = 0usize;
    for (a, ap) in actions.iter().enumerate() {
        for (s, sp) in styles.iter().enumerate() {
            for _ in 0..cfg.instances {
                let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
                let mut data = Vec::with_capacity(frames * d);
                for f in 0..frames {
                    let t = f as f64 * ap.omega * sp.tempo;
                    for k in 0..d {
                        let jitter: f64 = StandardNormal.sample(&mut rng);
                        data.push(
                            sp.gain * ap.amp[k] * (t + ap.phase[k]).sin()
                                + sp.offset[k]
                                + cfg.noise * jitter,
                        );
                    }
                }
                let seq = MotionSequence::new(
                    format!("seq{n:04}"),
                    Tensor::matrix(frames, d, data)?,
                    cfg.fps,
                    vec![caption(a, s)],
                )?;
                n += 1;
                if cfg.holdout.contains(&(a, s)) {
                    test.push(seq);
                } else {
                    train.push(seq);
                }
            }
        }
    }
    Ok((train, test))
}
