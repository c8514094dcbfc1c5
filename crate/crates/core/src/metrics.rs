//! Evaluation metrics over evaluator features: Fréchet distance,
//! R-precision, multimodal distance, diversity, multimodality, caption
//! rareness and rareness-stratified multimodal distance.

use std::collections::BTreeMap;

use rand::Rng;
use rmd_tensor::kernels::{sqrtm_psd, trace_sqrt_psd};
use rmd_tensor::{matmul, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TextProvider;

/// Ridge added to covariances estimated from fewer samples than dimensions.
pub const COV_SHRINKAGE: f64 = 1e-6;
pub const R_PRECISION_BATCH: usize = 32;
pub const DIVERSITY_PAIRS: usize = 300;
pub const MULTIMODALITY_REPS: usize = 10;
/// Balanced multimodal distance bins `[0, RARENESS_RANGE]` into this many bins.
pub const RARENESS_BINS: usize = 100;
pub const RARENESS_RANGE: f64 = 0.25;
pub const TAIL_FRACTION: f64 = 0.05;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: Tensor,
}

impl Gaussian {
    /// Unbiased estimate from the rows of `feats` (`n ≥ 2`); a small ridge
    /// is added when `n < d`.
    pub fn fit(feats: &Tensor) -> Result<Self> {
        let (n, d) = (feats.rows(), feats.cols());
        if !feats.is_matrix() || n < 2 {
            return Err(Error::Contract(format!(
                "need at least two feature rows, got shape {:?}",
                feats.shape()
            )));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(feats.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = Tensor::new(
            vec![n, d],
            feats.data().iter().enumerate().map(|(i, v)| v - mean[i % d]).collect(),
        )?;
        let mut cov = matmul(&centered.transpose(), &centered)?.scale(1.0 / (n - 1) as f64);
        if n < d {
            for i in 0..d {
                cov.data_mut()[i * d + i] += COV_SHRINKAGE;
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `‖μa − μb‖² + tr Σa + tr Σb − 2·tr √(√Σa · Σb · √Σa)`.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr = |m: &Tensor| (0..d).map(|i| m.at(i, i)).sum::<f64>();
    let root = sqrtm_psd(&a.cov)?;
    let inner = matmul(&matmul(&root, &b.cov)?, &root)?;
    Ok(mean_term + tr(&a.cov) + tr(&b.cov) - 2.0 * trace_sqrt_psd(&inner)?)
}

pub fn fid(real: &Tensor, gen: &Tensor) -> Result<f64> {
    frechet_distance(&Gaussian::fit(real)?, &Gaussian::fit(gen)?)
}

/// Differentiable Fréchet distance of generated feature rows against a
/// fixed reference Gaussian.
pub fn fid_graph(g: &mut Graph, gen: Var, real: &Gaussian) -> Result<Var> {
    let shape = g.shape(gen).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Contract(format!("need at least two feature rows, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if d != real.dim() {
        return Err(Error::Dimension(format!("feature dimensions differ: {d} vs {}", real.dim())));
    }
    let mu = g.mean_rows(gen)?;
    let mu_rows = g.expand_rows(mu, n)?;
    let centered = g.sub(gen, mu_rows)?;
    let ct = g.transpose(centered)?;
    let cov = g.matmul(ct, centered)?;
    let mut cov = g.scale(cov, 1.0 / (n - 1) as f64);
    if n < d {
        let ridge = g.constant(Tensor::eye(d).scale(COV_SHRINKAGE));
        cov = g.add(cov, ridge)?;
    }

    let mu_real = g.constant(Tensor::matrix(1, d, real.mean.clone())?);
    let diff = g.sub(mu, mu_real)?;
    let sq = g.mul(diff, diff)?;
    let mean_term = g.sum(sq);

    let root = g.constant(sqrtm_psd(&real.cov)?);
    let left = g.matmul(root, cov)?;
    let inner = g.matmul(left, root)?;
    let cross = g.trace_sqrt_psd(inner)?;
    let tr_gen = g.trace(cov)?;
    let tr_real: f64 = (0..d).map(|i| real.cov.at(i, i)).sum();

    let a = g.add(mean_term, tr_gen)?;
    let b = g.scale(cross, -2.0);
    let out = g.add(a, b)?;
    Ok(g.add_scalar(out, tr_real))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pairs(motion: &Tensor, text: &Tensor) -> Result<()> {
    if motion.shape() != text.shape() || !motion.is_matrix() {
        return Err(Error::Dimension(format!(
            "motion features {:?} and text features {:?} must be equal-shaped matrices",
            motion.shape(),
            text.shape()
        )));
    }
    Ok(())
}

/// R@1..3 over consecutive batches of 32 pairs (a trailing partial batch is
/// dropped). Texts are ranked by Euclidean distance to each motion; ties go
/// to the lower index.
pub fn r_precision(motion: &Tensor, text: &Tensor) -> Result<[f64; 3]> {
    check_pairs(motion, text)?;
    let n = motion.rows();
    if n < R_PRECISION_BATCH {
        return Err(Error::Contract(format!(
            "R-precision needs at least {R_PRECISION_BATCH} pairs, got {n}"
        )));
    }
    let batches = n / R_PRECISION_BATCH;
    let mut hits = [0usize; 3];
    for b in 0..batches {
        let base = b * R_PRECISION_BATCH;
        for i in 0..R_PRECISION_BATCH {
            let m = motion.row(base + i);
            let dists: Vec<f64> = (0..R_PRECISION_BATCH)
                .map(|j| euclid(m, text.row(base + j)))
                .collect();
            let rank = 1 + (0..R_PRECISION_BATCH)
                .filter(|&j| dists[j] < dists[i] || (dists[j] == dists[i] && j < i))
                .count();
            for (k, h) in hits.iter_mut().enumerate() {
                if rank <= k + 1 {
                    *h += 1;
                }
            }
        }
    }
    let total = (batches * R_PRECISION_BATCH) as f64;
    Ok(hits.map(|h| h as f64 / total))
}

pub fn mm_dist(motion: &Tensor, text: &Tensor) -> Result<f64> {
    check_pairs(motion, text)?;
    if motion.rows() == 0 {
        return Err(Error::Contract("multimodal distance needs at least one pair".into()));
    }
    let n = motion.rows();
    Ok((0..n).map(|i| euclid(motion.row(i), text.row(i))).sum::<f64>() / n as f64)
}

/// Per-pair distances, as fed to the stratified metrics.
pub fn pair_distances(motion: &Tensor, text: &Tensor) -> Result<Vec<f64>> {
    check_pairs(motion, text)?;
    Ok((0..motion.rows()).map(|i| euclid(motion.row(i), text.row(i))).collect())
}

fn random_pair<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let j = rng.random_range(0..n - 1);
    (i, if j >= i { j + 1 } else { j })
}

/// Mean distance over `n_pairs` random pairs of distinct rows.
pub fn diversity<R: Rng + ?Sized>(feats: &Tensor, n_pairs: usize, rng: &mut R) -> Result<f64> {
    let n = feats.rows();
    if !feats.is_matrix() || n < 2 || n_pairs == 0 {
        return Err(Error::Contract(format!(
            "diversity needs ≥ 2 features and ≥ 1 pair, got {n} features"
        )));
    }
    let mut acc = 0.0;
    for _ in 0..n_pairs {
        let (i, j) = random_pair(rng, n);
        acc += euclid(feats.row(i), feats.row(j));
    }
    Ok(acc / n_pairs as f64)
}

/// Mean over prompts of the mean distance between `reps` random pairs of
/// that prompt's generations.
pub fn multimodality<R: Rng + ?Sized>(
    per_prompt: &BTreeMap<String, Tensor>,
    reps: usize,
    rng: &mut R,
) -> Result<f64> {
    if per_prompt.is_empty() || reps == 0 {
        return Err(Error::Contract("multimodality needs ≥ 1 prompt and ≥ 1 repetition".into()));
    }
    let mut total = 0.0;
    for (prompt, feats) in per_prompt {
        let n = feats.rows();
        if n < 2 {
            return Err(Error::Contract(format!(
                "prompt {prompt:?} has {n} generation(s); multimodality needs at least 2"
            )));
        }
        let mut acc = 0.0;
        for _ in 0..reps {
            let (i, j) = random_pair(rng, n);
            acc += euclid(feats.row(i), feats.row(j));
        }
        total += acc / reps as f64;
    }
    Ok(total / per_prompt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RarenessRecord {
    pub prompt: String,
    pub r_p: f64,
}

/// `1 − max_i cos(prompt, train_i)` over unit-norm embeddings, clamped to
/// `[0, 2]`. A training embedding identical to the prompt's counts as cosine 1.
pub fn rareness_of(prompt: &[f64], train: &[Vec<f64>]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Contract("rareness needs a non-empty training caption set".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for t in train {
        if t.len() != prompt.len() {
            return Err(Error::Dimension(format!(
                "embedding widths differ: {} vs {}",
                t.len(),
                prompt.len()
            )));
        }
        // cos(v, v) is 1 by definition; the dot product may round below it.
        let c: f64 = if t.as_slice() == prompt {
            1.0
        } else {
            t.iter().zip(prompt).map(|(a, b)| a * b).sum()
        };
        best = best.max(c);
    }
    Ok((1.0 - best).clamp(0.0, 2.0))
}

pub fn rareness(prompt: &str, train_prompts: &[String], provider: &TextProvider) -> Result<RarenessRecord> {
    let q = provider.embed_sentence(prompt)?.vector;
    let train = train_prompts
        .iter()
        .map(|t| provider.embed_sentence(t).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    Ok(RarenessRecord {
        prompt: prompt.to_string(),
        r_p: rareness_of(&q, &train)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedRecord {
    pub prompt: String,
    pub r_p: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedMm {
    pub tail5_mm: f64,
    pub balanced_mm: f64,
    pub histogram: Vec<usize>,
}

/// Bin of a rareness value: `⌊100·r / 0.25⌋`, top edge closed, values
/// outside the range clamped to the end bins.
pub fn rareness_bin(r: f64) -> usize {
    let b = (RARENESS_BINS as f64 * r / RARENESS_RANGE).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as usize).min(RARENESS_BINS - 1)
    }
}

pub fn stratified_mm(records: &[StratifiedRecord]) -> Result<StratifiedMm> {
    if records.is_empty() {
        return Err(Error::Contract("stratified metrics need at least one record".into()));
    }
    let mut sorted: Vec<&StratifiedRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.r_p.total_cmp(&b.r_p).then_with(|| a.prompt.cmp(&b.prompt)));
    let tail = ((records.len() as f64 * TAIL_FRACTION).ceil() as usize).max(1);
    let tail5_mm = sorted[sorted.len() - tail..].iter().map(|r| r.value).sum::<f64>() / tail as f64;

    let mut sums = vec![0.0; RARENESS_BINS];
    let mut histogram = vec![0usize; RARENESS_BINS];
    for r in records {
        let b = rareness_bin(r.r_p);
        sums[b] += r.value;
        histogram[b] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&histogram)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let balanced_mm = means.iter().sum::<f64>() / means.len() as f64;
    Ok(StratifiedMm {
        tail5_mm,
        balanced_mm,
        histogram,
    })
}

/// Plain-text bar plot of a histogram, one line per non-empty bin.
pub fn histogram_bars(histogram: &[usize], width: usize) -> String {
    let max = histogram.iter().copied().max().unwrap_or(0).max(1);
    let step = RARENESS_RANGE / histogram.len().max(1) as f64;
    let mut out = String::new();
    for (i, &c) in histogram.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let bar = "#".repeat((c * width).div_ceil(max));
        out.push_str(&format!(
            "[{:.4}, {:.4}) {:>6} {bar}\n",
            i as f64 * step,
            (i + 1) as f64 * step,
            c
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    /// `None` when there are fewer pairs than one ranking batch.
    pub r_precision: Option<[f64; 3]>,
    pub mm_dist: f64,
    pub diversity: f64,
    pub multimodality: Option<f64>,
    pub rareness: Option<StratifiedMm>,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.fid.is_finite()
            && self.r_precision.is_none_or(|r| r.iter().all(|v| v.is_finite()))
            && self.mm_dist.is_finite()
            && self.diversity.is_finite()
            && opt(self.multimodality)
            && self
                .rareness
                .as_ref()
                .is_none_or(|r| r.tail5_mm.is_finite() && r.balanced_mm.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_dist_examples() {
        let m = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(mm_dist(&m, &m).unwrap(), 0.0);
        let one = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let three = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        assert_eq!(mm_dist(&one, &three).unwrap(), 3.0);
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(mm_dist(&m, &t).unwrap(), 2.0);
    }

    #[test]
    fn multimodality_examples() {
        let mut rng = crate::seed::stream(0, "mm");
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        map.insert("b".to_string(), Tensor::from_rows(&[vec![0.0], vec![3.0]]).unwrap());
        assert_eq!(multimodality(&map, 10, &mut rng).unwrap(), 2.0);
        map.insert("c".to_string(), Tensor::from_rows(&[vec![0.0]]).unwrap());
        assert!(matches!(multimodality(&map, 10, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn diversity_examples() {
        let mut rng = crate::seed::stream(0, "div");
        let same = Tensor::from_rows(&vec![vec![0.5, 0.5]; 5]).unwrap();
        assert_eq!(diversity(&same, 300, &mut rng).unwrap(), 0.0);
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 }]).collect();
        let two = Tensor::from_rows(&rows).unwrap();
        let a = diversity(&two, 300, &mut crate::seed::stream(4, "d")).unwrap();
        let b = diversity(&two, 300, &mut crate::seed::stream(4, "d")).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 2.0);
    }

    #[test]
    fn stratified_examples() {
        let recs: Vec<StratifiedRecord> = (0..20)
            .map(|i| StratifiedRecord {
                prompt: format!("p{i:02}"),
                r_p: i as f64 / 100.0,
                value: 4.0,
            })
            .collect();
        let s = stratified_mm(&recs).unwrap();
        assert_eq!((s.tail5_mm, s.balanced_mm), (4.0, 4.0));
        let mut recs = recs;
        recs[19].value = 10.0;
        // ceil(20 · 0.05) = 1 record in the tail.
        assert_eq!(stratified_mm(&recs).unwrap().tail5_mm, 10.0);
        assert_eq!(rareness_bin(0.25), 99);
        assert_eq!(rareness_bin(0.9), 99);
        assert_eq!(rareness_bin(0.0), 0);
    }

    #[test]
    fn rareness_identity_and_monotone() {
        let train = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(rareness_of(&[1.0, 0.0], &train).unwrap(), 0.0);
        let q = [0.6, 0.8];
        let r1 = rareness_of(&q, &train[..1]).unwrap();
        let r2 = rareness_of(&q, &train).unwrap();
        assert!(r2 <= r1);
    }
}
