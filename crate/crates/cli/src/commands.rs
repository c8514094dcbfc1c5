use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rmd_core::diffusion::{sample_normalized, Denoiser};
use rmd_core::evaluator::{eval_pairs, train_evaluator, EvaluatorModel};
use rmd_core::metrics::{
    diversity, fid, frechet_distance, histogram_bars, mm_dist, multimodality, r_precision, rareness_of,
    stratified_mm, Gaussian, MetricReport, StratifiedRecord, DIVERSITY_PAIRS, MULTIMODALITY_REPS,
    R_PRECISION_BATCH,
};
use rmd_core::mixture::{finetune_tail, grid_search, item_noise, FeatureExtractor, MixtureWeights, TailItem};
use rmd_core::motion::{
    compute_norm_stats, load_dataset, write_dataset, write_motion, MotionSequence, NormStats, PoseLayout,
    MANIFEST_FILE,
};
use rmd_core::retrieval::{build_index, RetrievalIndex};
use rmd_core::smt::SmtModel;
use rmd_core::synthetic::generate;
use rmd_core::text::TextProvider;
use rmd_core::train::{prepare_items, train, RetrievalSource, Sampler};
use rmd_core::{seed, Error};
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{sidecar, sidecar_path, Outputs};
use crate::UsageError;

fn provider(cfg: &RunConfig) -> Result<TextProvider> {
    Ok(TextProvider::from_config(&cfg.provider_config())?)
}

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if !dir.is_dir() {
        bail!(UsageError(format!(
            "{what} directory {} does not exist (set `dataset` in the config or run gen-synthetic)",
            dir.display()
        )));
    }
    Ok(())
}

fn train_split(cfg: &RunConfig) -> Result<Vec<MotionSequence>> {
    let dir = cfg.train_dir();
    require_dir(&dir, "training split")?;
    Ok(load_dataset(&dir, Some(PoseLayout::new(cfg.model.joints)))?)
}

fn test_split(cfg: &RunConfig) -> Result<Vec<MotionSequence>> {
    let dir = cfg.test_dir();
    require_dir(&dir, "test split")?;
    Ok(load_dataset(&dir, Some(PoseLayout::new(cfg.model.joints)))?)
}

fn require_file(path: &Path, producer: &str) -> Result<()> {
    if !path.is_file() {
        bail!(Error::Dependency(format!(
            "{} not found; run `rmd {producer}` first",
            path.display()
        )));
    }
    Ok(())
}

fn load_index(cfg: &RunConfig, provider: &TextProvider) -> Result<RetrievalIndex> {
    let path = cfg.index_path();
    require_file(&path, "build-index")?;
    let index = RetrievalIndex::load(&path)?;
    index.check_provider(provider, true)?;
    Ok(index)
}

struct Trained {
    model: SmtModel,
    stats: NormStats,
    use_retrieval: bool,
}

fn load_model(cfg: &RunConfig) -> Result<Trained> {
    let path = cfg.model_path();
    require_file(&path, "train")?;
    let (model, extra) = SmtModel::load(&path)?;
    let stats: NormStats = serde_json::from_value(extra["norm"].clone())
        .map_err(|e| Error::Format(format!("{}: missing normalization: {e}", path.display())))?;
    let use_retrieval = extra["use_retrieval"].as_bool().unwrap_or(true);
    Ok(Trained {
        model,
        stats,
        use_retrieval,
    })
}

fn load_evaluator(cfg: &RunConfig, stats: &NormStats) -> Result<EvaluatorModel> {
    let path = cfg.evaluator_path();
    require_file(&path, "train-evaluator")?;
    let (evaluator, ev_stats) = EvaluatorModel::load(&path)?;
    if &ev_stats != stats {
        bail!(Error::Contract(
            "evaluator and denoiser were trained under different normalization statistics".into()
        ));
    }
    Ok(evaluator)
}

fn parse_weights(s: Option<&str>) -> Result<MixtureWeights> {
    match s {
        Some(s) => s.parse::<MixtureWeights>().map_err(|e| UsageError(e.to_string()).into()),
        None => Ok(MixtureWeights::full_condition()),
    }
}

pub fn gen_synthetic(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let root = out.unwrap_or_else(|| cfg.dataset_dir());
    let (train_set, test_set) = generate(&cfg.synthetic)?;
    let mut outputs = Outputs::new();
    for (name, split) in [("train", &train_set), ("test", &test_set)] {
        let dir = root.join(name);
        outputs.with(&dir.join(MANIFEST_FILE), |_| Ok(()))?;
        for seq in split {
            outputs.with(&dir.join(format!("{}.rmdf", seq.id)), |_| Ok(()))?;
        }
        write_dataset(&dir, split)?;
    }
    outputs.json(
        &root.join("synthetic.json"),
        &sidecar(
            "gen-synthetic",
            cfg,
            json!({ "train": train_set.len(), "test": test_set.len() }),
        ),
    )?;
    outputs.commit();
    println!(
        "wrote {} training and {} test sequences to {}",
        train_set.len(),
        test_set.len(),
        root.display()
    );
    Ok(())
}

pub fn build_index_cmd(cfg: &RunConfig, lambda: Option<f64>, out: Option<PathBuf>) -> Result<()> {
    let lambda = lambda.unwrap_or(cfg.lambda);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        bail!(UsageError(format!("--lambda must be finite and ≥ 0, got {lambda}")));
    }
    let train_set = train_split(cfg)?;
    let provider = provider(cfg)?;
    let index = build_index(&train_set, &provider, lambda)?;
    let path = out.unwrap_or_else(|| cfg.index_path());
    let mut outputs = Outputs::new();
    outputs.with(&path, |p| index.save(p))?;
    outputs.json(
        &sidecar_path(&path),
        &sidecar(
            "build-index",
            cfg,
            json!({
                "entries": index.len(),
                "lambda": index.lambda,
                "fingerprint": index.fingerprint,
            }),
        ),
    )?;
    outputs.commit();
    println!("indexed {} captions (lambda = {}) into {}", index.len(), index.lambda, path.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let train_set = train_split(cfg)?;
    let stats = compute_norm_stats(&train_set)?;
    let provider = provider(cfg)?;
    let index = load_index(cfg, &provider)?;
    let items = prepare_items(
        &train_set,
        &stats,
        &index,
        &provider,
        cfg.model.k,
        cfg.train.use_retrieval,
    )?;
    let schedule = cfg.schedule.build()?;
    let mut model = SmtModel::new(cfg.model.clone(), &mut seed::stream(cfg.seed, "model/init"))?;
    info!(
        "training on {} pairs, {} parameters, {} steps",
        items.len(),
        model.store().numel(),
        cfg.train.steps
    );
    let report = train(&mut model, &items, &schedule, &cfg.train, |step, loss| {
        if step % 100 == 0 {
            info!("step {step:>5}  loss {loss:.5}");
        }
    })?;

    let path = cfg.model_path();
    let extra = json!({
        "norm": stats,
        "use_retrieval": cfg.train.use_retrieval,
        "fingerprint": provider.fingerprint(),
    });
    let mut outputs = Outputs::new();
    outputs.with(&path, |p| model.save(p, extra))?;
    outputs.json(&cfg.out("train_log.json"), &json!({ "losses": report.losses }))?;
    outputs.json(
        &sidecar_path(&path),
        &sidecar(
            "train",
            cfg,
            json!({
                "pairs": items.len(),
                "first_loss": report.losses.first(),
                "last_loss": report.losses.last(),
            }),
        ),
    )?;
    outputs.commit();
    println!(
        "trained {} steps; loss {:.5} -> {:.5}; wrote {}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

pub fn train_evaluator_cmd(cfg: &RunConfig) -> Result<()> {
    let train_set = train_split(cfg)?;
    let stats = compute_norm_stats(&train_set)?;
    let provider = provider(cfg)?;
    let pairs = eval_pairs(&train_set, &stats, &provider)?;
    let mut evaluator =
        EvaluatorModel::new(cfg.evaluator.model.clone(), &mut seed::stream(cfg.seed, "evaluator/init"))?;
    let losses = train_evaluator(&mut evaluator, &pairs, &cfg.evaluator.train, |step, loss| {
        if step % 100 == 0 {
            info!("step {step:>5}  contrastive loss {loss:.5}");
        }
    })?;
    let path = cfg.evaluator_path();
    let mut outputs = Outputs::new();
    outputs.with(&path, |p| evaluator.save(p, &stats))?;
    outputs.json(
        &sidecar_path(&path),
        &sidecar(
            "train-evaluator",
            cfg,
            json!({ "pairs": pairs.len(), "first_loss": losses.first(), "last_loss": losses.last() }),
        ),
    )?;
    outputs.commit();
    println!("trained evaluator on {} pairs; wrote {}", pairs.len(), path.display());
    Ok(())
}

pub struct SampleArgs {
    pub prompt: String,
    pub length: usize,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub weights: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn sample_cmd(cfg: &RunConfig, args: SampleArgs) -> Result<()> {
    let weights = parse_weights(args.weights.as_deref())?;
    let n_infer = args.steps.unwrap_or(cfg.schedule.n_infer);
    if n_infer == 0 || n_infer > cfg.schedule.steps {
        bail!(UsageError(format!("--steps must be in 1..={}", cfg.schedule.steps)));
    }
    let trained = load_model(cfg)?;
    if args.length == 0 || args.length > trained.model.config().max_frames {
        bail!(UsageError(format!(
            "--length must be in 1..={}",
            trained.model.config().max_frames
        )));
    }
    let provider = provider(cfg)?;
    let index = load_index(cfg, &provider)?;
    let train_set = train_split(cfg)?;
    let source = RetrievalSource::new(&train_set, &trained.stats);
    let respaced = cfg.schedule.build()?.respace(n_infer)?;
    let sampler = Sampler {
        model: &trained.model,
        index: &index,
        source: &source,
        provider: &provider,
        respaced: &respaced,
        rule: cfg.schedule.rule(),
        use_retrieval: trained.use_retrieval,
    };
    let seed_ = args.seed.unwrap_or(cfg.seed);
    let out = sampler.sample(&args.prompt, args.length, &weights, seed_, None)?;

    let path = args.out.unwrap_or_else(|| cfg.out("sample.rmdf"));
    let mut outputs = Outputs::new();
    outputs.with(&path, |p| write_motion(p, &out.frames))?;
    let mut side = sidecar(
        "sample",
        cfg,
        json!({
            "prompt": args.prompt,
            "length": args.length,
            "weights": weights,
            "n_infer": n_infer,
            "retrieved_ids": out.retrieved_ids,
        }),
    );
    side["seed"] = json!(seed_);
    outputs.json(&sidecar_path(&path), &side)?;
    outputs.commit();
    println!("wrote {} frames to {}", args.length, path.display());
    Ok(())
}

/// Quadratic stand-in for FID with its minimum at `(a, b)`.
fn surrogate_objective(a: f64, b: f64) -> impl FnMut(&MixtureWeights) -> rmd_core::Result<f64> {
    move |w| Ok((w.w1 - a).powi(2) + (w.w2 - b).powi(2))
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || UsageError(format!("--surrogate-optimum expects W1,W2, got {s:?}"));
    match parts[..] {
        [a, b] => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
        _ => Err(bad().into()),
    }
}

pub fn mixture_search_cmd(cfg: &RunConfig, surrogate: Option<&str>) -> Result<()> {
    let spec = cfg.mixture.grid;
    let report = if let Some(s) = surrogate {
        let (a, b) = parse_pair(s)?;
        let grid = grid_search(&spec, surrogate_objective(a, b))?;
        json!({ "grid": grid.grid, "best": grid.best, "best_fid": grid.best_fid,
                "finetuned": null, "surrogate_optimum": [a, b] })
    } else {
        mixture_search_model(cfg)?
    };
    let path = cfg.mixture_path();
    let mut outputs = Outputs::new();
    outputs.json(&path, &sidecar("mixture-search", cfg, report.clone()))?;
    outputs.commit();
    println!("best grid weights {}; wrote {}", report["best"], path.display());
    if !report["finetuned"].is_null() {
        println!("finetuned weights {}", report["finetuned"]);
    }
    Ok(())
}

fn mixture_search_model(cfg: &RunConfig) -> Result<serde_json::Value> {
    let trained = load_model(cfg)?;
    let evaluator = load_evaluator(cfg, &trained.stats)?;
    let provider = provider(cfg)?;
    let index = load_index(cfg, &provider)?;
    let train_set = train_split(cfg)?;
    let source = RetrievalSource::new(&train_set, &trained.stats);
    let respaced = cfg.schedule.build()?.respace(cfg.schedule.n_infer)?;
    let rule = cfg.schedule.rule();
    let model = &trained.model;
    let sampler = Sampler {
        model,
        index: &index,
        source: &source,
        provider: &provider,
        respaced: &respaced,
        rule,
        use_retrieval: trained.use_retrieval,
    };

    // Evenly spaced training captions; retrieval excludes the sequence itself,
    // as during training.
    let m = cfg.mixture.eval_prompts.min(train_set.len());
    let mut items = Vec::with_capacity(m);
    for i in 0..m {
        let seq = &train_set[i * train_set.len() / m];
        let (cond, _) = sampler.condition(&seq.captions[0], seq.len(), Some(&seq.id))?;
        items.push(TailItem {
            ctx: model.encode_frozen(&cond)?,
            frames: seq.len(),
        });
    }
    let real_motion: Vec<_> = train_set
        .iter()
        .map(|s| trained.stats.normalize_frames(&s.frames))
        .collect::<rmd_core::Result<_>>()?;
    let real = Gaussian::fit(&evaluator.features_of(&real_motion)?)?;
    let dim = model.config().pose_dim();
    let tail_cfg = &cfg.mixture.tail;
    let noise: Vec<_> = items
        .iter()
        .enumerate()
        .map(|(i, it)| item_noise(tail_cfg.seed, i, it.frames, dim, respaced.len()))
        .collect();

    info!("grid search over {} points, {} prompts", cfg.mixture.grid.points()?.len(), items.len());
    let mut evaluated = 0usize;
    let grid = grid_search(&cfg.mixture.grid, |w| {
        evaluated += 1;
        if evaluated.is_multiple_of(50) {
            info!("grid point {evaluated}");
        }
        let mut gen = Vec::with_capacity(items.len());
        for (it, nz) in items.iter().zip(&noise) {
            gen.push(sample_normalized(model, &it.ctx, &respaced, w, nz, rule)?);
        }
        let feats = evaluator.features_of(&gen)?;
        frechet_distance(&real, &Gaussian::fit(&feats)?)
    })?;
    info!("grid best {:?} (FID {:.5}); finetuning tail", grid.best, grid.best_fid);
    let tail = finetune_tail(model, &evaluator, &items, dim, &respaced, &grid.best, &real, tail_cfg, rule)?;
    Ok(json!({
        "grid": grid.grid,
        "best": grid.best,
        "best_fid": grid.best_fid,
        "finetuned": tail.weights,
        "tail_history": tail.history,
    }))
}

pub fn eval_cmd(cfg: &RunConfig, weights: Option<&str>) -> Result<()> {
    let weights = parse_weights(weights)?;
    let trained = load_model(cfg)?;
    let evaluator = load_evaluator(cfg, &trained.stats)?;
    let provider = provider(cfg)?;
    let index = load_index(cfg, &provider)?;
    let train_set = train_split(cfg)?;
    let test_set = test_split(cfg)?;
    if test_set.len() < 2 {
        bail!(Error::Schema("evaluation needs at least two test sequences".into()));
    }
    let source = RetrievalSource::new(&train_set, &trained.stats);
    let respaced = cfg.schedule.build()?.respace(cfg.schedule.n_infer)?;
    let sampler = Sampler {
        model: &trained.model,
        index: &index,
        source: &source,
        provider: &provider,
        respaced: &respaced,
        rule: cfg.schedule.rule(),
        use_retrieval: trained.use_retrieval,
    };

    let reps = cfg.eval.samples_per_prompt.max(1);
    let mut first = Vec::with_capacity(test_set.len());
    let mut per_prompt = BTreeMap::new();
    let mut all = Vec::new();
    for (j, seq) in test_set.iter().enumerate() {
        let mut gens = Vec::with_capacity(reps);
        for r in 0..reps {
            let s = seed::derive(cfg.seed, &format!("eval/{j}/{r}"));
            gens.push(sampler.sample(&seq.captions[0], seq.len(), &weights, s, None)?.normalized);
        }
        let feats = evaluator.features_of(&gens)?;
        first.push(feats.row(0).to_vec());
        all.extend(gens.iter().cloned());
        if reps >= 2 {
            per_prompt.insert(seq.id.clone(), feats);
        }
    }
    let gen_first = rmd_tensor_rows(&first)?;
    let gen_all = evaluator.features_of(&all)?;
    let real_motion: Vec<_> = test_set
        .iter()
        .map(|s| trained.stats.normalize_frames(&s.frames))
        .collect::<rmd_core::Result<_>>()?;
    let real = evaluator.features_of(&real_motion)?;
    let prompts: Vec<String> = test_set.iter().map(|s| s.captions[0].clone()).collect();
    let text = evaluator.text_features(&provider, &prompts)?;

    let train_emb = train_set
        .iter()
        .flat_map(|s| s.captions.iter())
        .map(|c| provider.embed_sentence(c).map(|e| e.vector))
        .collect::<rmd_core::Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(test_set.len());
    for (j, prompt) in prompts.iter().enumerate() {
        let q = provider.embed_sentence(prompt)?.vector;
        let m = rmd_tensor_rows(&[first[j].clone()])?;
        let t = rmd_tensor_rows(&[text.row(j).to_vec()])?;
        records.push(StratifiedRecord {
            prompt: prompt.clone(),
            r_p: rareness_of(&q, &train_emb)?,
            value: mm_dist(&m, &t)?,
        });
    }

    let report = MetricReport {
        fid: fid(&real, &gen_first)?,
        r_precision: if test_set.len() >= R_PRECISION_BATCH {
            Some(r_precision(&gen_first, &text)?)
        } else {
            None
        },
        mm_dist: mm_dist(&gen_first, &text)?,
        diversity: diversity(&gen_all, DIVERSITY_PAIRS, &mut seed::stream(cfg.seed, "eval/diversity"))?,
        multimodality: if per_prompt.is_empty() {
            None
        } else {
            Some(multimodality(
                &per_prompt,
                MULTIMODALITY_REPS,
                &mut seed::stream(cfg.seed, "eval/multimodality"),
            )?)
        },
        rareness: Some(stratified_mm(&records)?),
    };
    if !report.is_finite() {
        bail!(Error::Numeric(format!("non-finite metric in {report:?}")));
    }
    let bars = histogram_bars(&report.rareness.as_ref().expect("set above").histogram, 40);

    let path = cfg.metrics_path();
    let mut outputs = Outputs::new();
    outputs.json(
        &path,
        &sidecar(
            "eval",
            cfg,
            json!({ "weights": weights, "report": report, "records": records }),
        ),
    )?;
    outputs.text(&cfg.out("rareness_histogram.txt"), &bars)?;
    outputs.commit();
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("rareness histogram (bin start: count)\n{bars}");
    Ok(())
}

fn rmd_tensor_rows(rows: &[Vec<f64>]) -> Result<rmd_tensor::Tensor> {
    rmd_tensor::Tensor::from_rows(rows).context("assembling feature rows")
}
