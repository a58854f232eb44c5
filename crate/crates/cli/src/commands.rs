//! Command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use olab_core::checkpoint::{self, Checkpoint};
use olab_core::compress::{compression_eval, CompressionReport};
use olab_core::data::{self, Dataset};
use olab_core::dynamics::{dynamic_range_sweep, sweep_csv};
use olab_core::outliers::{
    activation_records, attention_records, lifecycle_export, overall_overlap, overlap_cells, probe_offsets,
    token_category, weight_extremal_summary, weight_outlier_records, ActivationKind, AnalysisConfig, HeadStatsPool,
    LayerTopK, MagnitudePool, OverlapCell, TopK,
};
use olab_core::train::{train_run, RunOutput, TrainingLog};
use olab_core::{corpus, Error, Model, Result, RunConfig, VariantKind};
use rayon::prelude::*;
use serde::Serialize;

use crate::report::{write_json, write_table};
use crate::{
    AnalyzeArgs, CompareArgs, CompressArgs, Command, DynrangeArgs, LifecycleArgs, MakeCorpusArgs, PrepareDataArgs,
    ProbeArgs, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeCorpus(a) => make_corpus(&a),
        Command::PrepareData(a) => prepare_data(&a),
        Command::Train(a) => train(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Overlap(a) => overlap(&a),
        Command::CompressEval(a) => compress_eval(&a),
        Command::CompareVariants(a) => compare_variants(&a),
        Command::Dynrange(a) => dynrange(&a),
        Command::Lifecycle(a) => lifecycle(&a),
    }
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn make_corpus(a: &MakeCorpusArgs) -> Result<()> {
    let text = corpus::synthetic_text(a.seed, a.bytes);
    fs::write(&a.out, &text).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {} bytes to {}", text.len(), a.out.display());
    Ok(())
}

fn prepare_data(a: &PrepareDataArgs) -> Result<()> {
    let p = data::prepare_data(&a.input, &a.out, a.char_vocab)?;
    println!("{} tokens (vocab {}) -> {}", p.tokens, p.vocab_size, a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dataset_path(rc: &RunConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| rc.train.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set train.dataset".into()))
}

/// Trains `rc` into `dir`, echoing validation losses to stderr.
fn train_into(rc: &RunConfig, ds: &Dataset, dir: &Path, label: &str) -> Result<RunOutput> {
    let mut model = Model::<f32>::init(rc.model.clone())?;
    train_run(&mut model, rc, ds, Some(dir), &mut |r| {
        if r.split == "val" {
            eprintln!("[{label}] step {:>6}  val {:.4}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut rc = load_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        rc.model.variant = v;
    }
    if let Some(s) = a.seed {
        rc.set_seed(s);
    }
    if let Some(o) = &a.out {
        rc.train.out_dir = o.clone();
    }
    let data_path = dataset_path(&rc, a.data.as_ref())?;
    rc.train.dataset = Some(data_path.clone());
    let ds = data::load_dataset(&data_path)?;
    rc.bind_dataset(ds.vocab_size);
    rc.validate()?;
    let dir = rc.train.out_dir.join(rc.model.variant.name());
    let out = train_into(&rc, &ds, &dir, rc.model.variant.name())?;
    println!("{}", dir.join("ckpt.bin").display());
    println!("{}", dir.join("loss.csv").display());
    eprintln!("final val loss {:.4}", out.final_val_loss);
    Ok(())
}

/// Loads a checkpoint and a token file that must share its vocabulary.
fn load_pair(ckpt: &Path, data_path: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = checkpoint::load(ckpt)?;
    let ds = data::load_dataset(data_path)?;
    if ds.vocab_size != ck.model.config().vocab_size {
        return Err(Error::Version(format!(
            "token file vocabulary {} differs from model vocabulary {}",
            ds.vocab_size,
            ck.model.config().vocab_size
        )));
    }
    Ok((ck, ds))
}

fn analysis_config(base: &AnalysisConfig, p: &ProbeArgs) -> Result<AnalysisConfig> {
    let mut c = base.clone();
    if let Some(v) = p.probes {
        c.probes = v;
    }
    if let Some(v) = p.tau {
        c.tau = v;
    }
    if let Some(v) = p.tau_attn_frac {
        c.tau_attn_frac = v;
    }
    if let Some(v) = p.topk {
        c.topk = v;
    }
    if let Some(v) = p.probe_seed {
        c.probe_seed = v;
    }
    c.validate()?;
    Ok(c)
}

/// Probe sequences of the model's full context length from the
/// validation split.
pub fn probe_sequences(ds: &Dataset, len: usize, cfg: &AnalysisConfig) -> Result<Vec<Vec<usize>>> {
    let offs = probe_offsets(ds.val.len(), cfg.probes, len, cfg.probe_seed)?;
    Ok(offs
        .into_iter()
        .map(|o| ds.val[o..o + len].iter().map(|&t| t as usize).collect())
        .collect())
}

#[derive(Serialize)]
struct TopKRow {
    layer: usize,
    stream: &'static str,
    top1: f64,
    median: f64,
    ratio: f64,
    top: String,
}

const TOPK_HEADER: &[&str] = &["layer", "stream", "top1", "median", "ratio", "top"];

fn topk_rows(tables: &[LayerTopK]) -> Vec<TopKRow> {
    let row = |layer, stream, t: &TopK| TopKRow {
        layer,
        stream,
        top1: t.top.first().copied().unwrap_or(f64::NAN),
        median: t.median,
        ratio: t.ratio(),
        top: t.top.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
    };
    tables
        .iter()
        .flat_map(|t| [row(t.layer, "h", &t.h), row(t.layer, "x_down", &t.x_down)])
        .collect()
}

#[derive(Serialize)]
struct CategoryRow {
    scope: &'static str,
    category: olab_core::outliers::TokenCategory,
    count: usize,
}

fn report_dir(explicit: Option<&PathBuf>, ckpt: &Path, sub: &str) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(sub))
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.ckpt, &a.data)?;
    let cfg = analysis_config(&ck.config.analysis, &a.probe)?;
    let model = &ck.model;
    let mc = model.config();
    let seqs = probe_sequences(&ds, mc.block_size, &cfg)?;
    let tau_attn = cfg.tau_attn(mc.block_size);

    let mut acts = Vec::new();
    let mut atts = Vec::new();
    let mut pool = MagnitudePool::new(mc.n_layer);
    let mut heads = HeadStatsPool::new(mc.n_layer, mc.n_head);
    let mut cats: BTreeMap<(&'static str, _), usize> = BTreeMap::new();
    for (s, toks) in seqs.iter().enumerate() {
        let (_, cap) = model.forward_captured(toks)?;
        for (pos, &t) in toks.iter().enumerate() {
            *cats.entry(("all_positions", token_category(pos, t, &ds.vocab))).or_default() += 1;
        }
        let recs = activation_records(s, &cap, cfg.tau)?;
        for r in &recs {
            let scope = match r.kind {
                ActivationKind::LayerOutput => "layer_output",
                ActivationKind::DownInput => "down_input",
            };
            *cats.entry((scope, token_category(r.seq_idx, r.token_id, &ds.vocab))).or_default() += 1;
        }
        acts.extend(recs);
        let recs = attention_records(s, &cap, tau_attn);
        for r in &recs {
            *cats.entry(("attention", token_category(r.key_idx, r.token_id, &ds.vocab))).or_default() += 1;
        }
        atts.extend(recs);
        pool.add(&cap);
        heads.add(&cap, tau_attn);
    }
    let dir = report_dir(a.out.as_ref(), &a.ckpt, "analysis");
    let mut paths = Vec::new();
    paths.extend(write_table(
        &dir,
        "activation_outliers",
        &["sample", "layer", "kind", "seq_idx", "feat_idx", "value", "token_id"],
        &acts,
    )?);
    paths.extend(write_table(
        &dir,
        "weight_outliers",
        &["layer", "module", "row", "col", "value"],
        &weight_outlier_records(model, cfg.tau)?,
    )?);
    paths.extend(write_table(
        &dir,
        "attention_outliers",
        &["sample", "layer", "head", "key_idx", "score", "token_id"],
        &atts,
    )?);
    paths.extend(write_table(&dir, "topk", TOPK_HEADER, &topk_rows(&pool.finish(cfg.topk)))?);
    paths.extend(write_table(
        &dir,
        "extremal_ratio",
        &["layer", "module", "max_ratio", "zero_columns"],
        &weight_extremal_summary(model)?,
    )?);
    paths.extend(write_table(
        &dir,
        "head_stats",
        &["layer", "head", "count", "no_outliers", "mean", "max", "min"],
        &heads.finish(),
    )?);
    let cat_rows: Vec<CategoryRow> = cats
        .into_iter()
        .map(|((scope, category), count)| CategoryRow { scope, category, count })
        .collect();
    paths.extend(write_table(&dir, "token_categories", &["scope", "category", "count"], &cat_rows)?);
    print_paths(&paths);
    Ok(())
}

#[derive(Serialize)]
struct OverlapSummary {
    overall: Option<f64>,
    used: usize,
    skipped: usize,
    cells: usize,
    tau: f64,
    tau_attn_frac: f64,
}

fn overlap(a: &AnalyzeArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.ckpt, &a.data)?;
    let cfg = analysis_config(&ck.config.analysis, &a.probe)?;
    let len = ck.model.config().block_size;
    let seqs = probe_sequences(&ds, len, &cfg)?;
    let mut cells: Vec<OverlapCell> = Vec::new();
    for (s, toks) in seqs.iter().enumerate() {
        let (_, cap) = ck.model.forward_captured(toks)?;
        cells.extend(overlap_cells(s, &cap, cfg.tau, cfg.tau_attn(len))?);
    }
    let fractions: Vec<Option<f64>> = cells.iter().map(|c| c.overlap).collect();
    let overall = overall_overlap(&fractions);
    let dir = report_dir(a.out.as_ref(), &a.ckpt, "analysis");
    let mut paths = write_table(
        &dir,
        "overlap",
        &["sample", "layer", "head", "act_count", "attn_count", "overlap"],
        &cells,
    )?;
    let summary = OverlapSummary {
        overall: overall.as_ref().ok().map(|o| o.value),
        used: overall.as_ref().map_or(0, |o| o.used),
        skipped: fractions.iter().filter(|f| f.is_none()).count(),
        cells: cells.len(),
        tau: cfg.tau,
        tau_attn_frac: cfg.tau_attn_frac,
    };
    paths.extend(write_table(
        &dir,
        "overlap_summary",
        &["overall", "used", "skipped", "cells", "tau", "tau_attn_frac"],
        &[summary],
    )?);
    print_paths(&paths);
    let o = overall?;
    eprintln!("overall overlap {:.4} over {} cells ({} skipped)", o.value, o.used, o.skipped);
    Ok(())
}

fn model_id(rc: &RunConfig) -> String {
    format!("{}-seed{}", rc.model.variant.name(), rc.model.seed)
}

const COMPRESSION_HEADER: &[&str] = &["model", "variant", "ppl_fp", "ppl_w8", "ppl_sparse50", "params", "sparsity"];

fn compress_eval(a: &CompressArgs) -> Result<()> {
    let (mut ck, ds) = load_pair(&a.ckpt, &a.data)?;
    let mut cfg = ck.config.compression.clone();
    if let Some(p) = a.prune {
        cfg.prune_fraction = p;
    }
    if a.no_quant {
        cfg.quantize = false;
    }
    if let Some(m) = a.prune_mode {
        cfg.prune_mode = m.into();
    }
    if let Some(g) = a.granularity {
        cfg.granularity = g.into();
    }
    if let Some(w) = a.windows {
        cfg.eval_windows = w;
    }
    let block = ck.model.config().block_size;
    let id = model_id(&ck.config);
    let report = compression_eval(&mut ck.model, &id, &ds.val, block, &cfg)?;
    let dir = report_dir(a.out.as_ref(), &a.ckpt, "");
    let paths = write_table(&dir, "compression", COMPRESSION_HEADER, &[report])?;
    print_paths(&paths);
    Ok(())
}

/// Outcome of one (variant, seed) sub-run.
#[derive(Clone, Debug)]
struct SubRun {
    variant: VariantKind,
    seed: u64,
    status: &'static str,
    detail: String,
    log: TrainingLog,
    topk: Vec<LayerTopK>,
    compression: Option<CompressionReport>,
    final_val: Option<f64>,
}

fn sub_run(base: &RunConfig, ds: &Dataset, out: &Path, variant: VariantKind, seed: u64) -> Result<SubRun> {
    let mut rc = base.clone();
    rc.model.variant = variant;
    rc.set_seed(seed);
    let dir = out.join(variant.name()).join(format!("seed{seed}"));
    let label = format!("{}/seed{seed}", variant.name());
    let mut run = SubRun {
        variant,
        seed,
        status: "ok",
        detail: String::new(),
        log: TrainingLog::default(),
        topk: Vec::new(),
        compression: None,
        final_val: None,
    };
    match train_into(&rc, ds, &dir, &label) {
        Ok(o) => {
            run.log = o.log;
            run.final_val = Some(o.final_val_loss);
        }
        Err(Error::Divergence { step, detail }) => {
            eprintln!("[{label}] diverged at step {step}: {detail}");
            run.status = "diverged";
            run.detail = format!("step {step}: {detail}");
            return Ok(run);
        }
        Err(e) => return Err(e),
    }
    let mut ck = checkpoint::load(&dir.join("ckpt.bin"))?;
    let len = ck.model.config().block_size;
    let mut pool = MagnitudePool::new(ck.model.config().n_layer);
    for toks in probe_sequences(ds, len, &rc.analysis)? {
        let (_, cap) = ck.model.forward_captured(&toks)?;
        pool.add(&cap);
    }
    run.topk = pool.finish(rc.analysis.topk);
    run.compression = Some(compression_eval(&mut ck.model, &model_id(&rc), &ds.val, len, &rc.compression)?);
    Ok(run)
}

#[derive(Serialize)]
struct MergedLossRow {
    variant: &'static str,
    seed: u64,
    step: usize,
    split: String,
    loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct RunTopKRow {
    variant: &'static str,
    seed: u64,
    layer: usize,
    stream: &'static str,
    top1: f64,
    median: f64,
    ratio: f64,
    top: String,
}

#[derive(Clone, Serialize)]
struct VerdictRow {
    variant: &'static str,
    seed: u64,
    status: &'static str,
    detail: String,
    max_ratio: Option<f64>,
    max_ratio_layer: Option<usize>,
    final_val_loss: Option<f64>,
    early_loss: Option<f64>,
    w8_inflation: Option<f64>,
    sparse_inflation: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow {
    variant: &'static str,
    runs: usize,
    completed: usize,
    median_max_ratio: Option<f64>,
    median_w8_inflation: Option<f64>,
    median_sparse_inflation: Option<f64>,
    mean_early_loss: Option<f64>,
    early_lo: usize,
    early_hi: usize,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Worker count from `OLAB_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("OLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn compare_variants(a: &CompareArgs) -> Result<()> {
    let mut variants = a.variants.clone();
    variants.sort();
    variants.dedup();
    if variants.len() < 2 {
        return Err(Error::Config("compare-variants needs at least two distinct variants".into()));
    }
    let mut seeds = a.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let (lo, hi) = match a.early_window.as_slice() {
        [lo, hi] if lo <= hi => (*lo, *hi),
        _ => return Err(Error::Config("--early-window takes two ordered steps".into())),
    };
    let mut rc = load_config(a.config.as_deref())?;
    if let Some(o) = &a.out {
        rc.train.out_dir = o.clone();
    }
    let data_path = dataset_path(&rc, a.data.as_ref())?;
    rc.train.dataset = Some(data_path.clone());
    let ds = data::load_dataset(&data_path)?;
    rc.bind_dataset(ds.vocab_size);
    rc.validate()?;
    let out = rc.train.out_dir.clone();

    let jobs: Vec<(VariantKind, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<SubRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, s)| sub_run(&rc, &ds, &out, v, s))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut losses = Vec::new();
    let mut topk = Vec::new();
    let mut verdicts = Vec::new();
    let mut compression = Vec::new();
    for r in &runs {
        let v = r.variant.name();
        for rec in &r.log.records {
            losses.push(MergedLossRow {
                variant: v,
                seed: r.seed,
                step: rec.step,
                split: rec.split.clone(),
                loss: rec.loss,
                lr: rec.lr,
            });
        }
        for row in topk_rows(&r.topk) {
            topk.push(RunTopKRow {
                variant: v,
                seed: r.seed,
                layer: row.layer,
                stream: row.stream,
                top1: row.top1,
                median: row.median,
                ratio: row.ratio,
                top: row.top,
            });
        }
        let best = r
            .topk
            .iter()
            .map(|t| (t.layer, t.h.ratio()))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        verdicts.push(VerdictRow {
            variant: v,
            seed: r.seed,
            status: r.status,
            detail: r.detail.clone(),
            max_ratio: best.map(|b| b.1),
            max_ratio_layer: best.map(|b| b.0),
            final_val_loss: r.final_val,
            early_loss: r.log.mean_train_loss(lo, hi),
            w8_inflation: r.compression.as_ref().map(CompressionReport::w8_inflation),
            sparse_inflation: r.compression.as_ref().map(CompressionReport::sparse_inflation),
        });
        compression.extend(r.compression.clone());
    }
    let summary: Vec<SummaryRow> = variants
        .iter()
        .map(|&var| {
            let rows: Vec<&VerdictRow> = verdicts.iter().filter(|r| r.variant == var.name()).collect();
            let col = |f: fn(&VerdictRow) -> Option<f64>| rows.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let early = col(|r| r.early_loss);
            SummaryRow {
                variant: var.name(),
                runs: rows.len(),
                completed: rows.iter().filter(|r| r.status == "ok").count(),
                median_max_ratio: median(col(|r| r.max_ratio)),
                median_w8_inflation: median(col(|r| r.w8_inflation)),
                median_sparse_inflation: median(col(|r| r.sparse_inflation)),
                mean_early_loss: (!early.is_empty()).then(|| early.iter().sum::<f64>() / early.len() as f64),
                early_lo: lo,
                early_hi: hi,
            }
        })
        .collect();

    let mut paths = Vec::new();
    paths.extend(write_table(
        &out,
        "loss_merged",
        &["variant", "seed", "step", "split", "loss", "lr"],
        &losses,
    )?);
    paths.extend(write_table(
        &out,
        "topk_by_layer",
        &["variant", "seed", "layer", "stream", "top1", "median", "ratio", "top"],
        &topk,
    )?);
    paths.extend(write_table(
        &out,
        "verdict",
        &[
            "variant",
            "seed",
            "status",
            "detail",
            "max_ratio",
            "max_ratio_layer",
            "final_val_loss",
            "early_loss",
            "w8_inflation",
            "sparse_inflation",
        ],
        &verdicts,
    )?);
    paths.extend(write_table(
        &out,
        "verdict_summary",
        &[
            "variant",
            "runs",
            "completed",
            "median_max_ratio",
            "median_w8_inflation",
            "median_sparse_inflation",
            "mean_early_loss",
            "early_lo",
            "early_hi",
        ],
        &summary,
    )?);
    paths.extend(write_table(&out, "compression", COMPRESSION_HEADER, &compression)?);
    let cfg_path = out.join("run_config.json");
    write_json(&cfg_path, &rc)?;
    paths.push(cfg_path);
    print_paths(&paths);
    Ok(())
}

/// `start:stop:step` (inclusive) or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad grid '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let (start, stop, step) = (v[0], v[1], v[2]);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        return Ok((0..n).map(|i| start + i as f64 * step).collect());
    }
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
}

fn dynrange(a: &DynrangeArgs) -> Result<()> {
    let ms = parse_grid(&a.m_grid)?;
    let pts = dynamic_range_sweep(&ms, &a.n_grid).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&a.out, sweep_csv(&pts)).map_err(|e| Error::io(&a.out, e))?;
    let json = a.out.with_extension("json");
    write_json(&json, &pts)?;
    print_paths(&[a.out.clone(), json]);
    Ok(())
}

fn lifecycle(a: &LifecycleArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.ckpt, &a.data)?;
    let mut cfg = analysis_config(&ck.config.analysis, &a.probe)?;
    cfg.probes = cfg.probes.max(a.sample + 1);
    let seqs = probe_sequences(&ds, ck.model.config().block_size, &cfg)?;
    let paths = lifecycle_export(&ck.model, &seqs[a.sample], &a.out, &cfg)?;
    print_paths(&paths);
    Ok(())
}
