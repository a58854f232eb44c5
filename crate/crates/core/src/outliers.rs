//! Activation, weight and attention outlier detection and the positional
//! analyses built on top of them.
//!
//! Thresholds follow one pattern: a value is an outlier when its magnitude
//! strictly exceeds `τ` times a mean absolute value. Activations use the
//! mean over the whole tensor, weights the mean of their row, and attention
//! keys the mean cumulative score `μ_A = (1/L)·Σ_j Â_j`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{CaptureSet, Model, ParamRole};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Detector thresholds and probe settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Activation and weight threshold `τ`.
    pub tau: f64,
    /// Attention threshold as a fraction of the sequence length.
    pub tau_attn_frac: f64,
    /// Number of probe sequences.
    pub probes: usize,
    pub topk: usize,
    pub probe_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tau: 1000.0,
            tau_attn_frac: 0.3,
            probes: 100,
            topk: 3,
            probe_seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.tau_attn_frac > 0.0) {
            return Err(Error::Config(format!("tau_attn_frac {} must be positive", self.tau_attn_frac)));
        }
        if self.probes == 0 || self.topk == 0 {
            return Err(Error::Config("probes and topk must be positive".into()));
        }
        Ok(())
    }

    /// `τ_attn` for sequences of length `len`.
    pub fn tau_attn(&self, len: usize) -> f64 {
        self.tau_attn_frac * len as f64
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {tau} must exceed 1")))
    }
}

fn mean_abs<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.as_f64().abs()).sum::<f64>() / xs.len() as f64
}

/// One flagged entry `(row, col, value)` of a matrix-shaped view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// `{(i, j) : |x_ij| > τ·μ}` with `μ` the mean absolute value of the whole
/// tensor. Leading axes are flattened into `row`, so for `[B, T, H]` input
/// `row = b·T + t`.
pub fn detect_activation_outliers<T: Scalar>(x: &Tensor<T>, tau: f64) -> Result<Vec<Hit>> {
    check_tau(tau)?;
    if x.numel() == 0 || x.ndim() == 0 {
        return Err(Error::Data("activation tensor is empty".into()));
    }
    let width = x.last_dim();
    let threshold = tau * mean_abs(x.data());
    Ok(x.data()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.as_f64().abs() > threshold)
        .map(|(i, v)| Hit {
            row: i / width,
            col: i % width,
            value: v.as_f64(),
        })
        .collect())
}

/// `{(i, j) : |W_ij| > τ·mean_j |W_ij|}` for a `[O, I]` matrix.
pub fn detect_weight_outliers<T: Scalar>(w: &Tensor<T>, tau: f64) -> Result<Vec<Hit>> {
    check_tau(tau)?;
    if w.ndim() != 2 || w.shape()[1] == 0 || w.shape()[0] == 0 {
        return Err(Error::Data(format!("weight outliers need a non-empty matrix, got {:?}", w.shape())));
    }
    let mut hits = Vec::new();
    for r in 0..w.shape()[0] {
        let row = w.row(r);
        let threshold = tau * mean_abs(row);
        for (c, v) in row.iter().enumerate() {
            if v.as_f64().abs() > threshold {
                hits.push(Hit {
                    row: r,
                    col: c,
                    value: v.as_f64(),
                });
            }
        }
    }
    Ok(hits)
}

/// Cumulative attention per key and the flagged keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutliers {
    /// `Â_j = Σ_i A_ij`
    pub scores: Vec<f64>,
    /// `(1/L)·Σ_j Â_j`
    pub mean: f64,
    pub keys: Vec<usize>,
}

/// Column sums of the first `n_keys` columns of `A` (`[L_q, ≥ n_keys]`).
pub fn cumulative_scores<T: Scalar>(a: &Tensor<T>, n_keys: usize) -> Vec<f64> {
    let mut s = vec![0.0; n_keys];
    for r in 0..a.rows() {
        for (j, acc) in s.iter_mut().enumerate() {
            *acc += a.row(r)[j].as_f64();
        }
    }
    s
}

/// `{j : Â_j > τ_attn·μ_A}` over the whole width of `A`.
pub fn detect_attention_outliers<T: Scalar>(a: &Tensor<T>, tau_attn: f64) -> AttentionOutliers {
    detect_attention_outliers_within(a, a.last_dim(), tau_attn)
}

/// As [`detect_attention_outliers`], restricted to the first `n_keys`
/// columns (the sequence positions, excluding any appended sink).
pub fn detect_attention_outliers_within<T: Scalar>(a: &Tensor<T>, n_keys: usize, tau_attn: f64) -> AttentionOutliers {
    let scores = cumulative_scores(a, n_keys);
    let mean = if n_keys == 0 { 0.0 } else { scores.iter().sum::<f64>() / n_keys as f64 };
    let keys = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau_attn * mean)
        .map(|(j, _)| j)
        .collect();
    AttentionOutliers { scores, mean, keys }
}

/// Largest magnitudes in descending order plus the median magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top: Vec<f64>,
    pub median: f64,
}

impl TopK {
    /// `top[0] / median`, or infinity for a zero median.
    pub fn ratio(&self) -> f64 {
        match self.top.first() {
            Some(&t) if self.median > 0.0 => t / self.median,
            Some(&t) if t > 0.0 => f64::INFINITY,
            _ => 1.0,
        }
    }
}

/// Top-`k` absolute values and their median; consumes the buffer.
pub fn topk_and_median(mut mags: Vec<f64>, k: usize) -> TopK {
    if mags.is_empty() {
        return TopK {
            top: Vec::new(),
            median: f64::NAN,
        };
    }
    for m in mags.iter_mut() {
        *m = m.abs();
    }
    let n = mags.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let median = if n % 2 == 1 {
        *mags.select_nth_unstable_by(n / 2, cmp).1
    } else {
        let hi = *mags.select_nth_unstable_by(n / 2, cmp).1;
        let lo = mags[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    let k = k.min(n);
    if k < n {
        mags.select_nth_unstable_by(n - k, cmp);
    }
    let mut top = mags[n - k..].to_vec();
    top.sort_by(|a, b| b.total_cmp(a));
    TopK { top, median }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTopK {
    pub layer: usize,
    pub h: TopK,
    pub x_down: TopK,
}

/// Per-layer top-`k` magnitudes and medians of `h_ℓ` and `x_ℓ^down`,
/// pooled over all given captures.
pub fn topk_magnitudes_per_layer<T: Scalar>(caps: &[CaptureSet<T>], k: usize) -> Vec<LayerTopK> {
    let mut acc = MagnitudePool::new(caps.first().map_or(0, |c| c.n_layer()));
    for c in caps {
        acc.add(c);
    }
    acc.finish(k)
}

/// Streaming collector behind [`topk_magnitudes_per_layer`].
#[derive(Clone, Debug, Default)]
pub struct MagnitudePool {
    h: Vec<Vec<f32>>,
    x_down: Vec<Vec<f32>>,
}

impl MagnitudePool {
    pub fn new(n_layer: usize) -> Self {
        Self {
            h: vec![Vec::new(); n_layer],
            x_down: vec![Vec::new(); n_layer],
        }
    }

    pub fn add<T: Scalar>(&mut self, c: &CaptureSet<T>) {
        for l in 0..self.h.len() {
            self.h[l].extend(c.h[l].data().iter().map(|v| v.as_f64().abs() as f32));
            self.x_down[l].extend(c.x_down[l].data().iter().map(|v| v.as_f64().abs() as f32));
        }
    }

    pub fn finish(self, k: usize) -> Vec<LayerTopK> {
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
        self.h
            .into_iter()
            .zip(self.x_down)
            .enumerate()
            .map(|(layer, (h, x))| LayerTopK {
                layer,
                h: topk_and_median(widen(h), k),
                x_down: topk_and_median(widen(x), k),
            })
            .collect()
    }
}

/// Column-wise max/mean of absolute values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremalRatio {
    /// One ratio per column; all-zero columns hold `+∞`.
    pub per_column: Vec<f64>,
    /// Maximum over columns.
    pub max: f64,
    /// Number of all-zero columns.
    pub zero_columns: usize,
}

pub fn extremal_ratio<T: Scalar>(w: &Tensor<T>) -> Result<ExtremalRatio> {
    if w.ndim() != 2 || w.numel() == 0 {
        return Err(Error::Data(format!("extremal ratio needs a non-empty matrix, got {:?}", w.shape())));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut max = vec![0.0f64; cols];
    let mut sum = vec![0.0f64; cols];
    for r in 0..rows {
        for (c, v) in w.row(r).iter().enumerate() {
            let a = v.as_f64().abs();
            sum[c] += a;
            max[c] = max[c].max(a);
        }
    }
    let mut zero_columns = 0;
    let per_column: Vec<f64> = max
        .iter()
        .zip(&sum)
        .map(|(&m, &s)| {
            if s > 0.0 {
                m / (s / rows as f64)
            } else {
                zero_columns += 1;
                f64::INFINITY
            }
        })
        .collect();
    let max = per_column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ExtremalRatio {
        per_column,
        max,
        zero_columns,
    })
}

/// Layer index and module name (`attn.q`, `mlp.down`, …) of a per-layer
/// parameter such as `h.2.mlp.down.weight`.
pub fn split_param_name(name: &str) -> Option<(usize, String)> {
    let rest = name.strip_prefix("h.")?;
    let (layer, rest) = rest.split_once('.')?;
    let module = rest.strip_suffix(".weight").unwrap_or(rest);
    Some((layer.parse().ok()?, module.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleExtremal {
    pub layer: usize,
    pub module: String,
    pub max_ratio: f64,
    pub zero_columns: usize,
}

/// Extremal ratio summary of every per-layer projection matrix.
pub fn weight_extremal_summary<T: Scalar>(model: &Model<T>) -> Result<Vec<ModuleExtremal>> {
    let mut out = Vec::new();
    for p in model.params() {
        if p.role != ParamRole::Projection {
            continue;
        }
        if let Some((layer, module)) = split_param_name(&p.name) {
            let r = extremal_ratio(&p.tensor)?;
            out.push(ModuleExtremal {
                layer,
                module,
                max_ratio: r.max,
                zero_columns: r.zero_columns,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightOutlierRecord {
    pub layer: usize,
    pub module: String,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

pub fn weight_outlier_records<T: Scalar>(model: &Model<T>, tau: f64) -> Result<Vec<WeightOutlierRecord>> {
    let mut out = Vec::new();
    for p in model.params() {
        if p.role != ParamRole::Projection {
            continue;
        }
        if let Some((layer, module)) = split_param_name(&p.name) {
            for h in detect_weight_outliers(&p.tensor, tau)? {
                out.push(WeightOutlierRecord {
                    layer,
                    module: module.clone(),
                    row: h.row,
                    col: h.col,
                    value: h.value,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    LayerOutput,
    DownInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationOutlierRecord {
    pub sample: usize,
    pub layer: usize,
    pub kind: ActivationKind,
    pub seq_idx: usize,
    pub feat_idx: usize,
    pub value: f64,
    pub token_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutlierRecord {
    pub sample: usize,
    pub layer: usize,
    pub head: usize,
    pub key_idx: usize,
    pub score: f64,
    pub token_id: usize,
}

/// Keys that are sequence positions in a captured attention matrix.
fn seq_keys<T: Scalar>(cap: &CaptureSet<T>) -> usize {
    cap.seq_len()
}

pub fn activation_records<T: Scalar>(
    sample: usize,
    cap: &CaptureSet<T>,
    tau: f64,
) -> Result<Vec<ActivationOutlierRecord>> {
    let mut out = Vec::new();
    for l in 0..cap.n_layer() {
        for (kind, t) in [(ActivationKind::LayerOutput, &cap.h[l]), (ActivationKind::DownInput, &cap.x_down[l])] {
            for h in detect_activation_outliers(t, tau)? {
                out.push(ActivationOutlierRecord {
                    sample,
                    layer: l,
                    kind,
                    seq_idx: h.row,
                    feat_idx: h.col,
                    value: h.value,
                    token_id: cap.tokens[h.row],
                });
            }
        }
    }
    Ok(out)
}

pub fn attention_records<T: Scalar>(sample: usize, cap: &CaptureSet<T>, tau_attn: f64) -> Vec<AttentionOutlierRecord> {
    let mut out = Vec::new();
    let n = seq_keys(cap);
    for (l, heads) in cap.attn.iter().enumerate() {
        for (i, a) in heads.iter().enumerate() {
            let det = detect_attention_outliers_within(a, n, tau_attn);
            for &j in &det.keys {
                out.push(AttentionOutlierRecord {
                    sample,
                    layer: l,
                    head: i,
                    key_idx: j,
                    score: det.scores[j],
                    token_id: cap.tokens[j],
                });
            }
        }
    }
    out
}

/// Statistics of the outlier cumulative scores of one head, normalized by
/// the sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub count: usize,
    /// Set when no key of any probe was flagged; the statistics are then absent.
    pub no_outliers: bool,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub min: Option<f64>,
}

/// Streaming per-head collector of normalized outlier scores.
#[derive(Clone, Debug)]
pub struct HeadStatsPool {
    scores: Vec<Vec<Vec<f64>>>,
}

impl HeadStatsPool {
    pub fn new(n_layer: usize, n_head: usize) -> Self {
        Self {
            scores: vec![vec![Vec::new(); n_head]; n_layer],
        }
    }

    pub fn add<T: Scalar>(&mut self, cap: &CaptureSet<T>, tau_attn: f64) {
        let n = seq_keys(cap);
        for (l, heads) in cap.attn.iter().enumerate() {
            for (i, a) in heads.iter().enumerate() {
                let det = detect_attention_outliers_within(a, n, tau_attn);
                self.scores[l][i].extend(det.keys.iter().map(|&j| det.scores[j] / n as f64));
            }
        }
    }

    pub fn finish(&self) -> Vec<HeadStats> {
        let mut out = Vec::new();
        for (layer, heads) in self.scores.iter().enumerate() {
            for (head, s) in heads.iter().enumerate() {
                let none = s.is_empty();
                out.push(HeadStats {
                    layer,
                    head,
                    count: s.len(),
                    no_outliers: none,
                    mean: (!none).then(|| s.iter().sum::<f64>() / s.len() as f64),
                    max: (!none).then(|| s.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    min: (!none).then(|| s.iter().copied().fold(f64::INFINITY, f64::min)),
                });
            }
        }
        out
    }
}

pub fn attention_head_stats<T: Scalar>(caps: &[CaptureSet<T>], frac: f64) -> Vec<HeadStats> {
    let (layers, heads) = caps.first().map_or((0, 0), |c| (c.n_layer(), c.attn.first().map_or(0, Vec::len)));
    let mut pool = HeadStatsPool::new(layers, heads);
    for c in caps {
        pool.add(c, frac * c.seq_len() as f64);
    }
    pool.finish()
}

/// `|act ∩ attn| / |act|`, or `None` (skip) for an empty activation set.
pub fn overlap(act: &BTreeSet<usize>, attn: &BTreeSet<usize>) -> Option<f64> {
    if act.is_empty() {
        return None;
    }
    Some(act.intersection(attn).count() as f64 / act.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallOverlap {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean of the non-skipped cells.
pub fn overall_overlap(cells: &[Option<f64>]) -> Result<OverallOverlap> {
    let used: Vec<f64> = cells.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::Data(format!("all {} overlap cells were skipped", cells.len())));
    }
    Ok(OverallOverlap {
        value: used.iter().sum::<f64>() / used.len() as f64,
        used: used.len(),
        skipped: cells.len() - used.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapCell {
    pub sample: usize,
    pub layer: usize,
    pub head: usize,
    pub act_count: usize,
    pub attn_count: usize,
    pub overlap: Option<f64>,
}

/// Sequence positions holding at least one activation outlier of `h`.
pub fn activation_positions<T: Scalar>(h: &Tensor<T>, tau: f64) -> Result<BTreeSet<usize>> {
    Ok(detect_activation_outliers(h, tau)?.into_iter().map(|h| h.row).collect())
}

/// One cell per (layer, head): activation outlier positions of `h_ℓ`
/// against attention outlier keys of head `i` in the same layer.
pub fn overlap_cells<T: Scalar>(sample: usize, cap: &CaptureSet<T>, tau: f64, tau_attn: f64) -> Result<Vec<OverlapCell>> {
    let n = seq_keys(cap);
    let mut out = Vec::new();
    for l in 0..cap.n_layer() {
        let act = activation_positions(&cap.h[l], tau)?;
        for (i, a) in cap.attn[l].iter().enumerate() {
            let keys: BTreeSet<usize> = detect_attention_outliers_within(a, n, tau_attn).keys.into_iter().collect();
            out.push(OverlapCell {
                sample,
                layer: l,
                head: i,
                act_count: act.len(),
                attn_count: keys.len(),
                overlap: overlap(&act, &keys),
            });
        }
    }
    Ok(out)
}

/// Coarse token classes for positional breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    /// The first position of a sequence.
    Start,
    /// Punctuation or whitespace.
    PunctSpace,
    Other,
}

pub fn token_category(position: usize, token: usize, vocab: &Vocab) -> TokenCategory {
    if position == 0 {
        return TokenCategory::Start;
    }
    let c = match vocab {
        Vocab::Bytes => char::from(token as u8),
        Vocab::Chars { symbols, .. } => symbols.get(token).copied().unwrap_or('\u{FFFD}'),
    };
    if c.is_ascii_punctuation() || c.is_whitespace() {
        TokenCategory::PunctSpace
    } else {
        TokenCategory::Other
    }
}

/// Start offsets of `n` probe windows of `len + 1` tokens, drawn from a
/// seeded stream so reruns see the same probes.
pub fn probe_offsets(n_tokens: usize, n: usize, len: usize, seed: u64) -> Result<Vec<usize>> {
    if n_tokens < len + 1 {
        return Err(Error::Data(format!("{n_tokens} tokens cannot hold a probe of {len}")));
    }
    let mut rng = Rng::derive(seed, 0x7072_6f62_65);
    let span = (n_tokens - len) as u64;
    Ok((0..n).map(|_| rng.below(span) as usize).collect())
}

/// A flagged position with its magnitude, for lifecycle tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub seq_idx: usize,
    pub feat_idx: usize,
    pub value: f64,
}

/// Query/key agreement toward the most attended key of a head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkAlignment {
    pub head: usize,
    pub key_idx: usize,
    /// Head dimensions ordered by mean `q_i[d]·k_j[d]` over queries that
    /// can see the key, largest first (top `k` only).
    pub dims: Vec<(usize, f64)>,
}

/// Everything exported for one layer of the lifecycle trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifecycleLayer {
    pub layer: usize,
    pub h_top: Vec<Located>,
    pub x_down_top: Vec<Located>,
    pub h_outliers: Vec<Hit>,
    pub x_down_outliers: Vec<Hit>,
    /// Per head, the attention outlier keys.
    pub attn_outliers: Vec<Vec<usize>>,
    pub qk_alignment: Vec<QkAlignment>,
    /// `[head][position]` L2 norm of the value vector.
    pub value_norms: Vec<Vec<f64>>,
}

fn top_located<T: Scalar>(t: &Tensor<T>, k: usize) -> Vec<Located> {
    let w = t.last_dim();
    let mut idx: Vec<usize> = (0..t.numel()).collect();
    idx.sort_by(|&a, &b| t.data()[b].as_f64().abs().total_cmp(&t.data()[a].as_f64().abs()).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| Located {
            seq_idx: i / w,
            feat_idx: i % w,
            value: t.data()[i].as_f64(),
        })
        .collect()
}

fn qk_alignment<T: Scalar>(head: usize, q: &Tensor<T>, k: &Tensor<T>, a: &Tensor<T>, n: usize, top: usize) -> QkAlignment {
    let scores = cumulative_scores(a, n);
    let key = (0..n).max_by(|&x, &y| scores[x].total_cmp(&scores[y]).then(y.cmp(&x))).unwrap_or(0);
    let d = q.last_dim();
    let mut contrib = vec![0.0; d];
    let queries = n - key;
    for i in key..n {
        for (dim, c) in contrib.iter_mut().enumerate() {
            *c += q.row(i)[dim].as_f64() * k.row(key)[dim].as_f64() / queries as f64;
        }
    }
    let mut dims: Vec<(usize, f64)> = contrib.into_iter().enumerate().collect();
    dims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    dims.truncate(top);
    QkAlignment { head, key_idx: key, dims }
}

/// Per-layer lifecycle data of one captured sequence.
pub fn lifecycle_layers<T: Scalar>(cap: &CaptureSet<T>, cfg: &AnalysisConfig) -> Result<Vec<LifecycleLayer>> {
    let n = seq_keys(cap);
    let tau_attn = cfg.tau_attn(n);
    let mut out = Vec::with_capacity(cap.n_layer());
    for l in 0..cap.n_layer() {
        let heads = cap.attn[l].len();
        out.push(LifecycleLayer {
            layer: l,
            h_top: top_located(&cap.h[l], cfg.topk),
            x_down_top: top_located(&cap.x_down[l], cfg.topk),
            h_outliers: detect_activation_outliers(&cap.h[l], cfg.tau)?,
            x_down_outliers: detect_activation_outliers(&cap.x_down[l], cfg.tau)?,
            attn_outliers: cap.attn[l]
                .iter()
                .map(|a| detect_attention_outliers_within(a, n, tau_attn).keys)
                .collect(),
            qk_alignment: (0..heads)
                .map(|i| qk_alignment(i, &cap.q[l][i], &cap.k[l][i], &cap.attn[l][i], n, cfg.topk))
                .collect(),
            value_norms: cap.v[l]
                .iter()
                .map(|v| (0..v.rows()).map(|r| v.row(r).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()).collect())
                .collect(),
        });
    }
    Ok(out)
}

/// Writes `layer_{ℓ}.json` per layer plus `lifecycle.csv`, a flat table
/// of every flagged activation and attention position. Returns the paths.
pub fn lifecycle_export(model: &Model<f32>, tokens: &[usize], out: &Path, cfg: &AnalysisConfig) -> Result<Vec<PathBuf>> {
    let (_, cap) = model.forward_captured(tokens)?;
    let layers = lifecycle_layers(&cap, cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::new();
    let mut csv = String::from("layer,kind,head,seq_idx,feat_idx,value,token_id\n");
    for lay in &layers {
        let p = out.join(format!("layer_{}.json", lay.layer));
        fs::write(&p, serde_json::to_vec_pretty(lay)?).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
        for (kind, hits) in [("layer_output", &lay.h_outliers), ("down_input", &lay.x_down_outliers)] {
            for h in hits {
                csv.push_str(&format!("{},{kind},,{},{},{},{}\n", lay.layer, h.row, h.col, h.value, tokens[h.row]));
            }
        }
        for (head, keys) in lay.attn_outliers.iter().enumerate() {
            for &j in keys {
                csv.push_str(&format!("{},attention,{head},{j},,,{}\n", lay.layer, tokens[j]));
            }
        }
    }
    let p = out.join("lifecycle.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    paths.push(p);
    Ok(paths)
}
