//! Post-training weight compression: absmax 8-bit quantization and
//! unstructured magnitude pruning, evaluated by perplexity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::{eval_loss, perplexity};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// The smallest fraction of every matrix separately.
    #[default]
    PerMatrix,
    /// One magnitude ranking across all compressible matrices.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantGranularity {
    #[default]
    PerTensor,
    PerRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressConfig {
    pub prune_fraction: f64,
    pub prune_mode: PruneMode,
    /// When false the quantized column repeats the full-precision condition.
    pub quantize: bool,
    pub granularity: QuantGranularity,
    /// Evaluation windows of `block_size` tokens from the validation split.
    pub eval_windows: usize,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            prune_fraction: 0.5,
            prune_mode: PruneMode::PerMatrix,
            quantize: true,
            granularity: QuantGranularity::PerTensor,
            eval_windows: 64,
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::Config(format!("prune fraction {} outside [0, 1)", self.prune_fraction)));
        }
        if self.eval_windows == 0 {
            return Err(Error::Config("eval_windows must be positive".into()));
        }
        Ok(())
    }
}

/// 8-bit codes and the scale they multiply.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub q: Vec<i8>,
    pub scale: f64,
}

impl Quantized {
    pub fn dequantize<T: Scalar>(&self) -> Vec<T> {
        self.q.iter().map(|&c| T::of(c as f64 * self.scale)).collect()
    }
}

/// `scale = max|w|/127`, `q = round_half_away(w/scale)` clamped to ±127.
/// An all-zero input gives scale 0 and zero codes.
pub fn quantize_absmax_w8<T: Scalar>(w: &[T]) -> Quantized {
    let absmax = w.iter().map(|x| x.as_f64().abs()).fold(0.0, f64::max);
    if absmax == 0.0 {
        return Quantized {
            q: vec![0; w.len()],
            scale: 0.0,
        };
    }
    // `w·127/absmax` rather than `w/scale` keeps grid points exact.
    let q = w
        .iter()
        .map(|x| (x.as_f64() * 127.0 / absmax).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Quantized {
        q,
        scale: absmax / 127.0,
    }
}

/// Replaces `w` by its dequantized absmax-W8 image; returns the scales used.
pub fn fake_quantize<T: Scalar>(w: &mut [T], row_len: usize, granularity: QuantGranularity) -> Vec<f64> {
    let chunk = match granularity {
        QuantGranularity::PerTensor => w.len().max(1),
        QuantGranularity::PerRow => row_len.max(1),
    };
    w.chunks_mut(chunk)
        .map(|c| {
            let qz = quantize_absmax_w8(c);
            c.copy_from_slice(&qz.dequantize::<T>());
            qz.scale
        })
        .collect()
}

/// Order in which entries are removed: ascending magnitude, ties by index.
fn prune_order<T: Scalar>(w: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].as_f64().abs().total_cmp(&w[b].as_f64().abs()).then(a.cmp(&b)));
    idx
}

/// Zeroes the `⌊p·n⌋` smallest-magnitude entries; returns how many.
pub fn prune_magnitude<T: Scalar>(w: &mut [T], p: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("prune fraction {p} outside [0, 1)")));
    }
    let k = (p * w.len() as f64).floor() as usize;
    for i in prune_order(w).into_iter().take(k) {
        w[i] = T::zero();
    }
    Ok(k)
}

/// Global variant: ranks all entries of all buffers together (ties by
/// position in the concatenation) and zeroes `⌊p·N⌋` of them.
pub fn prune_global<T: Scalar>(bufs: &mut [&mut [T]], p: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("prune fraction {p} outside [0, 1)")));
    }
    let flat: Vec<(f64, usize, usize)> = bufs
        .iter()
        .enumerate()
        .flat_map(|(b, buf)| buf.iter().enumerate().map(move |(i, x)| (x.as_f64().abs(), b, i)))
        .collect();
    let k = (p * flat.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[a].0.total_cmp(&flat[b].0).then(a.cmp(&b)));
    for &o in order.iter().take(k) {
        let (_, b, i) = flat[o];
        bufs[b][i] = T::zero();
    }
    Ok(k)
}

/// Perplexity under the three conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub model: String,
    pub variant: String,
    pub ppl_fp: f64,
    pub ppl_w8: f64,
    pub ppl_sparse50: f64,
    pub params: usize,
    /// Zeroed fraction of the compressible weights in the pruned condition.
    pub sparsity: f64,
}

impl CompressionReport {
    pub const CSV_HEADER: &'static str = "model,variant,ppl_fp,ppl_w8,ppl_sparse50,params,sparsity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.model, self.variant, self.ppl_fp, self.ppl_w8, self.ppl_sparse50, self.params, self.sparsity
        )
    }

    pub fn w8_inflation(&self) -> f64 {
        self.ppl_w8 / self.ppl_fp
    }

    pub fn sparse_inflation(&self) -> f64 {
        self.ppl_sparse50 / self.ppl_fp
    }
}

fn compressible<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.role.compressible())
        .map(|(i, _)| i)
        .collect()
}

/// Applies `f` to a model, evaluates, then restores the touched weights.
fn with_modified<T: Scalar, R>(
    model: &mut Model<T>,
    idx: &[usize],
    f: impl FnOnce(&mut Model<T>) -> Result<R>,
    eval: impl FnOnce(&Model<T>) -> Result<f64>,
) -> Result<(f64, R)> {
    let saved: Vec<Vec<T>> = idx.iter().map(|&i| model.params()[i].tensor.data().to_vec()).collect();
    let outcome = f(model).and_then(|r| Ok((eval(model)?, r)));
    for (&i, data) in idx.iter().zip(saved) {
        model.params_mut()[i].tensor.data_mut().copy_from_slice(&data);
    }
    outcome
}

/// Evaluates full-precision, absmax-W8 and pruned perplexity on the same
/// validation windows. Weights are restored before returning.
pub fn compression_eval<T: Scalar>(
    model: &mut Model<T>,
    model_id: &str,
    val: &[u16],
    block: usize,
    cfg: &CompressConfig,
) -> Result<CompressionReport> {
    cfg.validate()?;
    let windows = cfg.eval_windows;
    let eval = |m: &Model<T>| -> Result<f64> { Ok(perplexity(eval_loss(m, val, block, windows)?)) };
    let idx = compressible(model);

    let ppl_fp = eval(model)?;
    let (ppl_w8, ()) = with_modified(
        model,
        &idx,
        |m| {
            if cfg.quantize {
                for &i in &idx {
                    let t = &mut m.params_mut()[i].tensor;
                    let row = t.last_dim();
                    fake_quantize(t.data_mut(), row, cfg.granularity);
                }
            }
            Ok(())
        },
        eval,
    )?;
    let total: usize = idx.iter().map(|&i| model.params()[i].tensor.numel()).sum();
    let (ppl_sparse50, zeroed) = with_modified(
        model,
        &idx,
        |m| {
            let p = cfg.prune_fraction;
            match cfg.prune_mode {
                PruneMode::PerMatrix => {
                    let mut n = 0;
                    for &i in &idx {
                        n += prune_magnitude(m.params_mut()[i].tensor.data_mut(), p)?;
                    }
                    Ok(n)
                }
                PruneMode::Global => {
                    let params = m.params_mut();
                    let mut bufs: Vec<&mut [T]> = params
                        .iter_mut()
                        .enumerate()
                        .filter(|(i, _)| idx.contains(i))
                        .map(|(_, p)| p.tensor.data_mut())
                        .collect();
                    prune_global(&mut bufs, p)
                }
            }
        },
        eval,
    )?;
    Ok(CompressionReport {
        model: model_id.to_string(),
        variant: model.config().variant.name().to_string(),
        ppl_fp,
        ppl_w8,
        ppl_sparse50,
        params: model.param_count(),
        sparsity: if total == 0 { 0.0 } else { zeroed as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absmax_example() {
        let qz = quantize_absmax_w8(&[-2.0f64, 1.0, 0.5]);
        assert_eq!(qz.q, vec![-127, 64, 32]);
        assert_eq!(qz.scale, 2.0 / 127.0);
        let back: Vec<f64> = qz.dequantize();
        assert_eq!(back[0], -2.0);
        assert!((back[1] - 1.007_874_015_748_031_5).abs() < 1e-12);
        assert!((back[2] - 0.503_937_007_874_015_7).abs() < 1e-12);
    }

    #[test]
    fn zero_tensor_quantizes_to_zero() {
        let qz = quantize_absmax_w8(&[0.0f32; 4]);
        assert_eq!(qz.scale, 0.0);
        assert_eq!(qz.q, vec![0; 4]);
    }

    #[test]
    fn grid_values_round_trip_exactly() {
        let s = 3.0 / 127.0;
        let w: Vec<f64> = [-127.0, -5.0, 0.0, 17.0, 127.0].iter().map(|k| k * s).collect();
        let qz = quantize_absmax_w8(&w);
        assert_eq!(qz.q, vec![-127, -5, 0, 17, 127]);
    }

    #[test]
    fn prune_example() {
        let mut w = [0.1f64, -0.5, 0.2, -0.05];
        assert_eq!(prune_magnitude(&mut w, 0.5).unwrap(), 2);
        assert_eq!(w, [0.0, -0.5, 0.2, 0.0]);
        let mut same = [0.3f64, -0.3, 0.3];
        prune_magnitude(&mut same, 0.5).unwrap();
        assert_eq!(same, [0.0, -0.3, 0.3]);
        let mut id = [1.0f64, 2.0];
        prune_magnitude(&mut id, 0.0).unwrap();
        assert_eq!(id, [1.0, 2.0]);
        assert!(prune_magnitude(&mut id, 1.0).is_err());
    }

    #[test]
    fn global_prune_ranks_across_buffers() {
        let mut a = [1.0f64, 0.1];
        let mut b = [0.2f64, 5.0];
        let n = prune_global(&mut [&mut a[..], &mut b[..]], 0.5).unwrap();
        assert_eq!(n, 2);
        assert_eq!((a, b), ([1.0, 0.0], [0.0, 5.0]));
    }
}
