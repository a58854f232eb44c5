//! Single-head attention kernels for the six formulations under study.
//!
//! Every kernel takes already projected `Q`, `K`, `V` of shape `[..., T, d]`
//! (any number of leading batch axes) and applies a causal mask. Per-head
//! parameters such as `k′`/`v′` are `[G, d]` tensors whose row `l % G` is used
//! for leading slice `l`, so a `[B, H, T, d]` input pairs naturally with
//! `[H, d]` parameters and a plain `[T, d]` input with a `[d]` vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Scalar, Tape, Tensor, TensorId};

/// Which attention formulation a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// `softmax(QKᵀ/√d)·V`
    Default,
    /// default output plus a learned row `v′`
    FixedBias,
    /// default output plus `v′` weighted by an appended key `k′`
    CtxBias,
    /// `k′`/`v′` appended as a real, always-visible key/value pair
    AttnBias,
    /// default output multiplied by a per-query gate in (0, 1)
    CtxScaling,
    /// elementwise `sigmoid(QKᵀ/√d + b)·V`
    Sigmoid,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Default,
        VariantKind::FixedBias,
        VariantKind::CtxBias,
        VariantKind::AttnBias,
        VariantKind::CtxScaling,
        VariantKind::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Default => "default",
            VariantKind::FixedBias => "fixed_bias",
            VariantKind::CtxBias => "ctx_bias",
            VariantKind::AttnBias => "attn_bias",
            VariantKind::CtxScaling => "ctx_scaling",
            VariantKind::Sigmoid => "sigmoid",
        }
    }

    pub fn has_key_prime(self) -> bool {
        matches!(self, VariantKind::CtxBias | VariantKind::AttnBias)
    }

    pub fn has_value_prime(self) -> bool {
        matches!(self, VariantKind::FixedBias | VariantKind::CtxBias | VariantKind::AttnBias)
    }

    pub fn has_gate(self) -> bool {
        self == VariantKind::CtxScaling
    }

    /// Whether captured attention rows sum to one.
    pub fn is_row_stochastic(self) -> bool {
        self != VariantKind::Sigmoid
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    /// Accepts the snake_case names and the letters `a`–`e` (plus `sigmoid`).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "default" | "a" => VariantKind::Default,
            "fixed_bias" | "b" => VariantKind::FixedBias,
            "ctx_bias" | "c" => VariantKind::CtxBias,
            "attn_bias" | "d" => VariantKind::AttnBias,
            "ctx_scaling" | "e" => VariantKind::CtxScaling,
            "sigmoid" => VariantKind::Sigmoid,
            other => return Err(Error::Config(format!("unknown attention variant '{other}'"))),
        })
    }
}

/// Result of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub out: TensorId,
    /// Attention weights `[..., T, n_keys]`. `n_keys` is `T + 1` for
    /// [`VariantKind::AttnBias`], where the last column is the appended key.
    /// For [`VariantKind::CtxBias`] these are the first-term weights.
    pub weights: TensorId,
}

/// Variant-specific inputs on the tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnExtras {
    pub key_prime: Option<TensorId>,
    pub value_prime: Option<TensorId>,
    /// Per-query gate `[..., T, 1]`.
    pub gate: Option<TensorId>,
    pub sigmoid_bias: f64,
}

struct Dims {
    t: usize,
    d: usize,
}

fn check_qkv<T: Scalar>(tape: &Tape<T>, q: TensorId, k: TensorId, v: TensorId) -> Result<Dims> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() < 2 {
        return Err(Error::shape("attention", sq, sk));
    }
    if sq != sk {
        return Err(Error::shape("attention q/k", sq, sk));
    }
    if sq[..sq.len() - 1] != sv[..sv.len().saturating_sub(1)] || sv.len() != sq.len() {
        return Err(Error::shape("attention q/v", sq, sv));
    }
    let t = sq[sq.len() - 2];
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(Dims {
        t,
        d: sq[sq.len() - 1],
    })
}

fn scores<T: Scalar>(tape: &mut Tape<T>, q: TensorId, k: TensorId, d: usize) -> Result<TensorId> {
    let raw = tape.matmul_nt(q, k)?;
    Ok(tape.scale(raw, T::of(1.0 / (d as f64).sqrt())))
}

fn need(id: Option<TensorId>, what: &str) -> Result<TensorId> {
    id.ok_or_else(|| Error::Contract(format!("attention variant needs {what}")))
}

/// (a) `softmax(QKᵀ/√d + mask)·V`.
pub fn attn_default<T: Scalar>(tape: &mut Tape<T>, q: TensorId, k: TensorId, v: TensorId) -> Result<AttnOutput> {
    let Dims { t, d } = check_qkv(tape, q, k, v)?;
    let s = scores(tape, q, k, d)?;
    let weights = tape.softmax_lastdim(s, Some(&Mask::causal(t)))?;
    let out = tape.matmul(weights, v)?;
    Ok(AttnOutput { out, weights })
}

/// (b) default attention plus `v′` on every row.
pub fn attn_fixed_bias<T: Scalar>(
    tape: &mut Tape<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    value_prime: TensorId,
) -> Result<AttnOutput> {
    let base = attn_default(tape, q, k, v)?;
    let out = tape.add_group_bias(base.out, value_prime)?;
    Ok(AttnOutput { out, ..base })
}

/// (c) default attention plus `α·v′`, where `α` is the weight of an appended,
/// always-visible key `k′` in a second softmax whose real-token values are
/// zero.
pub fn attn_ctx_bias<T: Scalar>(
    tape: &mut Tape<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    key_prime: TensorId,
    value_prime: TensorId,
) -> Result<AttnOutput> {
    let Dims { t, d } = check_qkv(tape, q, k, v)?;
    let base = attn_default(tape, q, k, v)?;
    let k_aug = tape.append_group_row(k, key_prime)?;
    let s_aug = scores(tape, q, k_aug, d)?;
    let w_aug = tape.softmax_lastdim(s_aug, Some(&Mask::causal_with_sink(t)))?;
    let zeros = tape.constant(Tensor::zeros(tape.shape(v).to_vec()));
    let v_aug = tape.append_group_row(zeros, value_prime)?;
    let bias = tape.matmul(w_aug, v_aug)?;
    let out = tape.add(base.out, bias)?;
    Ok(AttnOutput { out, weights: base.weights })
}

/// (d) `k′`/`v′` appended as a genuine key/value visible to every query.
pub fn attn_attention_bias<T: Scalar>(
    tape: &mut Tape<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    key_prime: TensorId,
    value_prime: TensorId,
) -> Result<AttnOutput> {
    let Dims { t, d } = check_qkv(tape, q, k, v)?;
    let k_aug = tape.append_group_row(k, key_prime)?;
    let v_aug = tape.append_group_row(v, value_prime)?;
    let s = scores(tape, q, k_aug, d)?;
    let weights = tape.softmax_lastdim(s, Some(&Mask::causal_with_sink(t)))?;
    let out = tape.matmul(weights, v_aug)?;
    Ok(AttnOutput { out, weights })
}

/// (e) default attention with row `i` multiplied by `gate[i]` (`[..., T, 1]`).
pub fn attn_ctx_scaling<T: Scalar>(
    tape: &mut Tape<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    gate: TensorId,
) -> Result<AttnOutput> {
    let base = attn_default(tape, q, k, v)?;
    let out = tape.scale_rows(base.out, gate)?;
    Ok(AttnOutput { out, ..base })
}

/// Sigmoid attention: `sigmoid(QKᵀ/√d + b)·V` with future keys contributing
/// exactly zero. Rows need not sum to one.
pub fn attn_sigmoid<T: Scalar>(tape: &mut Tape<T>, q: TensorId, k: TensorId, v: TensorId, bias: f64) -> Result<AttnOutput> {
    let Dims { t, d } = check_qkv(tape, q, k, v)?;
    let s = scores(tape, q, k, d)?;
    let weights = tape.masked_sigmoid(s, T::of(bias), Some(&Mask::causal(t)))?;
    let out = tape.matmul(weights, v)?;
    Ok(AttnOutput { out, weights })
}

/// Runs the kernel selected by `kind`.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    kind: VariantKind,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    extras: &AttnExtras,
) -> Result<AttnOutput> {
    match kind {
        VariantKind::Default => attn_default(tape, q, k, v),
        VariantKind::FixedBias => attn_fixed_bias(tape, q, k, v, need(extras.value_prime, "v′")?),
        VariantKind::CtxBias => attn_ctx_bias(
            tape,
            q,
            k,
            v,
            need(extras.key_prime, "k′")?,
            need(extras.value_prime, "v′")?,
        ),
        VariantKind::AttnBias => attn_attention_bias(
            tape,
            q,
            k,
            v,
            need(extras.key_prime, "k′")?,
            need(extras.value_prime, "v′")?,
        ),
        VariantKind::CtxScaling => attn_ctx_scaling(tape, q, k, v, need(extras.gate, "a gate")?),
        VariantKind::Sigmoid => attn_sigmoid(tape, q, k, v, extras.sigmoid_bias),
    }
}
