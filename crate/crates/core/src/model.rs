//! Decoder-only transformer with a pluggable attention kernel.
//!
//! Blocks are pre-norm (`h ← h + MHA(LN(h))`, `h ← h + MLP(LN(h))`) with
//! learned absolute positions and an output head tied to the token
//! embedding. Weights use the `[out, in]` layout, so a row of a projection
//! matrix is one output unit.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttnExtras, VariantKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Activation, Scalar, Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// `down(gelu(up(x)))`
    GeluMlp,
    /// `down(silu(gate(x)) ⊙ up(x))`
    SiluGlu,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    /// Hidden width of each MLP projection.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub norm: NormKind,
    pub mlp: MlpKind,
    pub variant: VariantKind,
    pub seed: u64,
    /// Fixed bias `b` inside sigmoid attention; `None` means `-ln(block_size)`.
    pub sigmoid_bias: Option<f64>,
    /// Initial bias of the context-aware scaling gate; 4 gives `s ≈ 0.982`.
    pub gate_bias_init: f64,
    pub norm_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            d_model: 256,
            d_ff: 1024,
            vocab_size: 256,
            block_size: 256,
            norm: NormKind::LayerNorm,
            mlp: MlpKind::GeluMlp,
            variant: VariantKind::Default,
            seed: 1337,
            sigmoid_bias: None,
            gate_bias_init: 4.0,
            norm_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    /// Hidden width conventionally paired with `mlp` at this `d_model`:
    /// `4·d` for the GELU MLP and `⌊(8/3·d)/64⌋·64` per projection for the
    /// gated SiLU MLP.
    pub fn default_d_ff(mlp: MlpKind, d_model: usize) -> usize {
        match mlp {
            MlpKind::GeluMlp => 4 * d_model,
            MlpKind::SiluGlu => ((8 * d_model / 3) / 64 * 64).max(64),
        }
    }

    pub fn sigmoid_bias(&self) -> f64 {
        self.sigmoid_bias.unwrap_or(-(self.block_size as f64).ln())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer count, head count and widths must be positive".into());
        }
        if self.d_model % self.n_head != 0 {
            return fail(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head));
        }
        if self.block_size < 2 {
            return fail(format!("block_size {} < 2", self.block_size));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// How a parameter is treated by the optimizer and by compression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Embedding,
    Projection,
    Bias,
    NormGain,
    NormBias,
    /// `k′` / `v′`
    KeyValuePrime,
    GateWeight,
    GateBias,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Embedding | ParamRole::Projection | ParamRole::GateWeight)
    }

    /// Attention/MLP projection matrices and embeddings.
    pub fn compressible(self) -> bool {
        matches!(self, ParamRole::Embedding | ParamRole::Projection)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
    init: Init,
}

#[derive(Clone, Debug)]
struct NormIds {
    gain: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
enum MlpIds {
    Gelu { up: (usize, usize), down: (usize, usize) },
    Glu { gate: usize, up: usize, down: usize },
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: NormIds,
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    key_prime: Option<usize>,
    value_prime: Option<usize>,
    gate: Option<(usize, usize)>,
    ln2: NormIds,
    mlp: MlpIds,
}

#[derive(Clone, Debug)]
struct Layout {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerIds>,
    ln_f: NormIds,
}

fn param_specs(cfg: &TransformerConfig) -> Vec<ParamSpec> {
    let (d, f, h, dh) = (cfg.d_model, cfg.d_ff, cfg.n_head, cfg.d_head());
    let std = 0.02;
    let resid_std = std / (2.0 * cfg.n_layer as f64).sqrt();
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, role: ParamRole, init: Init| {
        specs.push(ParamSpec { name, shape, role, init });
    };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>, ParamRole, Init), prefix: &str| {
        add(format!("{prefix}.weight"), vec![d], ParamRole::NormGain, Init::Ones);
        if cfg.norm == NormKind::LayerNorm {
            add(format!("{prefix}.bias"), vec![d], ParamRole::NormBias, Init::Zeros);
        }
    };

    add("wte".into(), vec![cfg.vocab_size, d], ParamRole::Embedding, Init::Normal(std));
    add("wpe".into(), vec![cfg.block_size, d], ParamRole::Embedding, Init::Normal(std));
    for l in 0..cfg.n_layer {
        let p = format!("h.{l}");
        norm(&mut add, &format!("{p}.ln_1"));
        for (m, s) in [("q", std), ("k", std), ("v", std), ("o", resid_std)] {
            add(format!("{p}.attn.{m}.weight"), vec![d, d], ParamRole::Projection, Init::Normal(s));
            add(format!("{p}.attn.{m}.bias"), vec![d], ParamRole::Bias, Init::Zeros);
        }
        if cfg.variant.has_key_prime() {
            add(format!("{p}.attn.k_prime"), vec![h, dh], ParamRole::KeyValuePrime, Init::Normal(std));
        }
        if cfg.variant.has_value_prime() {
            add(format!("{p}.attn.v_prime"), vec![h, dh], ParamRole::KeyValuePrime, Init::Normal(std));
        }
        if cfg.variant.has_gate() {
            add(format!("{p}.attn.gate.weight"), vec![h, d], ParamRole::GateWeight, Init::Normal(std));
            add(format!("{p}.attn.gate.bias"), vec![h], ParamRole::GateBias, Init::Const(cfg.gate_bias_init));
        }
        norm(&mut add, &format!("{p}.ln_2"));
        match cfg.mlp {
            MlpKind::GeluMlp => {
                add(format!("{p}.mlp.up.weight"), vec![f, d], ParamRole::Projection, Init::Normal(std));
                add(format!("{p}.mlp.up.bias"), vec![f], ParamRole::Bias, Init::Zeros);
                add(format!("{p}.mlp.down.weight"), vec![d, f], ParamRole::Projection, Init::Normal(resid_std));
                add(format!("{p}.mlp.down.bias"), vec![d], ParamRole::Bias, Init::Zeros);
            }
            MlpKind::SiluGlu => {
                add(format!("{p}.mlp.gate.weight"), vec![f, d], ParamRole::Projection, Init::Normal(std));
                add(format!("{p}.mlp.up.weight"), vec![f, d], ParamRole::Projection, Init::Normal(std));
                add(format!("{p}.mlp.down.weight"), vec![d, f], ParamRole::Projection, Init::Normal(resid_std));
            }
        }
    }
    norm(&mut add, "ln_f");
    specs
}

fn build_layout(cfg: &TransformerConfig, names: &[String]) -> Result<Layout> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let get = |n: &str| index.get(n).copied().ok_or_else(|| Error::Version(format!("missing parameter {n}")));
    let opt = |n: &str| index.get(n).copied();
    let norm = |p: &str| -> Result<NormIds> {
        Ok(NormIds {
            gain: get(&format!("{p}.weight"))?,
            bias: opt(&format!("{p}.bias")),
        })
    };
    let pair = |p: &str| -> Result<(usize, usize)> { Ok((get(&format!("{p}.weight"))?, get(&format!("{p}.bias"))?)) };
    let mut layers = Vec::with_capacity(cfg.n_layer);
    for l in 0..cfg.n_layer {
        let p = format!("h.{l}");
        let mlp = match cfg.mlp {
            MlpKind::GeluMlp => MlpIds::Gelu {
                up: pair(&format!("{p}.mlp.up"))?,
                down: pair(&format!("{p}.mlp.down"))?,
            },
            MlpKind::SiluGlu => MlpIds::Glu {
                gate: get(&format!("{p}.mlp.gate.weight"))?,
                up: get(&format!("{p}.mlp.up.weight"))?,
                down: get(&format!("{p}.mlp.down.weight"))?,
            },
        };
        layers.push(LayerIds {
            ln1: norm(&format!("{p}.ln_1"))?,
            q: pair(&format!("{p}.attn.q"))?,
            k: pair(&format!("{p}.attn.k"))?,
            v: pair(&format!("{p}.attn.v"))?,
            o: pair(&format!("{p}.attn.o"))?,
            key_prime: opt(&format!("{p}.attn.k_prime")),
            value_prime: opt(&format!("{p}.attn.v_prime")),
            gate: if cfg.variant.has_gate() { Some(pair(&format!("{p}.attn.gate"))?) } else { None },
            ln2: norm(&format!("{p}.ln_2"))?,
            mlp,
        });
    }
    Ok(Layout {
        wte: get("wte")?,
        wpe: get("wpe")?,
        layers,
        ln_f: norm("ln_f")?,
    })
}

/// Closed-form parameter count implied by a configuration.
pub fn param_count_for(cfg: &TransformerConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Tape handles of one layer's intermediate values (batched layout).
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Residual stream after the attention sub-block, `[B, T, D]`.
    pub h_mid: TensorId,
    /// Block output `h_ℓ`, `[B, T, D]`.
    pub h_out: TensorId,
    /// Input of the MLP down projection, `[B, T, F]`.
    pub x_down: TensorId,
    /// `[B, H, T, dh]`
    pub q: TensorId,
    pub k: TensorId,
    pub v: TensorId,
    /// `[B, H, T, n_keys]`
    pub attn: TensorId,
    /// Scaling gate `[B, H, T, 1]` for the context-aware scaling variant.
    pub gate: Option<TensorId>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `[B, T, V]`
    pub logits: TensorId,
    /// One leaf per parameter, in model order.
    pub params: Vec<TensorId>,
    pub layers: Vec<LayerTrace>,
}

/// Instrumented values of one probed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSet<T = f32> {
    pub tokens: Vec<usize>,
    /// Per layer `h_ℓ`, `[T, D]`.
    pub h: Vec<Tensor<T>>,
    /// Per layer residual after attention, `[T, D]`.
    pub h_mid: Vec<Tensor<T>>,
    /// Per layer down-projection input, `[T, F]`.
    pub x_down: Vec<Tensor<T>>,
    /// `[layer][head]` attention weights, `[T, n_keys]`.
    pub attn: Vec<Vec<Tensor<T>>>,
    /// `[layer][head]`, `[T, dh]`.
    pub q: Vec<Vec<Tensor<T>>>,
    pub k: Vec<Vec<Tensor<T>>>,
    pub v: Vec<Vec<Tensor<T>>>,
    /// `[layer][head]` gate values per position, when the variant has one.
    pub gate: Vec<Option<Vec<Vec<T>>>>,
}

impl<T: Scalar> CaptureSet<T> {
    pub fn n_layer(&self) -> usize {
        self.h.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Splits a `[1, H, T, x]` tensor into `H` tensors of shape `[T, x]`.
fn per_head<T: Scalar>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    let s = t.shape();
    let (h, rows, cols) = (s[1], s[2], s[3]);
    (0..h)
        .map(|i| {
            let data = t.data()[i * rows * cols..(i + 1) * rows * cols].to_vec();
            Tensor::new([rows, cols], data).expect("slice matches shape")
        })
        .collect()
}

fn squeeze_batch<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.clone().with_requires_grad(false).reshape(t.shape()[1..].to_vec()).expect("leading 1")
}

/// A transformer parameterized by an attention variant.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: TransformerConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Fresh weights: `N(0, 0.02)` projections and embeddings, residual
    /// output projections scaled by `1/√(2·n_layer)`, zero biases, unit norm
    /// gains. Deterministic in `config.seed`.
    pub fn init(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let params: Vec<Param<T>> = param_specs(&config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Normal(std) => rng.normals(n, 0.0, std).into_iter().map(T::of).collect(),
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Const(c) => vec![T::of(c); n],
                };
                Param {
                    name: s.name,
                    role: s.role,
                    tensor: Tensor::new(s.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_params(config: TransformerConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Version(format!(
                "expected {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.name != p.name || s.shape != p.tensor.shape() {
                return Err(Error::Version(format!(
                    "expected {} {:?}, found {} {:?}",
                    s.name,
                    s.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let params = specs
            .into_iter()
            .zip(params)
            .map(|(s, p)| Param { role: s.role, ..p })
            .collect::<Vec<_>>();
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let layout = build_layout(&config, &names)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if tokens.is_empty() || batch == 0 {
            return Err(Error::EmptySequence);
        }
        if tokens.len() % batch != 0 {
            return Err(Error::Contract(format!("{} tokens do not split into {batch} rows", tokens.len())));
        }
        let t = tokens.len() / batch;
        if t > self.config.block_size {
            return Err(Error::Length {
                len: t,
                max: self.config.block_size,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index {
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(t)
    }

    fn norm(&self, tape: &mut Tape<T>, x: TensorId, ids: &NormIds, p: &[TensorId]) -> Result<TensorId> {
        match self.config.norm {
            NormKind::LayerNorm => {
                let bias = p[ids.bias.expect("layer norm has a bias")];
                tape.layer_norm(x, p[ids.gain], bias, self.config.norm_eps)
            }
            NormKind::RmsNorm => tape.rms_norm(x, p[ids.gain], self.config.norm_eps),
        }
    }

    /// Records the full forward pass of `batch` rows of `tokens` on `tape`.
    ///
    /// With `track`, parameter leaves require gradients.
    pub fn trace(&self, tape: &mut Tape<T>, tokens: &[usize], batch: usize, track: bool) -> Result<Trace> {
        let t = self.check_tokens(tokens, batch)?;
        let cfg = &self.config;
        let heads = cfg.n_head;
        let p: Vec<TensorId> = self
            .params
            .iter()
            .map(|prm| tape.leaf(prm.tensor.clone().with_requires_grad(track)))
            .collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(p[self.layout.wte], tokens, &[batch, t])?;
        let pos = tape.embedding(p[self.layout.wpe], &positions, &[batch, t])?;
        let mut h = tape.add(tok, pos)?;

        let mut layers = Vec::with_capacity(cfg.n_layer);
        for ids in &self.layout.layers {
            let xn = self.norm(tape, h, &ids.ln1, &p)?;
            let project = |tape: &mut Tape<T>, (w, b): (usize, usize)| -> Result<TensorId> {
                let y = tape.linear(xn, p[w], Some(p[b]))?;
                tape.split_heads(y, heads)
            };
            let q = project(tape, ids.q)?;
            let k = project(tape, ids.k)?;
            let v = project(tape, ids.v)?;
            let gate = match ids.gate {
                Some(g) => {
                    let logits = tape.linear(xn, p[g.0], Some(p[g.1]))?;
                    let s = tape.activation(logits, Activation::Sigmoid);
                    Some(tape.split_heads(s, heads)?)
                }
                None => None,
            };
            let extras = AttnExtras {
                key_prime: ids.key_prime.map(|i| p[i]),
                value_prime: ids.value_prime.map(|i| p[i]),
                gate,
                sigmoid_bias: cfg.sigmoid_bias(),
            };
            let att = attend(tape, cfg.variant, q, k, v, &extras)?;
            let merged = tape.merge_heads(att.out)?;
            let o = tape.linear(merged, p[ids.o.0], Some(p[ids.o.1]))?;
            let h_mid = tape.add(h, o)?;

            let xn2 = self.norm(tape, h_mid, &ids.ln2, &p)?;
            let (x_down, mlp_out) = match ids.mlp {
                MlpIds::Gelu { up, down } => {
                    let u = tape.linear(xn2, p[up.0], Some(p[up.1]))?;
                    let a = tape.activation(u, Activation::Gelu);
                    (a, tape.linear(a, p[down.0], Some(p[down.1]))?)
                }
                MlpIds::Glu { gate, up, down } => {
                    let g = tape.linear(xn2, p[gate], None)?;
                    let g = tape.activation(g, Activation::Silu);
                    let u = tape.linear(xn2, p[up], None)?;
                    let a = tape.mul(g, u)?;
                    (a, tape.linear(a, p[down], None)?)
                }
            };
            h = tape.add(h_mid, mlp_out)?;
            layers.push(LayerTrace {
                h_mid,
                h_out: h,
                x_down,
                q,
                k,
                v,
                attn: att.weights,
                gate,
            });
        }
        let hf = self.norm(tape, h, &self.layout.ln_f, &p)?;
        let logits = tape.matmul_nt(hf, p[self.layout.wte])?;
        debug_assert_eq!(tape.shape(logits), &[batch, t, cfg.vocab_size]);
        Ok(Trace { logits, params: p, layers })
    }

    /// Logits `[T, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, tokens, 1, false)?;
        Ok(squeeze_batch(tape.value(trace.logits)))
    }

    /// Logits plus every instrumented intermediate for one sequence.
    pub fn forward_captured(&self, tokens: &[usize]) -> Result<(Tensor<T>, CaptureSet<T>)> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, tokens, 1, false)?;
        let mut cap = CaptureSet {
            tokens: tokens.to_vec(),
            h: Vec::new(),
            h_mid: Vec::new(),
            x_down: Vec::new(),
            attn: Vec::new(),
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            gate: Vec::new(),
        };
        for lt in &trace.layers {
            cap.h.push(squeeze_batch(tape.value(lt.h_out)));
            cap.h_mid.push(squeeze_batch(tape.value(lt.h_mid)));
            cap.x_down.push(squeeze_batch(tape.value(lt.x_down)));
            cap.attn.push(per_head(tape.value(lt.attn)));
            cap.q.push(per_head(tape.value(lt.q)));
            cap.k.push(per_head(tape.value(lt.k)));
            cap.v.push(per_head(tape.value(lt.v)));
            cap.gate.push(lt.gate.map(|g| {
                per_head(tape.value(g)).into_iter().map(Tensor::into_data).collect()
            }));
        }
        Ok((squeeze_batch(tape.value(trace.logits)), cap))
    }

    /// Mean next-token cross-entropy of `batch` rows without recording
    /// gradients.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<T> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, inputs, batch, false)?;
        let loss = self.loss_node(&mut tape, &trace, targets)?;
        tape.value(loss).item()
    }

    /// Loss and one gradient buffer per parameter.
    pub fn loss_and_grads(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, inputs, batch, true)?;
        let loss = self.loss_node(&mut tape, &trace, targets)?;
        tape.backward(loss)?;
        let grads = trace
            .params
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| tape.grad(id).map_or_else(|| vec![T::zero(); p.tensor.numel()], <[T]>::to_vec))
            .collect();
        Ok((tape.value(loss).item()?, grads))
    }

    fn loss_node(&self, tape: &mut Tape<T>, trace: &Trace, targets: &[usize]) -> Result<TensorId> {
        let v = self.config.vocab_size;
        let n = tape.value(trace.logits).numel() / v;
        let flat = tape.reshape(trace.logits, &[n, v])?;
        tape.cross_entropy(flat, targets)
    }
}
