//! Central-difference checks of every differentiable operation and every
//! attention variant, in f64.

use olab_core::attention::{attend, AttnExtras};
use olab_core::rng::Rng;
use olab_core::tensor::finite_diff_check;
use olab_core::{Activation, Mask, Model, Result, Tape, Tensor, TensorId, TransformerConfig, VariantKind};

const CASES: u64 = 20;
const H: f64 = 1e-5;
/// Attention and whole-model checks compose many ops; a wider step keeps
/// rounding noise below the tolerance on small gradient components.
const ATTN_H: f64 = 1e-4;
const OP_TOL: f64 = 1e-6;
const ATTN_TOL: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut Rng, std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal(0.0, std))
}

/// Projects `out` onto a fixed random direction so that every output
/// element contributes to the checked scalar.
fn project(tape: &mut Tape<f64>, out: TensorId, seed: u64) -> Result<TensorId> {
    let mut rng = Rng::derive(seed, 99);
    let r = randn(tape.shape(out), &mut rng, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, shapes: &[&[usize]], h: f64, tol: f64, mut f: F)
where
    F: FnMut(&mut Tape<f64>, &[TensorId], u64) -> Result<TensorId>,
{
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let mut rng = Rng::derive(0xC0FFEE, case);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, &mut rng, 1.0)).collect();
        let r = finite_diff_check(
            |tape, ids| {
                let out = f(tape, ids, case)?;
                project(tape, out, case)
            },
            &inputs,
            h,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(r.max_rel_error);
        assert!(
            r.max_rel_error < tol,
            "{name} case {case}: relative error {} at {:?}",
            r.max_rel_error,
            r.worst
        );
    }
    eprintln!("{name}: worst relative error {worst:.2e} over {CASES} cases");
}

#[test]
fn matmul_family() {
    check("matmul shared", &[&[2, 3, 4], &[4, 5]], H, OP_TOL, |t, x, _| t.matmul(x[0], x[1]));
    check("matmul batched", &[&[2, 3, 4], &[2, 4, 2]], H, OP_TOL, |t, x, _| t.matmul(x[0], x[1]));
    check("matmul_nt shared", &[&[3, 4], &[5, 4]], H, OP_TOL, |t, x, _| t.matmul_nt(x[0], x[1]));
    check("matmul_nt batched", &[&[2, 3, 4], &[2, 3, 4]], H, OP_TOL, |t, x, _| t.matmul_nt(x[0], x[1]));
    check("linear", &[&[2, 3, 4], &[5, 4], &[5]], H, OP_TOL, |t, x, _| t.linear(x[0], x[1], Some(x[2])));
    check("linear no bias", &[&[3, 4], &[2, 4]], H, OP_TOL, |t, x, _| t.linear(x[0], x[1], None));
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[3, 4]], H, OP_TOL, |t, x, _| t.add(x[0], x[1]));
    check("mul", &[&[3, 4], &[3, 4]], H, OP_TOL, |t, x, _| t.mul(x[0], x[1]));
    check("scale", &[&[3, 4]], H, OP_TOL, |t, x, _| Ok(t.scale(x[0], -1.7)));
    check("sum", &[&[3, 4]], H, OP_TOL, |t, x, _| Ok(t.sum(x[0])));
    check("reshape", &[&[3, 4]], H, OP_TOL, |t, x, _| t.reshape(x[0], &[2, 6]));
    for act in [Activation::Sigmoid, Activation::Silu, Activation::Gelu] {
        check(&format!("{act:?}"), &[&[4, 5]], H, OP_TOL, |t, x, _| Ok(t.activation(x[0], act)));
    }
}

#[test]
fn normalization() {
    check("layer_norm", &[&[3, 6], &[6], &[6]], H, OP_TOL, |t, x, _| t.layer_norm(x[0], x[1], x[2], 1e-5));
    check("rms_norm", &[&[3, 6], &[6]], H, OP_TOL, |t, x, _| t.rms_norm(x[0], x[1], 1e-5));
}

#[test]
fn softmax_and_sigmoid_kernels() {
    check("softmax", &[&[3, 5]], H, OP_TOL, |t, x, _| t.softmax_lastdim(x[0], None));
    let causal = Mask::causal(4);
    check("softmax causal", &[&[2, 4, 4]], H, OP_TOL, |t, x, _| t.softmax_lastdim(x[0], Some(&causal)));
    let sink = Mask::causal_with_sink(4);
    check("softmax sink", &[&[4, 5]], H, OP_TOL, |t, x, _| t.softmax_lastdim(x[0], Some(&sink)));
    check("masked_sigmoid", &[&[2, 4, 4]], H, OP_TOL, |t, x, _| t.masked_sigmoid(x[0], -1.3, Some(&causal)));
}

#[test]
fn cross_entropy_and_embedding() {
    check("cross_entropy", &[&[6, 7]], H, OP_TOL, |t, x, case| {
        let targets: Vec<usize> = (0..6).map(|i| (i * 3 + case as usize) % 7).collect();
        t.cross_entropy(x[0], &targets)
    });
    check("embedding", &[&[5, 3]], H, OP_TOL, |t, x, _| t.embedding(x[0], &[4, 0, 4, 2, 1, 1], &[2, 3]));
}

#[test]
fn head_layout_ops() {
    check("split_heads", &[&[2, 3, 6]], H, OP_TOL, |t, x, _| t.split_heads(x[0], 3));
    check("merge_heads", &[&[2, 3, 4, 2]], H, OP_TOL, |t, x, _| t.merge_heads(x[0]));
    check("add_group_bias", &[&[2, 3, 4, 2], &[3, 2]], H, OP_TOL, |t, x, _| t.add_group_bias(x[0], x[1]));
    check("append_group_row", &[&[2, 3, 4, 2], &[3, 2]], H, OP_TOL, |t, x, _| t.append_group_row(x[0], x[1]));
    check("scale_rows", &[&[2, 4, 3], &[2, 4, 1]], H, OP_TOL, |t, x, _| t.scale_rows(x[0], x[1]));
}

/// Every variant through the dispatcher, with all of its extra inputs
/// checked too.
#[test]
fn full_attention_forward_per_variant() {
    let (b, h, len, d) = (1, 2, 5, 3);
    let qkv: &[usize] = &[b, h, len, d];
    let prime: &[usize] = &[h, d];
    let gate: &[usize] = &[b, h, len, 1];
    for kind in VariantKind::ALL {
        let mut shapes: Vec<&[usize]> = vec![qkv, qkv, qkv];
        if kind.has_key_prime() {
            shapes.push(prime);
        }
        if kind.has_value_prime() {
            shapes.push(prime);
        }
        if kind.has_gate() {
            shapes.push(gate);
        }
        check(&format!("attention {kind}"), &shapes, ATTN_H, ATTN_TOL, |t, x, _| {
            let mut extra = x[3..].iter().copied();
            let key_prime = if kind.has_key_prime() { extra.next() } else { None };
            let value_prime = if kind.has_value_prime() { extra.next() } else { None };
            let gate = if kind.has_gate() { extra.next() } else { None };
            let extras = AttnExtras {
                key_prime,
                value_prime,
                gate: gate.map(|g| t.activation(g, Activation::Sigmoid)),
                sigmoid_bias: -1.0,
            };
            Ok(attend(t, kind, x[0], x[1], x[2], &extras)?.out)
        });
    }
}

/// End-to-end loss gradient of a tiny model against central differences
/// of the loss itself, for both block styles.
#[test]
fn model_loss_gradients() {
    use olab_core::model::{MlpKind, NormKind};
    for (kind, norm, mlp) in [
        (VariantKind::Default, NormKind::LayerNorm, MlpKind::GeluMlp),
        (VariantKind::AttnBias, NormKind::LayerNorm, MlpKind::GeluMlp),
        (VariantKind::CtxScaling, NormKind::RmsNorm, MlpKind::SiluGlu),
        (VariantKind::Sigmoid, NormKind::LayerNorm, MlpKind::GeluMlp),
    ] {
        let cfg = TransformerConfig {
            n_layer: 1,
            n_head: 2,
            d_model: 4,
            d_ff: 6,
            vocab_size: 5,
            block_size: 4,
            norm,
            mlp,
            variant: kind,
            seed: 11,
            ..Default::default()
        };
        let mut model = Model::<f64>::init(cfg).unwrap();
        // Larger weights than the init so every path carries signal.
        let mut rng = Rng::new(5);
        for p in model.params_mut() {
            for w in p.tensor.data_mut() {
                *w += rng.normal(0.0, 0.3);
            }
        }
        let (x, y) = ([1usize, 2, 3, 4, 0, 1], [2usize, 3, 4, 0, 1, 2]);
        let (_, grads) = model.loss_and_grads(&x, &y, 2).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..model.params().len() {
            for j in 0..model.params()[i].tensor.numel() {
                let w0 = model.params()[i].tensor.data()[j];
                let mut at = |dx: f64| {
                    model.params_mut()[i].tensor.data_mut()[j] = w0 + dx;
                    model.loss(&x, &y, 2).unwrap()
                };
                let (plus, minus) = (at(ATTN_H), at(-ATTN_H));
                model.params_mut()[i].tensor.data_mut()[j] = w0;
                let numeric = (plus - minus) / (2.0 * ATTN_H);
                let analytic = grads[i][j];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < ATTN_TOL, "{kind}: relative error {worst}");
    }
}
