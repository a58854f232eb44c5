use olab_core::checkpoint;
use olab_core::corpus::synthetic_text;
use olab_core::data::{Dataset, Vocab};
use olab_core::model::param_count_for;
use olab_core::train::{eval_loss, perplexity, train_run};
use olab_core::{Activation, MlpKind, Model, NormKind, RunConfig, Tape, Tensor, TransformerConfig, VariantKind};

fn tiny(variant: VariantKind) -> TransformerConfig {
    TransformerConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 256,
        block_size: 32,
        variant,
        seed: 3,
        ..Default::default()
    }
}

fn corpus() -> Dataset {
    let text = synthetic_text(0, 60_000);
    Dataset::from_tokens(Vocab::Bytes.encode(&text), Vocab::Bytes)
}

fn tokens(n: usize) -> Vec<usize> {
    synthetic_text(1, 4 * n).bytes().take(n).map(usize::from).collect()
}

#[test]
fn desk_parameter_count_matches_closed_form() {
    let cfg = TransformerConfig {
        vocab_size: 512,
        ..Default::default()
    };
    // wte + wpe + 4 layers of (two LayerNorms, four biased projections,
    // biased up/down MLP) + final LayerNorm, counted independently.
    assert_eq!(param_count_for(&cfg), 3_356_160);
    let scaled = TransformerConfig {
        variant: VariantKind::CtxScaling,
        ..cfg.clone()
    };
    assert_eq!(param_count_for(&scaled) - param_count_for(&cfg), 4 * 4 * (256 + 1));
    assert_eq!(Model::<f32>::init(cfg.clone()).unwrap().param_count(), param_count_for(&cfg));
}

#[test]
fn logits_are_causal_for_every_variant() {
    for kind in VariantKind::ALL {
        let model = Model::<f64>::init(tiny(kind)).unwrap();
        let x = tokens(12);
        let base = model.forward(&x).unwrap();
        for t in [0, 5, 11] {
            let mut y = x.clone();
            y[t] = (y[t] + 17) % 256;
            let other = model.forward(&y).unwrap();
            let v = base.last_dim();
            for pos in 0..12 {
                let same = base.row(pos) == other.row(pos);
                assert_eq!(same, pos < t, "{kind}: token {t} changed={} position {pos}", !same);
            }
            assert_eq!(base.shape(), &[12, v]);
        }
    }
}

#[test]
fn capture_is_transparent_and_complete() {
    for kind in VariantKind::ALL {
        let model = Model::<f32>::init(tiny(kind)).unwrap();
        let x = tokens(16);
        let plain = model.forward(&x).unwrap();
        let (logits, cap) = model.forward_captured(&x).unwrap();
        assert_eq!(plain, logits, "{kind}");
        assert_eq!(model.forward(&x).unwrap(), plain);
        assert_eq!(cap.h.len(), 2);
        assert_eq!(cap.attn.len(), 2);
        for layer in &cap.attn {
            assert_eq!(layer.len(), 2);
            for a in layer {
                for r in 0..a.rows() {
                    let row = a.row(r);
                    if kind.is_row_stochastic() {
                        let s: f64 = row.iter().map(|&w| f64::from(w)).sum();
                        assert!((s - 1.0).abs() < 1e-5, "{kind} row {r} sums to {s}");
                    } else {
                        assert!(row.iter().all(|&w| (0.0..1.0).contains(&w)));
                    }
                }
            }
        }
    }
}

fn recompute_x_down(model: &Model<f64>, layer: usize, h_mid: &Tensor<f64>) -> Tensor<f64> {
    let p = |n: &str| model.param(&format!("h.{layer}.{n}")).unwrap().tensor.clone();
    let mut tape = Tape::new();
    let x = tape.constant(h_mid.clone());
    let g = tape.constant(p("ln_2.weight"));
    let out = match model.config().mlp {
        MlpKind::GeluMlp => {
            let b = tape.constant(p("ln_2.bias"));
            let n = tape.layer_norm(x, g, b, model.config().norm_eps).unwrap();
            let (w, bias) = (tape.constant(p("mlp.up.weight")), tape.constant(p("mlp.up.bias")));
            let u = tape.linear(n, w, Some(bias)).unwrap();
            tape.activation(u, Activation::Gelu)
        }
        MlpKind::SiluGlu => {
            let n = tape.rms_norm(x, g, model.config().norm_eps).unwrap();
            let wg = tape.constant(p("mlp.gate.weight"));
            let wu = tape.constant(p("mlp.up.weight"));
            let gate = tape.linear(n, wg, None).unwrap();
            let gate = tape.activation(gate, Activation::Silu);
            let up = tape.linear(n, wu, None).unwrap();
            tape.mul(gate, up).unwrap()
        }
    };
    tape.value(out).clone()
}

#[test]
fn down_projection_input_is_recomputable_from_captures() {
    for (norm, mlp) in [(NormKind::LayerNorm, MlpKind::GeluMlp), (NormKind::RmsNorm, MlpKind::SiluGlu)] {
        let model = Model::<f64>::init(TransformerConfig {
            norm,
            mlp,
            ..tiny(VariantKind::CtxScaling)
        })
        .unwrap();
        let (_, cap) = model.forward_captured(&tokens(10)).unwrap();
        for l in 0..2 {
            let again = recompute_x_down(&model, l, &cap.h_mid[l]);
            assert_eq!(again.shape(), cap.x_down[l].shape());
            for (a, b) in again.data().iter().zip(cap.x_down[l].data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{mlp:?} layer {l}: {a} vs {b}");
            }
        }
    }
}

fn run_config(variant: VariantKind, iters: usize) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = tiny(variant);
    run.train.max_iters = iters;
    run.train.batch_size = 8;
    run.train.block_size = 32;
    run.train.eval_interval = iters;
    run.train.eval_windows = 8;
    run.train.warmup_iters = run.train.warmup_iters.min(iters / 5);
    run.train.seed = 5;
    run
}

#[test]
fn initial_loss_is_near_uniform_and_runs_repeat() {
    let data = corpus();
    let run = run_config(VariantKind::Default, 10);
    let mut losses = Vec::new();
    for _ in 0..2 {
        let mut model = Model::<f32>::init(run.model.clone()).unwrap();
        let out = train_run(&mut model, &run, &data, None, &mut |_| {}).unwrap();
        let train: Vec<f64> = out.log.split("train").map(|r| r.loss).collect();
        losses.push(train);
    }
    assert_eq!(losses[0], losses[1]);
    let ln_v = 256f64.ln();
    assert!((losses[0][0] - ln_v).abs() < 0.05 * ln_v, "step 0 loss {}", losses[0][0]);
}

#[test]
fn every_variant_learns_in_a_short_run() {
    let data = corpus();
    for kind in VariantKind::ALL {
        let run = run_config(kind, 500);
        let mut model = Model::<f32>::init(run.model.clone()).unwrap();
        let out = train_run(&mut model, &run, &data, None, &mut |_| {}).unwrap();
        assert!(out.log.records.iter().all(|r| r.loss.is_finite()), "{kind}");
        let early = out.log.mean_train_loss(0, 49).unwrap();
        let late = out.log.mean_train_loss(450, 499).unwrap();
        assert!(late <= 0.9 * early, "{kind}: smoothed loss {early} -> {late}");
    }
}

#[test]
fn evaluation_is_deterministic_and_survives_checkpointing() {
    let data = corpus();
    let run = run_config(VariantKind::AttnBias, 20);
    let mut model = Model::<f32>::init(run.model.clone()).unwrap();
    train_run(&mut model, &run, &data, None, &mut |_| {}).unwrap();
    let nll = eval_loss(&model, &data.val, 32, 8).unwrap();
    assert_eq!(nll, eval_loss(&model, &data.val, 32, 8).unwrap());
    assert!((perplexity(nll) - nll.exp()).abs() < 1e-9 * nll.exp());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    checkpoint::save(&path, &model, &run, 20).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 20);
    assert_eq!(eval_loss(&back.model, &data.val, 32, 8).unwrap().to_bits(), nll.to_bits());
}

#[test]
fn untrained_validation_loss_is_near_uniform() {
    let data = corpus();
    let model = Model::<f32>::init(TransformerConfig {
        vocab_size: 512,
        ..tiny(VariantKind::Default)
    })
    .unwrap();
    let nll = eval_loss(&model, &data.val, 32, 16).unwrap();
    assert!((nll - 512f64.ln()).abs() < 0.1 * 512f64.ln(), "{nll}");
}
