use std::collections::BTreeSet;

use olab_core::attention::{attend, AttnExtras};
use olab_core::compress::{prune_magnitude, quantize_absmax_w8};
use olab_core::data::{decode_token_file, encode_token_file};
use olab_core::dynamics::saturation_weight;
use olab_core::outliers::{
    detect_activation_outliers, detect_attention_outliers, detect_weight_outliers, extremal_ratio, overlap, Hit,
};
use olab_core::{Mask, Tape, Tensor, TensorId, VariantKind};
use proptest::prelude::*;

/// A `rows × cols` matrix of small values with a few planted large ones.
fn planted_matrix(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(r, c)| {
        let n = r * c;
        (
            Just(r),
            Just(c),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec((0..n, 10.0f64..5000.0, any::<bool>()), 0..6),
        )
            .prop_map(|(r, c, mut xs, plants)| {
                for (i, mag, neg) in plants {
                    xs[i] = if neg { -mag } else { mag };
                }
                (r, c, xs)
            })
    })
}

fn positions(hits: &[Hit]) -> Vec<(usize, usize)> {
    hits.iter().map(|h| (h.row, h.col)).collect()
}

/// Rescans every entry against a threshold computed from scratch.
fn brute_activation(r: usize, c: usize, xs: &[f64], tau: f64) -> Vec<(usize, usize)> {
    let mut total = 0.0;
    for x in xs {
        total += x.abs();
    }
    let mu = total / xs.len() as f64;
    let mut out = Vec::new();
    for i in 0..r {
        for j in 0..c {
            if xs[i * c + j].abs() > tau * mu {
                out.push((i, j));
            }
        }
    }
    out
}

fn brute_weight(r: usize, c: usize, xs: &[f64], tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..r {
        let mut total = 0.0;
        for j in 0..c {
            total += xs[i * c + j].abs();
        }
        let mu = total / c as f64;
        for j in 0..c {
            if xs[i * c + j].abs() > tau * mu {
                out.push((i, j));
            }
        }
    }
    out
}

fn stochastic_rows(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_side, 1..=max_side, 0usize..64).prop_flat_map(|(l, n, sink)| {
        prop::collection::vec(0.0f64..1.0, l * n).prop_map(move |mut w| {
            let sink = sink % n;
            for row in w.chunks_mut(n) {
                row[sink] += 3.0;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            (l, n, w)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn activation_detector_matches_rescan((r, c, xs) in planted_matrix(64), tau in 1.5f64..50.0) {
        let t = Tensor::new([r, c], xs.clone()).unwrap();
        let hits = detect_activation_outliers(&t, tau).unwrap();
        prop_assert_eq!(positions(&hits), brute_activation(r, c, &xs, tau));
        for h in &hits {
            prop_assert_eq!(h.value, xs[h.row * c + h.col]);
        }
    }

    #[test]
    fn weight_detector_matches_rescan((r, c, xs) in planted_matrix(64), tau in 1.5f64..50.0) {
        let t = Tensor::new([r, c], xs.clone()).unwrap();
        let hits = detect_weight_outliers(&t, tau).unwrap();
        prop_assert_eq!(positions(&hits), brute_weight(r, c, &xs, tau));
    }

    #[test]
    fn attention_detector_matches_rescan((l, n, w) in stochastic_rows(64), frac in 0.05f64..2.0) {
        let a = Tensor::new([l, n], w.clone()).unwrap();
        let tau_attn = frac * l as f64;
        let got = detect_attention_outliers(&a, tau_attn);
        let mut scores = vec![0.0; n];
        for i in 0..l {
            for (j, s) in scores.iter_mut().enumerate() {
                *s += w[i * n + j];
            }
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        let keys: Vec<usize> = (0..n).filter(|&j| scores[j] > tau_attn * mean).collect();
        prop_assert_eq!(&got.scores, &scores);
        prop_assert_eq!(got.keys, keys);
    }

    #[test]
    fn activation_outliers_are_scale_covariant((r, c, xs) in planted_matrix(32), k in -10i32..10, tau in 1.5f64..50.0) {
        let scale = 2f64.powi(k);
        let t = Tensor::new([r, c], xs.clone()).unwrap();
        let s = Tensor::new([r, c], xs.iter().map(|x| x * scale).collect()).unwrap();
        let a = detect_activation_outliers(&t, tau).unwrap();
        let b = detect_activation_outliers(&s, tau).unwrap();
        prop_assert_eq!(positions(&a), positions(&b));
    }

    #[test]
    fn extremal_ratio_is_scale_invariant((r, c, xs) in planted_matrix(16), scale in 0.01f64..100.0) {
        prop_assume!(r >= 2);
        let w = Tensor::new([r, c], xs.clone()).unwrap();
        let s = Tensor::new([r, c], xs.iter().map(|x| x * scale).collect()).unwrap();
        let (a, b) = (extremal_ratio(&w).unwrap(), extremal_ratio(&s).unwrap());
        for (x, y) in a.per_column.iter().zip(&b.per_column) {
            if x.is_finite() {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs());
            } else {
                prop_assert_eq!(x.is_nan(), y.is_nan());
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, xs in prop::collection::vec(-1e4f32..1e4, 72), causal in any::<bool>()) {
        let cols = if causal { rows } else { cols };
        let data: Vec<f32> = xs.iter().cycle().take(rows * cols).copied().collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([rows, cols], data).unwrap());
        let mask = Mask::causal(rows);
        let y = tape.softmax_lastdim(x, causal.then_some(&mask)).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row {} sums to {}", r, s);
            if causal {
                prop_assert!(row[r + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(xs in prop::collection::vec(-10.0f64..10.0, 1..400)) {
        let qz = quantize_absmax_w8(&xs);
        let back: Vec<f64> = qz.dequantize();
        for (w, d) in xs.iter().zip(&back) {
            prop_assert!((w - d).abs() <= qz.scale / 2.0, "{} -> {} with scale {}", w, d, qz.scale);
        }
        prop_assert!(qz.q.iter().all(|&q| (-127..=127).contains(&q)));
    }

    #[test]
    fn pruning_matches_a_sort(xs in prop::collection::vec(prop_oneof![-1.0f64..1.0, Just(0.25), Just(-0.25)], 0..300)) {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        // Stable sort: ties keep index order.
        order.sort_by(|&a, &b| xs[a].abs().partial_cmp(&xs[b].abs()).unwrap());
        let k = xs.len() / 2;
        let mut expect = xs.clone();
        for &i in &order[..k] {
            expect[i] = 0.0;
        }
        let mut got = xs.clone();
        prop_assert_eq!(prune_magnitude(&mut got, 0.5).unwrap(), k);
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn saturation_agrees_with_softmax(m in 0.0f64..30.0, n in 2usize..2048) {
        let p = saturation_weight(m, n).unwrap();
        let logits: Vec<f64> = std::iter::once(m).chain(std::iter::repeat_n(0.0, n - 1)).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - top).exp()).sum();
        prop_assert!((p.a_star - (m - top).exp() / z).abs() <= 1e-12);
        prop_assert!((p.a_other - (-top).exp() / z).abs() <= 1e-12);
        prop_assert!((p.a_star + (n - 1) as f64 * p.a_other - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn token_files_round_trip(vocab in 1usize..=65_535, raw in prop::collection::vec(any::<u16>(), 0..500)) {
        let tokens: Vec<u16> = raw.iter().map(|t| (*t as usize % vocab) as u16).collect();
        let bytes = encode_token_file(vocab, &tokens);
        prop_assert_eq!(decode_token_file(&bytes).unwrap(), (vocab, tokens));
    }

    #[test]
    fn overlap_bounds(a in prop::collection::btree_set(0usize..40, 0..20), b in prop::collection::btree_set(0usize..40, 0..20)) {
        match overlap(&a, &b) {
            None => prop_assert!(a.is_empty()),
            Some(o) => {
                prop_assert!((0.0..=1.0).contains(&o));
                let inter = a.intersection(&b).count() as f64;
                prop_assert_eq!(o, inter / a.len() as f64);
            }
        }
        let same: BTreeSet<usize> = a.clone();
        if !a.is_empty() {
            prop_assert_eq!(overlap(&a, &same), Some(1.0));
        }
    }
}

#[derive(Clone, Debug)]
struct Inputs {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    kp: Vec<f32>,
    vp: Vec<f32>,
}

const H: usize = 2;
const T: usize = 6;
const D: usize = 4;

fn inputs() -> impl Strategy<Value = Inputs> {
    let n = H * T * D;
    (
        prop::collection::vec(-2.0f32..2.0, n),
        prop::collection::vec(-2.0f32..2.0, n),
        prop::collection::vec(-2.0f32..2.0, n),
        prop::collection::vec(-1.0f32..1.0, H * D),
        prop::collection::vec(-1.0f32..1.0, H * D),
    )
        .prop_map(|(q, k, v, kp, vp)| Inputs { q, k, v, kp, vp })
}

struct Leaves {
    q: TensorId,
    k: TensorId,
    v: TensorId,
}

fn leaves(tape: &mut Tape<f32>, x: &Inputs) -> Leaves {
    let shape = [1, H, T, D];
    Leaves {
        q: tape.constant(Tensor::new(shape, x.q.clone()).unwrap()),
        k: tape.constant(Tensor::new(shape, x.k.clone()).unwrap()),
        v: tape.constant(Tensor::new(shape, x.v.clone()).unwrap()),
    }
}

fn run(kind: VariantKind, x: &Inputs, kp: &[f32], vp: &[f32], gate: Option<f32>) -> (Vec<f32>, Tensor<f32>) {
    let mut tape = Tape::new();
    let l = leaves(&mut tape, x);
    let extras = AttnExtras {
        key_prime: Some(tape.constant(Tensor::new([H, D], kp.to_vec()).unwrap())),
        value_prime: Some(tape.constant(Tensor::new([H, D], vp.to_vec()).unwrap())),
        gate: gate.map(|g| tape.constant(Tensor::full([1, H, T, 1], g))),
        sigmoid_bias: -1.0,
    };
    let r = attend(&mut tape, kind, l.q, l.k, l.v, &extras).unwrap();
    (tape.value(r.out).data().to_vec(), tape.value(r.weights).clone())
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variants_reduce_to_default(mut x in inputs()) {
        let zeros = vec![0.0f32; H * D];
        let (base, _) = run(VariantKind::Default, &x, &x.kp, &zeros, None);
        let (b, _) = run(VariantKind::FixedBias, &x, &x.kp, &zeros, None);
        let (c, _) = run(VariantKind::CtxBias, &x, &x.kp, &zeros, None);
        let (e, _) = run(VariantKind::CtxScaling, &x, &x.kp, &x.vp, Some(1.0));
        prop_assert!(max_diff(&base, &b) <= 1e-6);
        prop_assert!(max_diff(&base, &c) <= 1e-6);
        prop_assert!(max_diff(&base, &e) <= 1e-6);

        // Make every query's score against k′ hugely negative.
        for row in x.q.chunks_mut(D) {
            row[0] = 0.5 + row[0].abs();
        }
        let (base, _) = run(VariantKind::Default, &x, &x.kp, &zeros, None);
        let mut far = vec![0.0f32; H * D];
        for h in 0..H {
            far[h * D] = -1e6;
        }
        let (d, w) = run(VariantKind::AttnBias, &x, &far, &x.vp, None);
        prop_assert!(max_diff(&base, &d) <= 1e-6);
        for r in 0..w.rows() {
            let row = w.row(r);
            prop_assert_eq!(row.len(), T + 1);
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn sigmoid_weights_lie_strictly_inside_the_unit_interval(x in inputs()) {
        let (_, w) = run(VariantKind::Sigmoid, &x, &x.kp, &x.vp, None);
        for r in 0..w.rows() {
            let i = r % T;
            for (j, &a) in w.row(r).iter().enumerate() {
                if j <= i {
                    prop_assert!(a > 0.0 && a < 1.0, "weight {}", a);
                } else {
                    prop_assert_eq!(a, 0.0);
                }
            }
        }
    }

    #[test]
    fn future_values_never_leak(x in inputs(), cut in 0usize..T - 1, noise in -5.0f32..5.0) {
        for kind in VariantKind::ALL {
            let (before, _) = run(kind, &x, &x.kp, &x.vp, Some(0.7));
            let mut y = x.clone();
            for h in 0..H {
                for t in cut + 1..T {
                    for d in 0..D {
                        y.v[(h * T + t) * D + d] += noise + 1.0;
                    }
                }
            }
            let (after, _) = run(kind, &y, &y.kp, &y.vp, Some(0.7));
            for h in 0..H {
                for t in 0..=cut {
                    let o = (h * T + t) * D;
                    prop_assert_eq!(&before[o..o + D], &after[o..o + D], "{} head {} row {}", kind, h, t);
                }
            }
        }
    }
}
