use std::fs;
use std::path::{Path, PathBuf};

use olab_cli::{main_with_args, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, EXIT_USAGE};
use olab_core::data::{decode_token_file, load_dataset};

fn olab(args: &[&str]) -> u8 {
    main_with_args(std::iter::once("olab").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(Result::unwrap).collect()
}

const TINY: &str = r#"{
  "model": {"n_layer": 2, "n_head": 2, "d_model": 32, "d_ff": 64},
  "train": {"max_iters": 40, "batch_size": 4, "block_size": 32, "warmup_iters": 5,
            "eval_interval": 20, "eval_windows": 4, "lr_max": 0.003},
  "analysis": {"probes": 6, "tau": 5.0},
  "compression": {"eval_windows": 4}
}"#;

/// A corpus, its token file and a tiny config in `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let text = dir.join("corpus.txt");
    let tok = dir.join("corpus.otok");
    assert_eq!(olab(&["make-corpus", "--out", s(&text), "--bytes", "40000"]), EXIT_OK);
    assert_eq!(olab(&["prepare-data", "--input", s(&text), "--out", s(&tok)]), EXIT_OK);
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    (tok, cfg)
}

#[test]
fn prepare_data_tokenizes_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("abc.txt");
    fs::write(&input, "abc").unwrap();
    let out = dir.path().join("abc.otok");
    assert_eq!(olab(&["prepare-data", "--input", s(&input), "--out", s(&out)]), EXIT_OK);
    let bytes = fs::read(&out).unwrap();
    let (vocab, tokens) = decode_token_file(&bytes).unwrap();
    assert_eq!((vocab, tokens.clone()), (256, vec![97, 98, 99]));
    assert_eq!(bytes.len(), 20 + 2 * tokens.len());
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.vocab.decode(&tokens), b"abc");

    let missing = dir.path().join("nope.txt");
    assert_eq!(olab(&["prepare-data", "--input", s(&missing), "--out", s(&out)]), EXIT_IO);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(olab(&["train", "--variant", "wavelet"]), EXIT_USAGE);
    assert_eq!(olab(&["compare-variants", "--variants", "default"]), EXIT_USAGE);
    assert_eq!(olab(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(olab(&["--help"]), EXIT_OK);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"n_layers": 3}}"#).unwrap();
    assert_eq!(olab(&["train", "--config", s(&cfg), "--data", "x.otok"]), EXIT_USAGE);
    let missing = dir.path().join("missing.bin");
    assert_eq!(olab(&["analyze", "--ckpt", s(&missing), "--data", "x.otok"]), EXIT_IO);
}

#[test]
fn dynrange_emits_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    assert_eq!(olab(&["dynrange", "--out", s(&out)]), EXIT_OK);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 31 * 3);
    for r in &rows {
        let m: f64 = r[0].parse().unwrap();
        let ratio: f64 = r[4].parse().unwrap();
        assert!((ratio / m.exp() - 1.0).abs() < 1e-9, "M={m}: {ratio}");
    }
    assert!(out.with_extension("json").exists());
    assert_eq!(olab(&["dynrange", "--out", s(&out), "--n-grid", "1"]), EXIT_USAGE);
}

#[test]
fn divergence_exits_2_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (tok, _) = fixture(dir.path());
    let cfg = dir.path().join("hot.json");
    fs::write(
        &cfg,
        r#"{"model": {"n_layer": 1, "n_head": 2, "d_model": 16, "d_ff": 32},
            "train": {"max_iters": 200, "batch_size": 2, "block_size": 16, "warmup_iters": 1,
                      "eval_interval": 1, "eval_windows": 2, "lr_max": 1e30, "lr_min": 1e29,
                      "weight_decay": 0.0}}"#,
    )
    .unwrap();
    let out = dir.path().join("runs");
    assert_eq!(olab(&["train", "--config", s(&cfg), "--data", s(&tok), "--out", s(&out)]), EXIT_DIVERGENCE);
    assert!(out.join("default/ckpt.bin").exists());
    assert!(out.join("default/loss.csv").exists());
}

#[test]
fn train_analyze_overlap_compress_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (tok, cfg) = fixture(dir.path());
    let out = dir.path().join("runs");
    let train = |variant: &str| olab(&["train", "--config", s(&cfg), "--data", s(&tok), "--out", s(&out), "--variant", variant]);
    assert_eq!(train("default"), EXIT_OK);
    assert_eq!(train("e"), EXIT_OK);
    let ckpt = out.join("default/ckpt.bin");
    assert!(out.join("ctx_scaling/ckpt.bin").exists());
    let loss = csv_rows(&out.join("default/loss.csv"));
    assert_eq!(loss.iter().filter(|r| &r[1] == "train").count(), 40);

    let an = dir.path().join("an");
    assert_eq!(olab(&["analyze", "--ckpt", s(&ckpt), "--data", s(&tok), "--out", s(&an)]), EXIT_OK);
    for stem in [
        "activation_outliers",
        "weight_outliers",
        "attention_outliers",
        "topk",
        "extremal_ratio",
        "head_stats",
        "token_categories",
    ] {
        assert!(an.join(format!("{stem}.csv")).exists(), "{stem}");
        assert!(an.join(format!("{stem}.json")).exists(), "{stem}");
    }
    assert_eq!(csv_rows(&an.join("head_stats.csv")).len(), 2 * 2);
    let first: Vec<Vec<u8>> = fs::read_dir(&an).unwrap().map(|e| fs::read(e.unwrap().path()).unwrap()).collect();
    assert_eq!(olab(&["analyze", "--ckpt", s(&ckpt), "--data", s(&tok), "--out", s(&an)]), EXIT_OK);
    let second: Vec<Vec<u8>> = fs::read_dir(&an).unwrap().map(|e| fs::read(e.unwrap().path()).unwrap()).collect();
    assert_eq!(first, second);

    // A low threshold so that the tiny model has activation outliers.
    let ov = dir.path().join("ov");
    let code = olab(&["overlap", "--ckpt", s(&ckpt), "--data", s(&tok), "--out", s(&ov), "--tau", "1.2"]);
    assert_eq!(code, EXIT_OK);
    let cells = csv_rows(&ov.join("overlap.csv"));
    assert_eq!(cells.len(), 6 * 2 * 2);
    let used: Vec<f64> = cells.iter().filter(|r| !r[5].is_empty()).map(|r| r[5].parse().unwrap()).collect();
    let summary = csv_rows(&ov.join("overlap_summary.csv"));
    let overall: f64 = summary[0][0].parse().unwrap();
    assert!((overall - used.iter().sum::<f64>() / used.len() as f64).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&overall));

    let ce = dir.path().join("ce");
    let noop = ["compress-eval", "--ckpt", s(&ckpt), "--data", s(&tok), "--out", s(&ce), "--prune", "0", "--no-quant"];
    assert_eq!(olab(&noop), EXIT_OK);
    let row = &csv_rows(&ce.join("compression.csv"))[0];
    assert_eq!((&row[0], &row[1]), ("default-seed1337", "default"));
    assert_eq!(&row[2], &row[3]);
    assert_eq!(&row[2], &row[4]);
    let global = ["compress-eval", "--ckpt", s(&ckpt), "--data", s(&tok), "--out", s(&ce), "--prune-mode", "global"];
    assert_eq!(olab(&global), EXIT_OK);
    let row = &csv_rows(&ce.join("compression.csv"))[0];
    let sparsity: f64 = row[6].parse().unwrap();
    assert!((sparsity - 0.5).abs() < 1e-3, "{sparsity}");

    let lc = dir.path().join("lc");
    assert_eq!(olab(&["lifecycle", "--ckpt", s(&ckpt), "--data", s(&tok), "--out", s(&lc), "--sample", "2"]), EXIT_OK);
    assert!(lc.join("layer_0.json").exists() && lc.join("layer_1.json").exists());
    assert!(lc.join("lifecycle.csv").exists());
}

#[test]
fn compare_variants_merges_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    let (tok, cfg) = fixture(dir.path());
    let out = dir.path().join("cmp");
    let args = [
        "compare-variants",
        "--config",
        s(&cfg),
        "--data",
        s(&tok),
        "--out",
        s(&out),
        "--variants",
        "e,a",
        "--seeds",
        "2,1,2",
        "--early-window",
        "5,30",
    ];
    assert_eq!(olab(&args), EXIT_OK);
    let verdict = csv_rows(&out.join("verdict.csv"));
    let keys: Vec<(String, String)> = verdict.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect();
    let expect = [("default", "1"), ("default", "2"), ("ctx_scaling", "1"), ("ctx_scaling", "2")];
    assert_eq!(keys, expect.map(|(a, b)| (a.to_string(), b.to_string())));
    assert!(verdict.iter().all(|r| &r[2] == "ok" && !r[4].is_empty()));
    let merged = csv_rows(&out.join("loss_merged.csv"));
    assert_eq!(merged.iter().filter(|r| &r[3] == "train").count(), 4 * 40);
    assert_eq!(csv_rows(&out.join("topk_by_layer.csv")).len(), 4 * 2 * 2);
    assert_eq!(csv_rows(&out.join("verdict_summary.csv")).len(), 2);
    assert_eq!(csv_rows(&out.join("compression.csv")).len(), 4);
    assert!(out.join("default/seed1/ckpt.bin").exists());
}
