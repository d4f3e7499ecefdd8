//! End-to-end tests of the command-line interface: flags, files, exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_m2ost"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("m2ost-cli-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small dataset: 6 slides x 10 spots; seed 7 populates train and val.
fn synth_small(dir: &Path, noise: &str) -> PathBuf {
    let ds = dir.join("data.m2od");
    run_ok(bin().args([
        "synth",
        "--out",
        ds.to_str().unwrap(),
        "--slides",
        "6",
        "--spots",
        "10",
        "--genes",
        "8",
        "--noise",
        noise,
        "--seed",
        "5",
    ]));
    ds
}

const SMALL_MODEL: &[&str] = &[
    "--p", "8", "--channels", "16", "--depth", "1", "--heads", "2", "--batch-size", "8",
    "--max-steps", "20", "--eval-every", "10", "--seed", "7", "--threads", "1",
];

#[test]
fn help_lists_every_flag_with_defaults() {
    let out = run_ok(bin().args(["train", "--help"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config", "--seed", "--threads", "--p", "--channels", "--depth", "--heads", "--genes",
        "--levels", "--mask-prob", "--se-ratio", "--head-mode", "--use-dpe", "--decoupled-itmm",
        "--cross-mix", "--use-ccmm", "--lr", "--batch-size", "--epochs", "--max-steps",
        "--missing-fraction", "--eval-every", "--precision", "--dataset", "--out-dir",
    ] {
        assert!(text.contains(flag), "train --help lacks {flag}");
    }
    // Defaults are documented inline.
    for snippet in ["default: 16", "default: 192", "default: 4", "default: 3", "default: 250"] {
        assert!(text.contains(snippet), "train --help lacks `{snippet}`");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["train", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_idempotent_and_counts_spots() {
    let dir = workdir("synth");
    let a = synth_small(&dir, "0.1");
    let first = std::fs::read(&a).unwrap();
    let b = synth_small(&dir, "0.1");
    let second = std::fs::read(&b).unwrap();
    assert_eq!(first, second, "same seed must give identical dataset bytes");

    let out = run_ok(bin().args([
        "synth",
        "--out",
        dir.join("count.m2od").to_str().unwrap(),
        "--slides",
        "1",
        "--spots",
        "100",
        "--genes",
        "4",
        "--seed",
        "3",
    ]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("wrote 100 samples"), "{text}");
    assert!(text.contains("oracle pcc ceilings"), "{text}");
}

#[test]
fn synth_to_unwritable_path_exits_2() {
    let out = bin()
        .args(["synth", "--out", "/nonexistent-dir/x.m2od", "--slides", "1", "--spots", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_banner_echoes_model_defaults() {
    // Default flags echo p=16 channels=192 depth=4 heads=3 genes=250; genes
    // follow the dataset, so give the dataset 250 genes. One step only.
    let dir = workdir("banner");
    let ds = dir.join("data.m2od");
    run_ok(bin().args([
        "synth", "--out", ds.to_str().unwrap(), "--slides", "4", "--spots", "3", "--genes",
        "250", "--seed", "5",
    ]));
    let out = run_ok(bin().args([
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out-dir",
        dir.join("run").to_str().unwrap(),
        "--batch-size",
        "4",
        "--max-steps",
        "1",
        "--eval-every",
        "1",
        "--seed",
        "1",
    ]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("p=16 channels=192 depth=4 heads=3 genes=250"),
        "banner missing defaults: {text}"
    );
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = workdir("zerolr");
    let ds = synth_small(&dir, "0.1");
    let run = dir.join("run");
    run_ok(
        bin()
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run.to_str().unwrap()])
            .args(SMALL_MODEL)
            .args(["--lr", "0"]),
    );
    let loaded = m2ost::checkpoint::load(&run.join("model.m2o1"), 7).unwrap();
    let config = m2ost::runconfig::resolve(
        Some(&run.join("model.m2o1.config")),
        &m2ost::runconfig::Overrides::default(),
    )
    .unwrap();
    let initial = m2ost_core::encoder::init_parameters(&config.model, 7).unwrap();
    assert_eq!(loaded.len(), initial.len());
    for ((ln, lp), (inm, ip)) in loaded.iter().zip(initial.iter()) {
        assert_eq!(ln, inm);
        for (a, b) in lp.values.iter().zip(&ip.values) {
            // Checkpoints hold 32-bit values.
            assert_eq!(*a, *b as f32 as f64, "{ln} drifted with lr=0");
        }
    }
}

#[test]
fn train_log_has_documented_header() {
    let dir = workdir("log");
    let ds = synth_small(&dir, "0.1");
    let run = dir.join("run");
    run_ok(
        bin()
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run.to_str().unwrap()])
            .args(SMALL_MODEL),
    );
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,train_mse,val_pcc,val_rmse\n"), "{log}");
    assert!(log.lines().count() >= 2);
}

#[test]
fn eval_perfect_predictor_on_noise_free_data_scores_one() {
    let dir = workdir("perfect");
    let ds = synth_small(&dir, "0");
    let report = dir.join("report.csv");
    let out = run_ok(bin().args([
        "eval",
        "--dataset",
        ds.to_str().unwrap(),
        "--predictor",
        "perfect",
        "--split",
        "test",
        "--seed",
        "7",
        "--out",
        report.to_str().unwrap(),
    ]));
    let text = String::from_utf8_lossy(&out.stdout);
    let mean: f64 = text
        .split("mean_pcc=")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - 1.0).abs() < 1e-9, "perfect predictor scored {mean}");
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("spot_id,pcc,rmse\n"));
}

#[test]
fn eval_detects_incompatible_checkpoint() {
    let dir = workdir("compat");
    let ds = synth_small(&dir, "0.1");
    let run = dir.join("run");
    run_ok(
        bin()
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run.to_str().unwrap()])
            .args(SMALL_MODEL),
    );
    // Corrupt the sidecar: channels that do not match the checkpoint shapes.
    let sidecar = run.join("model.m2o1.config");
    let edited = std::fs::read_to_string(&sidecar).unwrap().replace("channels=16", "channels=32");
    std::fs::write(&sidecar, edited).unwrap();
    let out = bin()
        .args([
            "eval",
            "--dataset",
            ds.to_str().unwrap(),
            "--checkpoint",
            run.join("model.m2o1").to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            dir.join("r.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn trained_model_evaluates_and_exports_maps() {
    let dir = workdir("export");
    let ds = synth_small(&dir, "0.1");
    let run = dir.join("run");
    run_ok(
        bin()
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run.to_str().unwrap()])
            .args(SMALL_MODEL),
    );
    let ckpt = run.join("model.m2o1");

    // Model-backed evaluation with a per-gene report and two threads.
    let report = dir.join("report.csv");
    let per_gene = dir.join("genes.csv");
    run_ok(bin().args([
        "eval",
        "--dataset",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "val",
        "--seed",
        "7",
        "--threads",
        "2",
        "--out",
        report.to_str().unwrap(),
        "--per-gene-out",
        per_gene.to_str().unwrap(),
    ]));
    assert!(std::fs::read_to_string(&per_gene).unwrap().starts_with("gene,pcc\n"));

    // PCA map of the first slide.
    let prefix = dir.join("map-pca");
    run_ok(bin().args([
        "export",
        "--dataset",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mode",
        "pca1",
        "--out-prefix",
        prefix.to_str().unwrap(),
    ]));
    let pgm = std::fs::read(dir.join("map-pca.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let csv = std::fs::read_to_string(dir.join("map-pca.csv")).unwrap();
    assert!(csv.starts_with("spot_id,x,y,value\n"));
    // All 10 spots of the slide appear.
    assert_eq!(csv.lines().count(), 11);

    // Gene-mode map.
    let gene_prefix = dir.join("map-gene");
    run_ok(bin().args([
        "export",
        "--dataset",
        ds.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mode",
        "gene",
        "--gene",
        "SYN0003",
        "--out-prefix",
        gene_prefix.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read_to_string(dir.join("map-gene.csv")).unwrap().lines().count(), 11);

    // Unknown gene: usage error listing available names.
    let out = bin()
        .args([
            "export",
            "--dataset",
            ds.to_str().unwrap(),
            "--predictor",
            "perfect",
            "--mode",
            "gene",
            "--gene",
            "NOPE",
            "--out-prefix",
            dir.join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SYN0003"));
}

#[test]
fn exploding_training_aborts_with_numeric_exit_code() {
    // An absurd learning rate overflows the forward pass within a few steps;
    // the abort names the offending step and batch and exits 3.
    let dir = workdir("nan");
    let ds = synth_small(&dir, "0.1");
    let out = bin()
        .args([
            "train",
            "--dataset",
            ds.to_str().unwrap(),
            "--out-dir",
            dir.join("run").to_str().unwrap(),
            "--lr",
            "1e12",
        ])
        .args(SMALL_MODEL)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step") && err.contains("batch"), "no batch diagnostic: {err}");
}

#[test]
fn gradcheck_primitives_pass_quickly() {
    let out = run_ok(bin().args(["gradcheck", "--scope", "primitives"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS softmax_rows"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn ablate_writes_seven_level_rows() {
    let dir = workdir("ablate");
    let ds = synth_small(&dir, "0.1");
    let table = dir.join("table.csv");
    run_ok(
        bin()
            .args([
                "ablate",
                "--dataset",
                ds.to_str().unwrap(),
                "--out",
                table.to_str().unwrap(),
                "--grid",
                "levels",
            ])
            .args(["--p", "8", "--channels", "16", "--depth", "1", "--heads", "2"])
            .args(["--batch-size", "8", "--max-steps", "1", "--eval-every", "1"])
            .args(["--seed", "7", "--threads", "1", "--lr", "0.001"]),
    );
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("label,dpe,decoupled_itmm,cross_mix,ccmm,levels,pcc,rmse,params,macs\n"));
    assert_eq!(csv.lines().count(), 8, "{csv}");
}

#[test]
fn env_seed_overrides_default_but_not_flags() {
    let dir = workdir("envseed");
    let ds = synth_small(&dir, "0.1");
    let run_env = dir.join("env");
    let out = run_ok(
        bin()
            .env("M2OST_SEED", "14")
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run_env.to_str().unwrap()])
            .args(["--p", "8", "--channels", "16", "--depth", "1", "--heads", "2"])
            .args(["--batch-size", "8", "--max-steps", "1", "--eval-every", "1", "--threads", "1"]),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=14"));

    let run_flag = dir.join("flag");
    let out = run_ok(
        bin()
            .env("M2OST_SEED", "14")
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run_flag.to_str().unwrap()])
            .args(SMALL_MODEL),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=7"));
}

#[test]
fn config_file_feeds_defaults_and_rejects_unknown_keys() {
    let dir = workdir("conffile");
    let ds = synth_small(&dir, "0.1");
    let conf = dir.join("run.conf");
    std::fs::write(&conf, "p=8\nchannels=16\ndepth=1\nheads=2\nbatch_size=8\nmax_steps=1\neval_every=1\nseed=7\n").unwrap();
    let out = run_ok(bin().args([
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out-dir",
        dir.join("run").to_str().unwrap(),
        "--config",
        conf.to_str().unwrap(),
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("channels=16"));

    std::fs::write(&conf, "never_heard_of_it=1\n").unwrap();
    let out = bin()
        .args([
            "train",
            "--dataset",
            ds.to_str().unwrap(),
            "--out-dir",
            dir.join("run2").to_str().unwrap(),
            "--config",
            conf.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_fraction_requires_average_head() {
    let dir = workdir("missing");
    let ds = synth_small(&dir, "0.1");
    let out = bin()
        .args([
            "train",
            "--dataset",
            ds.to_str().unwrap(),
            "--out-dir",
            dir.join("run").to_str().unwrap(),
            "--missing-fraction",
            "0.5",
        ])
        .args(SMALL_MODEL)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    run_ok(
        bin()
            .args([
                "train",
                "--dataset",
                ds.to_str().unwrap(),
                "--out-dir",
                dir.join("run-ok").to_str().unwrap(),
                "--missing-fraction",
                "0.5",
                "--head-mode",
                "per-level-average",
            ])
            .args(SMALL_MODEL),
    );
}

#[test]
fn gene_list_restricts_training_targets() {
    let dir = workdir("genelist");
    let ds = synth_small(&dir, "0.1");
    let list = dir.join("genes.txt");
    std::fs::write(&list, "# chosen targets\nSYN0005\nSYN0001\nSYN0002\n").unwrap();
    let run = dir.join("run");
    let out = run_ok(
        bin()
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run.to_str().unwrap()])
            .args(["--gene-list", list.to_str().unwrap()])
            .args(SMALL_MODEL),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("genes=3"));
    // The trained head regresses exactly the three listed genes.
    let loaded = m2ost::checkpoint::load(&run.join("model.m2o1"), 7).unwrap();
    assert_eq!(loaded.get("shared.head.bias").unwrap().shape, vec![3]);

    // Evaluating against the same restriction works; omitting it is a
    // compatibility error (8 genes vs a 3-gene head).
    run_ok(bin().args([
        "eval",
        "--dataset",
        ds.to_str().unwrap(),
        "--checkpoint",
        run.join("model.m2o1").to_str().unwrap(),
        "--gene-list",
        list.to_str().unwrap(),
        "--split",
        "val",
        "--seed",
        "7",
        "--out",
        dir.join("r.csv").to_str().unwrap(),
    ]));
    let out = bin()
        .args([
            "eval",
            "--dataset",
            ds.to_str().unwrap(),
            "--checkpoint",
            run.join("model.m2o1").to_str().unwrap(),
            "--split",
            "val",
            "--seed",
            "7",
            "--out",
            dir.join("r2.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_results_are_identical_for_any_thread_count() {
    let dir = workdir("threads");
    let ds = synth_small(&dir, "0.1");
    let run = dir.join("run");
    run_ok(
        bin()
            .args(["train", "--dataset", ds.to_str().unwrap(), "--out-dir", run.to_str().unwrap()])
            .args(SMALL_MODEL),
    );
    let report = |threads: &str, out: &str| {
        run_ok(bin().args([
            "eval",
            "--dataset",
            ds.to_str().unwrap(),
            "--checkpoint",
            run.join("model.m2o1").to_str().unwrap(),
            "--split",
            "val",
            "--seed",
            "7",
            "--threads",
            threads,
            "--out",
            dir.join(out).to_str().unwrap(),
        ]));
        std::fs::read(dir.join(out)).unwrap()
    };
    let single = report("1", "t1.csv");
    let quad = report("4", "t4.csv");
    assert_eq!(single, quad, "worker count changed evaluation bytes");
}
