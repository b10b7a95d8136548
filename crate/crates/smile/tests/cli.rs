use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use smile::cli::{self, EvalArgs};
use smile::io;
use smile_core::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};
use smile_core::metrics;

fn run(args: &[&str]) -> smile::Result<()> {
    cli::run(std::iter::once("smile").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str) {
    run(&[
        "gen", "--height", "8", "--width", "8", "--channels", "12", "--endmembers", "3", "--snr-db", "30", "--seed",
        seed, "--out", s(dir),
    ])
    .unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_the_scene_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "7");
    gen_small(&b, "7");
    let names: Vec<String> = files(&a).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["abundance.bin", "abundance.hdr", "cube.bin", "cube.hdr", "endmembers.csv", "manifest.json"]);
    assert_eq!(files(&a), files(&b));
    assert_eq!(json(&a.join("manifest.json"))["seed"], 7);

    let cube = io::read_cube(&a.join("cube")).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.channels()), (8, 8, 12));
    let truth = io::read_abundance(&a.join("abundance.hdr")).unwrap();
    for i in 0..truth.pixels() {
        let sum: f64 = truth.pixel(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn dataset2_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    run(&["gen", "--height", "100", "--width", "100", "--endmembers", "4", "--snr-db", "30", "--out", s(tmp.path())])
        .unwrap();
    let cube = io::read_cube(&tmp.path().join("cube.bin")).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.channels()), (100, 100, 224));
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["spec"]["endmembers"], 4);
}

#[test]
fn raster_and_csv_round_trips_are_lossless() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..5 * 4 * 6).map(|_| (rng.random::<f32>() * 3.0) as f64).collect();
    let cube = HsiCube::new(5, 4, 6, data).unwrap();
    io::write_cube(&tmp.path().join("c"), &cube).unwrap();
    assert_eq!(io::read_cube(&tmp.path().join("c")).unwrap(), cube);

    let e: Vec<f64> = (0..3 * 7).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
    let e = EndmemberMatrix::new(3, 7, e).unwrap();
    io::write_endmembers(&tmp.path().join("e.csv"), &e).unwrap();
    assert_eq!(io::read_endmembers(&tmp.path().join("e.csv")).unwrap(), e);
}

#[test]
fn truncated_raster_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cube = HsiCube::new(2, 2, 2, vec![0.5; 8]).unwrap();
    io::write_cube(&tmp.path().join("c"), &cube).unwrap();
    fs::write(tmp.path().join("c.bin"), [0u8; 12]).unwrap();
    assert!(io::read_cube(&tmp.path().join("c")).is_err());
}

fn eval_dirs(pred: &Path, truth: &Path) -> metrics::MetricsReport {
    let args = EvalArgs { pred: Some(pred.into()), truth: Some(truth.into()), ..EvalArgs::default() };
    cli::eval(&args).unwrap()
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "1");
    let m = eval_dirs(tmp.path(), tmp.path());
    assert_eq!(m.rmse, 0.0);
    assert_eq!(m.aad, 0.0);
    assert!(m.sad_mean.abs() < 1e-6);
}

#[test]
fn eval_aligns_shuffled_endmembers() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("truth");
    let pred = tmp.path().join("pred");
    gen_small(&truth, "2");
    let e = io::read_endmembers(&truth.join("endmembers.csv")).unwrap();
    let a = io::read_abundance(&truth.join("abundance")).unwrap();
    let perm = [2, 0, 1];
    io::write_endmembers(&pred.join("endmembers.csv"), &e.permuted(&perm).unwrap()).unwrap();
    io::write_abundance(&pred.join("abundance"), &a.permuted(&perm).unwrap()).unwrap();
    let m = eval_dirs(&pred, &truth);
    assert!(m.sad_mean.abs() < 1e-6, "{}", m.sad_mean);
    assert_eq!(m.rmse, 0.0);
}

#[test]
fn eval_matches_library_metrics_on_random_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut random_pair = |dir: &Path| {
        let e = EndmemberMatrix::new(4, 9, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a: Vec<f64> = (0..6 * 5 * 4).map(|_| rng.random::<f32>() as f64).collect();
        let a = AbundanceMap::new(6, 5, 4, a).unwrap();
        io::write_endmembers(&dir.join("endmembers.csv"), &e).unwrap();
        io::write_abundance(&dir.join("abundance"), &a).unwrap();
        (e, a)
    };
    let (pe, pa) = random_pair(&tmp.path().join("p"));
    let (te, ta) = random_pair(&tmp.path().join("t"));
    let lib = metrics::evaluate(&pe, &pa, &te, &ta, None).unwrap();
    let cli = eval_dirs(&tmp.path().join("p"), &tmp.path().join("t"));
    assert!((lib.rmse - cli.rmse).abs() <= 1e-12);
    assert!((lib.aad - cli.aad).abs() <= 1e-12);
    assert!((lib.sad_mean - cli.sad_mean).abs() <= 1e-12);
    assert_eq!(lib.permutation, cli.permutation);
}

#[test]
fn eval_rejects_shape_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "1");
    run(&["gen", "--height", "8", "--width", "8", "--channels", "12", "--endmembers", "4", "--out", s(&b)]).unwrap();
    let err = cli::eval(&EvalArgs { pred: Some(a), truth: Some(b), ..EvalArgs::default() }).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

fn train_small(data: &Path, out: &Path, mode: &str) {
    run(&["train", "--data", s(data), "--mode", mode, "--iters", "3", "--seed", "5", "--out", s(out)]).unwrap();
}

#[test]
fn train_writes_all_outputs_and_metrics_match_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen_small(&data, "3");
    let out = tmp.path().join("smile");
    train_small(&data, &out, "smile");
    for f in [
        "endmembers.csv", "abundance.hdr", "abundance.bin", "history.csv", "metrics.json", "manifest.json", "hr_cube.hdr",
        "hr_cube.bin", "hr_abundance.hdr", "hr_abundance.bin", "kernel.csv", "abundance_0.pgm", "abundance_2.pgm",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let hr = io::read_cube(&out.join("hr_cube")).unwrap();
    assert_eq!((hr.height(), hr.width(), hr.channels()), (16, 16, 12));
    let k = io::read_kernel(&out.join("kernel.csv")).unwrap();
    assert!((k.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let written = json(&out.join("metrics.json"));
    let report = eval_dirs(&out, &data);
    assert_eq!(written["rmse"].as_f64().unwrap(), report.rmse);
    assert_eq!(written["sad_mean"].as_f64().unwrap(), report.sad_mean);
}

#[test]
fn single_task_drops_the_sr_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen_small(&data, "3");
    let out = tmp.path().join("single");
    train_small(&data, &out, "single_task");
    assert!(out.join("endmembers.csv").exists());
    for f in ["hr_cube.hdr", "hr_abundance.hdr", "kernel.csv"] {
        assert!(!out.join(f).exists(), "{f} present");
    }
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["mode"], "single_task");
    assert!(m["note"].as_str().unwrap().contains("ablation"));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.lines().nth(1).unwrap().split(',').nth(2).unwrap().is_empty());
}

#[test]
fn train_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen_small(&data, "4");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_small(&data, &a, "smile");
    train_small(&data, &b, "smile");
    assert_eq!(files(&a), files(&b));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.json");
    fs::write(&cfg, r#"{"height": 6, "width": 6, "channels": 10, "endmembers": 2, "seed": 9, "snr_db": "inf"}"#).unwrap();
    let out = tmp.path().join("o");
    run(&["gen", "--config", s(&cfg), "--width", "4", "--out", s(&out)]).unwrap();
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["spec"]["height"], 6);
    assert_eq!(m["spec"]["width"], 4);
    assert_eq!(m["spec"]["snr_db"], "inf");
}

#[test]
fn affinity_with_zero_probe_step_has_zero_affinity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen_small(&data, "5");
    let out = tmp.path().join("aff");
    let args = cli::AffinityArgs {
        data: cli::DataArgs { data: Some(data), ..Default::default() },
        model: cli::ModelArgs { iters: Some(4), ..Default::default() },
        eta: Some(0.0),
        samples: Some(2),
        out: Some(out.clone()),
        ..Default::default()
    };
    let summary = cli::affinity(&args).unwrap();
    assert!((0.0..=1.0).contains(&summary.nonconflict_fraction));
    assert_eq!(summary.iterations, 4);
    assert_eq!(summary.samples, 2);
    let csv = fs::read_to_string(out.join("affinity.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.split(',').nth(1).unwrap().parse::<f64>().unwrap(), 0.0);
    }
    assert!(out.join("summary.json").exists());
    assert_eq!(fs::read_to_string(out.join("geometry.csv")).unwrap().lines().count(), 5);
}

#[test]
fn sweep_output_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen_small(&data, "6");
    let sweep = |jobs: &str, out: &PathBuf| {
        run(&[
            "sweep", "--data", s(&data), "--step", "0.5", "--iters", "2", "--mode", "single_task", "--jobs", jobs,
            "--out", s(out),
        ])
        .unwrap();
        fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let one = sweep("1", &tmp.path().join("s1"));
    let three = sweep("3", &tmp.path().join("s3"));
    assert_eq!(one, three);
    assert_eq!(one.lines().count(), 11);
}

fn binary() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_smile"));
    c.env_remove(cli::SEED_ENV);
    c
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen_small(&data, "8");

    let missing_out = binary().args(["gen", "--height", "4"]).output().unwrap();
    assert_eq!(missing_out.status.code(), Some(2));
    let bad_flag = binary().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(2));
    let missing_file = binary()
        .args(["train", "--cube", s(&tmp.path().join("nope")), "--endmembers", "2", "--out", s(&tmp.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(missing_file.status.code(), Some(2));

    let out = tmp.path().join("div");
    let diverged = binary()
        .args(["train", "--data", s(&data), "--iters", "50", "--lr", "1e300", "--optimizer", "sgd", "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(diverged.status.code(), Some(3));
    assert!(out.join("history.csv").exists());
    assert_eq!(json(&out.join("manifest.json"))["status"], "diverged");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let base = ["gen", "--height", "4", "--width", "4", "--channels", "6", "--endmembers", "2"];
    let st = binary().args(base).args(["--seed", "13", "--out", s(&a)]).status().unwrap();
    assert!(st.success());
    let st = binary().env(cli::SEED_ENV, "13").args(base).args(["--out", s(&b)]).status().unwrap();
    assert!(st.success());
    assert_eq!(files(&a), files(&b));
    let c = tmp.path().join("c");
    let st = binary().env(cli::SEED_ENV, "13").args(base).args(["--seed", "2", "--out", s(&c)]).status().unwrap();
    assert!(st.success());
    assert_eq!(json(&c.join("manifest.json"))["seed"], 2);
}

