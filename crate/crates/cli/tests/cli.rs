//! End-to-end runs of the `catcnn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn catcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catcnn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn value(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_is_byte_identical_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = catcnn(&["synth", "--scenes", "4", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{o:?}");
        assert!(stdout(&o).starts_with("scenes=4 "));
    }
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    assert_eq!(tree(&a).len(), 9);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(catcnn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(catcnn(&["synth", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(catcnn(&["eval"]).status.code(), Some(2));
    assert_eq!(catcnn(&["--help"]).status.code(), Some(0));

    let missing = catcnn(&["predict", "--image", "/nonexistent.pgm", "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[synth]\nscenes = 3\nseed = 5\ncount_min = 2\ncount_max = 2\n").unwrap();
    let run = |extra: &[&str], out: &str| {
        let out = dir.path().join(out);
        let mut args = vec!["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        stdout(&catcnn(&args))
    };
    // file beats the defaults
    let line = run(&[], "f");
    assert_eq!(value(&line, "scenes"), 3.0);
    assert_eq!(value(&line, "total"), 6.0);
    // flags beat the file
    let line = run(&["--scenes", "2", "--count-max", "4", "--count-min", "4"], "g");
    assert_eq!(value(&line, "scenes"), 2.0);
    assert_eq!(value(&line, "total"), 8.0);

    fs::write(&cfg, "[synth]\nbogus = 1\n").unwrap();
    let o = catcnn(&["synth", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("h").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gt_writes_rasters_that_integrate_to_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(catcnn(&["synth", "--scenes", "1", "--out", data.to_str().unwrap()]).status.success());
    let out = dir.path().join("gt");
    let o = catcnn(&[
        "gt",
        "--image",
        data.join("scene_0000.pgm").to_str().unwrap(),
        "--annotation",
        data.join("scene_0000.txt").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--divisor",
        "4",
    ]);
    assert!(o.status.success(), "{o:?}");
    let count = value(&stdout(&o), "count");
    let ann = fs::read_to_string(data.join("scene_0000.txt")).unwrap();
    let points = ann.lines().filter(|l| !l.starts_with("count") && !l.trim().is_empty()).count();
    assert!((count - points as f64).abs() < 1e-9);

    let csv = fs::read_to_string(out.join("scene_0000_density.csv")).unwrap();
    let total: f64 = csv.split([',', '\n']).filter(|s| !s.is_empty()).map(|s| s.parse::<f64>().unwrap()).sum();
    assert!((total - count).abs() < 1e-9);
    assert!(out.join("scene_0000_mask.pgm").exists());
    assert!(out.join("scene_0000_density.pgm").exists());
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    assert!(catcnn(&["synth", "--scenes", "3", "--seed", "1", "--out", d]).status.success());

    let ckpt = dir.path().join("m.ckpt");
    let c = ckpt.to_str().unwrap();
    let small = ["--base-channels", "2", "--trunk-widths", "4,6,8", "--fm-channels", "4", "--max-steps", "6"];
    let train = |out: &str| {
        let mut args = vec!["train", "--data", d, "--out", out, "--seed", "3", "--checkpoint-every", "3"];
        args.extend_from_slice(&small);
        catcnn(&args)
    };
    let o = train(c);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(value(&stdout(&o), "steps"), 6.0);
    let trace = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(trace.lines().count(), 7);
    assert!(dir.path().join("m_step3.ckpt").exists() && dir.path().join("m_step6.ckpt").exists());

    // same seed, same bytes
    let again = dir.path().join("n.ckpt");
    assert!(train(again.to_str().unwrap()).status.success());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    assert_eq!(trace, fs::read_to_string(again.with_extension("csv")).unwrap());

    let o = catcnn(&["eval", "--data", d, "--checkpoint", c]);
    assert!(o.status.success(), "{o:?}");
    let line = stdout(&o);
    assert!(value(&line, "MSE") >= value(&line, "MAE"));
    assert_eq!(fs::read_to_string(ckpt.with_extension("eval.csv")).unwrap().lines().count(), 4);

    let pred = dir.path().join("pred");
    let o = catcnn(&[
        "predict",
        "--image",
        data.join("scene_0001.pgm").to_str().unwrap(),
        "--checkpoint",
        c,
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let count = value(&stdout(&o), "count");
    let csv = fs::read_to_string(pred.join("scene_0001_density.csv")).unwrap();
    let total: f64 = csv.split([',', '\n']).filter(|s| !s.is_empty()).map(|s| s.parse::<f64>().unwrap()).sum();
    assert!((total - count).abs() < 1e-9);
    for f in ["scene_0001_confidence.pgm", "scene_0001_overlay.ppm", "scene_0001_density.pgm"] {
        assert!(pred.join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_passes() {
    let o = catcnn(&["gradcheck", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().last().unwrap().starts_with("gradcheck passed"));
    assert!(out.lines().count() > 10);
}
