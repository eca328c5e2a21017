use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bitrobust_core::checkpoint::load_model;
use bitrobust_core::dataset::{encode_idx_images, encode_idx_labels};
use bitrobust_core::rng::splitmix_at;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitrobust"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A tiny 4x4-pixel, 3-class data set plus a config using it.
fn workdir(extra: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let n = 96;
    let mut pixels = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        for d in 0..16 {
            let noise = (splitmix_at(1, (i * 16 + d) as u64) % 40) as u8;
            pixels.push(if d % 3 == c { 200 + noise } else { noise });
        }
        labels.push(c as u8);
    }
    fs::write(dir.path().join("x.idx"), encode_idx_images(4, 4, &pixels)).unwrap();
    fs::write(dir.path().join("y.idx"), encode_idx_labels(&labels)).unwrap();
    let cfg = format!(
        "train_images = x.idx\ntrain_labels = y.idx\ntest_images = x.idx\ntest_labels = y.idx\n\
         hidden = 8\nepochs = 3\nbatch_size = 16\nchips = 3\nmodel = tiny\n{extra}"
    );
    fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    dir
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn train(dir: &TempDir) {
    let o = bin(&["train", &path(dir, "run.cfg")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_eval_writes_outputs() {
    let dir = workdir("linf_eps = 0.05\nlinf_samples = 2\n");
    train(&dir);
    assert!(Path::new(&path(&dir, "tiny.bnn")).exists());
    let trace = fs::read_to_string(path(&dir, "tiny_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3 * 6);
    let o = bin(&["eval", &path(&dir, "run.cfg"), "--checkpoint", &path(&dir, "tiny.bnn")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(path(&dir, "tiny_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,scheme,m,wmax,p_train,p_eval,te,rte_mean,rte_std,conf_clean,conf_perturbed,chips,n_test"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("tiny,"));
    assert!(rows.iter().all(|r| r.ends_with(",3,96")));
    let linf = fs::read_to_string(path(&dir, "tiny_linf.csv")).unwrap();
    assert_eq!(linf.lines().count(), 2);
}

#[test]
fn zero_rate_injection_is_the_identity() {
    let dir = workdir("");
    train(&dir);
    let o = bin(&["inject", "--checkpoint", &path(&dir, "tiny.bnn"), "--rate", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("flipped_bits 0"));
    let a = fs::read(path(&dir, "tiny.bnn")).unwrap();
    let b = fs::read(path(&dir, "tiny_injected.bnn")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn injection_flips_close_to_expected_and_decodes() {
    let dir = workdir("");
    train(&dir);
    let o = bin(&[
        "inject",
        "--checkpoint",
        &path(&dir, "tiny.bnn"),
        "--rate",
        "0.1",
        "--seed",
        "4",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let field = |k: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(k))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    let (flipped, expected) = (field("flipped_bits "), field("expected_flips "));
    let original = load_model(path(&dir, "tiny.bnn")).unwrap();
    let injected = load_model(path(&dir, "tiny_injected.bnn")).unwrap();
    let w = original.model.params().len() as f64;
    assert_eq!(expected, 0.1 * 8.0 * w);
    assert!((flipped - expected).abs() <= 4.0 * (0.1 * 0.9 * 8.0 * w).sqrt());
    let q = injected.quantized.unwrap();
    assert_eq!(injected.model.params(), bitrobust_core::fixedpoint::dequantize(&q));
}

#[test]
fn profiled_injection_from_a_map_file() {
    let dir = workdir("");
    train(&dir);
    let mut map = bitrobust_core::ProfiledMap::zeros(4, 8).unwrap();
    map.set_cell(3, 1.0, 1.0).unwrap();
    fs::write(path(&dir, "m.map"), map.to_text()).unwrap();
    let o = bin(&[
        "inject",
        "--checkpoint",
        &path(&dir, "tiny.bnn"),
        "--map",
        &path(&dir, "m.map"),
        "--offset",
        "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // One deterministic cell in 32: every fourth weight loses bit 3.
    let w = load_model(path(&dir, "tiny.bnn")).unwrap().model.params().len();
    assert!(stdout(&o).contains(&format!("flipped_bits {}", w.div_ceil(4))));
}

#[test]
fn config_errors_exit_with_status_2() {
    let dir = workdir("preset = randbet\nwmax = 0.1\n");
    let o = bin(&["train", &path(&dir, "run.cfg")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("p_train"));

    let dir = workdir("colour = blue\n");
    let o = bin(&["train", &path(&dir, "run.cfg")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));

    let dir = workdir("preset = normal\np_train = 0.01\n");
    assert_eq!(bin(&["train", &path(&dir, "run.cfg")]).status.code(), Some(2));
}

#[test]
fn eval_rejects_a_mismatched_scheme() {
    let dir = workdir("");
    train(&dir);
    fs::write(
        path(&dir, "other.cfg"),
        fs::read_to_string(path(&dir, "run.cfg")).unwrap() + "m = 4\n",
    )
    .unwrap();
    let o = bin(&[
        "eval",
        &path(&dir, "other.cfg"),
        "--checkpoint",
        &path(&dir, "tiny.bnn"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("quantized with"));
}

#[test]
fn missing_files_exit_with_status_1() {
    let dir = workdir("");
    let o = bin(&[
        "eval",
        &path(&dir, "run.cfg"),
        "--checkpoint",
        &path(&dir, "absent.bnn"),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bound_and_selftest() {
    let o = bin(&["bound", "100000", "1000000", "0.01"]);
    assert!(stdout(&o).starts_with("epsilon = 0.0167"));
    assert_eq!(bin(&["bound", "0", "10", "0.1"]).status.code(), Some(1));
    let o = bin(&["selftest"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().all(|l| l.starts_with("[PASS]")));
}

#[test]
fn long_help_lists_config_keys() {
    let text = stdout(&bin(&["--help"]));
    for key in ["p_train", "gate_threshold", "chip_seed", "linf_eps"] {
        assert!(text.contains(key), "{key}");
    }
}
