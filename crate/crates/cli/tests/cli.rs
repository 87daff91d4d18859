//! End-to-end command-line behavior: exit codes, error categories, artifact
//! bytes, and the published-number reproduction path.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depthbins"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn depthbins")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixtures() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .display()
        .to_string()
}

const TINY: &[&str] = &[
    "--set", "data.samples=4",
    "--set", "data.height=32",
    "--set", "data.width=32",
    "--set", "model.channels=8",
    "--set", "model.n_total=8",
    "--set", "attractor.counts=2,2,1,1",
    "--set", "opt.steps=6",
    "--set", "opt.batch=2",
    "--set", "eval.samples=4",
];

#[test]
fn train_eval_roundtrip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.zoec");
    let csv1 = dir.path().join("m1.csv");
    let csv2 = dir.path().join("m2.csv");

    let mut args = vec!["train", "--out", ckpt.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let out = run(&args);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    assert!(stdout(&out).contains("checkpoint written"));
    assert!(ckpt.exists());

    for csv in [&csv1, &csv2] {
        let out = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
        assert!(out.status.success(), "eval failed: {}", stderr(&out));
        assert!(stdout(&out).contains("routing accuracy"));
    }
    let b1 = std::fs::read(&csv1).unwrap();
    let b2 = std::fs::read(&csv2).unwrap();
    assert_eq!(b1, b2, "evaluating twice must produce identical bytes");
    let text = String::from_utf8(b1).unwrap();
    assert!(text.starts_with("dataset,delta1,delta2,delta3,rel,rmse,log10\n"));
    assert!(text.contains("indoor,"));
    assert!(text.contains("outdoor,"));
}

#[test]
fn training_twice_reproduces_checkpoint_bytes() {
    // Identical configs (including the embedded output path) in two separate
    // working directories must serialize identical checkpoints.
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let mut args = vec!["train", "--out", "model.zoec"];
        args.extend_from_slice(TINY);
        let out = bin()
            .args(&args)
            .current_dir(dir.path())
            .output()
            .expect("spawn depthbins");
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(
        std::fs::read(dir_a.path().join("model.zoec")).unwrap(),
        std::fs::read(dir_b.path().join("model.zoec")).unwrap()
    );
}

#[test]
fn unknown_config_key_fails_with_category() {
    let out = run(&["train", "--set", "nope.key=1"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error[config]:"), "got: {err}");
    assert!(err.contains("nope.key"));
}

#[test]
fn labeled_router_without_labels_is_a_config_error() {
    let out = run(&["train", "--set", "data.labeled=false"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[config]:"));
}

#[test]
fn eval_rejects_model_scope_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.zoec");
    let mut args = vec!["train", "--out", ckpt.to_str().unwrap()];
    args.extend_from_slice(TINY);
    assert!(run(&args).status.success());
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--set",
        "model.channels=16",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[config]:"));
}

#[test]
fn eval_on_missing_checkpoint_is_an_io_error() {
    let out = run(&["eval", "--ckpt", "/nonexistent/m.zoec"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[io]:"), "got: {}", stderr(&out));
}

#[test]
fn mri_reproduces_published_percentages() {
    let fx = fixtures();
    let out = run(&[
        "mri",
        "--ref", &format!("{fx}/nk_rel_newcrfs.csv"),
        "--target", &format!("{fx}/nk_rel_zoed_m12_nk.csv"),
        "--mode", "datasets",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mRI_D(rel) = +25.2%"), "got: {}", stdout(&out));

    let out = run(&[
        "mri",
        "--ref", &format!("{fx}/zeroshot_indoor_newcrfs.csv"),
        "--target", &format!("{fx}/zeroshot_indoor_zoed_m12_nk.csv"),
        "--mode", "metrics",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    for line in ["sunrgbd: mRI_theta = +13.9%", "diode_indoor: mRI_theta = +46.3%", "hypersim: mRI_theta = +5.3%"] {
        assert!(text.contains(line), "missing '{line}' in: {text}");
    }
}

#[test]
fn mri_identity_and_row_mismatch() {
    let fx = fixtures();
    let same = format!("{fx}/nk_rel_newcrfs.csv");
    let out = run(&["mri", "--ref", &same, "--target", &same, "--mode", "datasets"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("mRI_D(rel) = +0.0%"));

    let out = run(&[
        "mri",
        "--ref", &same,
        "--target", &format!("{fx}/zeroshot_indoor_newcrfs.csv"),
        "--mode", "datasets",
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error[contract]:"));
    assert!(err.contains("nyu") && err.contains("sunrgbd"), "should list missing rows: {err}");
}

#[test]
fn gen_data_writes_reproducible_zdm_files() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("d1");
    let out2 = dir.path().join("d2");
    for out in [&out1, &out2] {
        let st = run(&[
            "gen-data",
            "--out", out.to_str().unwrap(),
            "--samples", "3",
            "--indoor-fraction", "0.34",
            "--seed", "5",
            "--height", "32",
            "--width", "32",
        ]);
        assert!(st.status.success(), "{}", stderr(&st));
    }
    let manifest = std::fs::read_to_string(out1.join("manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].ends_with(",indoor") || lines[0].ends_with(",outdoor"));
    let indoor = lines.iter().filter(|l| l.ends_with(",indoor")).count();
    assert_eq!(indoor, 1, "round(3 * 0.34) = 1 indoor sample");
    for name in ["sample_00000.zdm", "sample_00000.depth.zdm"] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} must be byte-reproducible");
        assert_eq!(&a[..4], b"ZDM1");
    }
}

#[test]
fn grad_check_command_passes() {
    let out = run(&["grad-check", "--configs", "3", "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("PASS").count(), 6, "six checks expected: {text}");
}
