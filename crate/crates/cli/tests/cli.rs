//! End-to-end checks of the command-line interface: exit codes, artifact
//! creation, rerun determinism, and the full mini pipeline on a small
//! synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use zoomout::synth::{generate_dataset, SynthConfig};

fn zoomout_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zoomout"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = zoomout_cmd().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "zoomout {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    zoomout_cmd()
        .args(args)
        .output()
        .expect("spawn")
        .status
        .code()
        .expect("exit code")
}

fn small_dataset(dir: &Path, n: usize) -> PathBuf {
    generate_dataset(dir, n, &SynthConfig::default(), 42).expect("dataset")
}

#[test]
fn help_lists_commands_and_exits_zero() {
    let out = run_ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "oversegment",
        "train-codebooks",
        "train-local-net",
        "extract",
        "train",
        "predict",
        "evaluate",
        "oracle",
        "render",
        "ablate",
    ] {
        assert!(text.contains(cmd), "help misses {cmd}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(exit_code(&["no-such-command"]), 1);
    assert_eq!(exit_code(&["oversegment", "--bogus-flag", "x"]), 1);
    assert_eq!(exit_code(&["oversegment"]), 1); // missing required flags
    assert_eq!(
        exit_code(&[
            "train",
            "--manifest",
            "m.tsv",
            "--codebooks",
            "cb",
            "--out",
            "o",
            "--provider",
            "nope=builtin"
        ]),
        1
    );
}

#[test]
fn data_errors_exit_two_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seg.zosp");
    let code = exit_code(&[
        "oversegment",
        "--image",
        "/nonexistent/image.png",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(!out.exists(), "failed run must not leave artifacts");
}

#[test]
fn oversegment_writes_deterministic_zosp() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 2);
    let image = manifest.parent().unwrap().join("images/img_0000.png");
    let out1 = dir.path().join("a.zosp");
    let out2 = dir.path().join("b.zosp");
    for out in [&out1, &out2] {
        run_ok(&[
            "oversegment",
            "--image",
            image.to_str().unwrap(),
            "--k",
            "32",
            "--m",
            "15",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed must give byte-identical output");
    let sp = zoomout::superpixel::load_superpixelization(&out1).unwrap();
    let n = sp.count() as f64;
    assert!((25.6..=38.4).contains(&n), "count {n} vs requested 32");
}

#[test]
fn full_pipeline_on_synthetic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 10);
    let manifest = manifest.to_str().unwrap();
    let cb = dir.path().join("codebooks");
    let bundle = dir.path().join("bundle");
    let preds = dir.path().join("preds");

    run_ok(&[
        "train-codebooks",
        "--manifest",
        manifest,
        "--out",
        cb.to_str().unwrap(),
        "--texton-k",
        "8",
        "--word-k",
        "12",
        "--sample-images",
        "3",
    ]);
    assert!(cb.join("texton.zocb").exists());
    assert!(cb.join("words.zocb").exists());

    // handcrafted-only training keeps the test fast
    run_ok(&[
        "train",
        "--manifest",
        manifest,
        "--codebooks",
        cb.to_str().unwrap(),
        "--out",
        bundle.to_str().unwrap(),
        "--classes",
        "8",
        "--k",
        "32",
        "--epochs",
        "3",
        "--loss",
        "asymmetric",
        "--provider",
        "distant=none",
        "--provider",
        "global=none",
    ]);
    assert!(bundle.join("model.zomd").exists());
    assert!(bundle.join("bundle.json").exists());

    run_ok(&[
        "predict",
        "--manifest",
        manifest,
        "--model",
        bundle.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        preds.to_str().unwrap(),
    ]);
    let n_preds = std::fs::read_dir(&preds).unwrap().count();
    assert_eq!(n_preds, 2, "10 images -> 2 test predictions");

    // evaluate predictions against the generated truth; prediction files are
    // named after the image id, so rename truth maps to match
    let truth_dir = dir.path().join("truth_named");
    std::fs::create_dir(&truth_dir).unwrap();
    for i in 8..10 {
        std::fs::copy(
            dir.path().join(format!("labels/lab_{i:04}.png")),
            truth_dir.join(format!("images_img_{i:04}.png")),
        )
        .unwrap();
    }
    let out = run_ok(&[
        "evaluate",
        "--pred",
        preds.to_str().unwrap(),
        "--truth",
        truth_dir.to_str().unwrap(),
        "--classes",
        "8",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mean_iou="), "report missing mean_iou: {text}");

    let out = run_ok(&[
        "oracle",
        "--manifest",
        manifest,
        "--split",
        "test",
        "--classes",
        "8",
        "--k",
        "32",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    let oracle: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("oracle_upper_bound="))
        .expect("oracle line")
        .parse()
        .unwrap();
    assert!(oracle > 0.5 && oracle <= 1.0, "oracle {oracle}");

    let rendered = dir.path().join("render.png");
    run_ok(&[
        "render",
        "--labels",
        dir.path().join("labels/lab_0008.png").to_str().unwrap(),
        "--classes",
        "8",
        "--out",
        rendered.to_str().unwrap(),
    ]);
    assert!(rendered.exists());

    // existing output directory is refused, not overwritten
    assert_eq!(
        exit_code(&[
            "predict",
            "--manifest",
            manifest,
            "--model",
            bundle.to_str().unwrap(),
            "--out",
            preds.to_str().unwrap(),
        ]),
        2
    );
}

#[test]
fn extract_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 8);
    let manifest = manifest.to_str().unwrap();
    let cb = dir.path().join("codebooks");
    run_ok(&[
        "train-codebooks",
        "--manifest",
        manifest,
        "--out",
        cb.to_str().unwrap(),
        "--texton-k",
        "8",
        "--word-k",
        "12",
        "--sample-images",
        "2",
    ]);

    let feats = dir.path().join("train.zoft");
    run_ok(&[
        "extract",
        "--manifest",
        manifest,
        "--codebooks",
        cb.to_str().unwrap(),
        "--split",
        "train",
        "--classes",
        "8",
        "--k",
        "24",
        "--out",
        feats.to_str().unwrap(),
        "--provider",
        "distant=none",
        "--provider",
        "global=none",
    ]);
    let store = zoomout::pipeline::load_features(&feats).unwrap();
    assert!(store.n_rows > 0);
    let rows = std::fs::read_to_string(dir.path().join("train.zoft.rows.tsv")).unwrap();
    assert_eq!(rows.lines().count(), store.n_rows);

    let out = run_ok(&[
        "ablate",
        "--manifest",
        manifest,
        "--codebooks",
        cb.to_str().unwrap(),
        "--classes",
        "8",
        "--k",
        "24",
        "--epochs",
        "2",
        "--levels",
        "local",
        "--levels",
        "local,proximal",
        "--provider",
        "distant=none",
        "--provider",
        "global=none",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("local,proximal"), "missing subset row: {text}");

    // unknown level name is a data error
    assert_eq!(
        exit_code(&[
            "ablate",
            "--manifest",
            manifest,
            "--codebooks",
            cb.to_str().unwrap(),
            "--classes",
            "8",
            "--k",
            "24",
            "--epochs",
            "1",
            "--levels",
            "bogus",
            "--provider",
            "distant=none",
            "--provider",
            "global=none",
        ]),
        2
    );
}
