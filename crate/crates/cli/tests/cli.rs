use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;
use vesselseg::raster::load_mask;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ingest")
}

/// Runs the built binary and returns (exit code, stdout, stderr).
fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vesselseg")).args(args).output().expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "vesselseg {args:?} failed: {err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `root` as (relative path, bytes), sorted.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn ingest(out: &Path, images: &Path) -> (i32, String, String) {
    run(&[
        "ingest",
        "--annotations",
        p(&fixture().join("annotations.jsonl")),
        "--images",
        p(images),
        "--out",
        p(out),
        "--size",
        "32",
    ])
}

/// Synthetic 32x32 set plus a short training run; returns the run directory.
fn trained(dir: &Path, extra: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--seed", "4", "--count", "6", "--size", "32", "--out", p(&data)]);
    let run_dir = dir.join("run");
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "data.dir = {}\noutput_dir = {}\nmodel.input_size = 32\nmodel.stage_widths = 4,8,8\n\
             train.epochs = 2\ntrain.batch_size = 4\n{extra}",
            data.display(),
            run_dir.display()
        ),
    )
    .unwrap();
    ok(&["train", "--config", p(&cfg)]);
    run_dir
}

#[test]
fn ingest_keeps_annotated_tiles() {
    let dir = TempDir::new().unwrap();
    let (code, out, err) = ingest(&dir.path().join("a"), &fixture().join("images"));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("retained tiles: 3"), "{out}");
    assert!(out.contains("images found: 5"), "{out}");
    let index = fs::read_to_string(dir.path().join("a/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 4);
    assert!(index.starts_with("tile_id,image,mask,split\n"));

    ingest(&dir.path().join("b"), &fixture().join("images"));
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
}

#[test]
fn ingest_names_tile_with_missing_image() {
    let dir = TempDir::new().unwrap();
    let images = dir.path().join("images");
    fs::create_dir(&images).unwrap();
    for t in ["tile_a", "tile_c", "tile_d", "tile_e"] {
        fs::copy(fixture().join(format!("images/{t}.ppm")), images.join(format!("{t}.ppm"))).unwrap();
    }
    let (code, _, err) = ingest(&dir.path().join("out"), &images);
    assert_eq!(code, 2);
    assert!(err.contains("tile_b"), "{err}");
}

#[test]
fn ingest_names_tile_with_bad_annotation() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("ann.jsonl");
    fs::write(&ann, "{\"id\":\"ok\",\"annotations\":[]}\n{\"id\":\"broken_7\",\"annotations\":[{\"type\":\"vein\",\"coordinates\":[]}]}\n").unwrap();
    let (code, _, err) = run(&["ingest", "--annotations", p(&ann), "--images", p(&fixture().join("images")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("broken_7"), "{err}");
}

#[test]
fn synth_layout_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--seed", "1", "--count", "8", "--size", "64", "--out", p(&a)]);
    ok(&["synth", "--seed", "1", "--count", "8", "--size", "64", "--out", p(&b)]);
    let files = tree(&a);
    assert_eq!(files.len(), 17);
    assert_eq!(files.iter().filter(|(n, _)| n.starts_with("images/")).count(), 8);
    assert_eq!(files, tree(&b));

    let (code, _, err) = run(&["synth", "--count", "0", "--out", p(&dir.path().join("c"))]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        ("ingest", &["--annotations", "--images", "--out", "--size", "--val-fraction", "--seed"]),
        ("synth", &["--seed", "--count", "--size", "--val-fraction", "--out"]),
        ("train", &["--config", "--set"]),
        ("eval", &["--checkpoint", "--data", "--threshold", "--split", "--config", "--out"]),
        ("predict", &["--checkpoint", "--image", "--out-mask", "--prob-out", "--threshold", "--config"]),
        ("lr-find", &["--config", "--set", "--lr-min", "--lr-max", "--steps"]),
    ];
    for (cmd, flags) in cases {
        let (code, out, _) = run(&[cmd, "--help"]);
        assert_eq!(code, 0);
        for f in flags {
            assert!(out.contains(f), "{cmd} --help lacks {f}:\n{out}");
        }
    }
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["synth"]).0, 1);
}

#[test]
fn unknown_key_fails_before_training() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let out = dir.path().join("run");
    fs::write(&cfg, format!("output_dir = {}\nlearnig_rate = 0.1\n", out.display())).unwrap();
    let (code, _, err) = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code, 1);
    assert!(err.contains("learnig_rate"), "{err}");
    assert!(!out.exists());
}

#[test]
fn presets_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        vesselseg_cli::config::RunConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 7);
}

#[test]
fn focal_and_dice_presets_differ_only_in_loss() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let load = |name: &str| {
        vesselseg_cli::config::RunConfig::load(&configs.join(name), &[]).unwrap().to_resolved()
    };
    let (focal, dice) = (load("focal.cfg"), load("dice.cfg"));
    for (a, b) in focal.lines().zip(dice.lines()) {
        if a != b {
            assert!(a.starts_with("loss.") || a.starts_with("output_dir"), "{a} vs {b}");
        }
    }
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = TempDir::new().unwrap();
    let run_dir = trained(dir.path(), "train.checkpoint_every = 1\n");
    let curves = fs::read_to_string(run_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    assert!(run_dir.join("resolved.cfg").exists());
    let ckpt = run_dir.join("ckpt_epoch001.bin");
    assert!(run_dir.join("ckpt_epoch000.bin").exists());

    let first = ok(&["eval", "--checkpoint", p(&ckpt), "--split", "all"]);
    let second = ok(&["eval", "--checkpoint", p(&ckpt), "--split", "all"]);
    assert_eq!(first, second);
    assert!(first.starts_with("tile_id,iou,dice\n"));
    assert_eq!(first.lines().count(), 8);
    assert!(first.lines().last().unwrap().starts_with("__mean__,"));
    let to_file = dir.path().join("m.csv");
    ok(&["eval", "--checkpoint", p(&ckpt), "--split", "all", "--out", p(&to_file)]);
    assert_eq!(fs::read_to_string(&to_file).unwrap(), first);

    let image = dir.path().join("data/images/synth_0000.png");
    let (m1, m2) = (dir.path().join("m1.pgm"), dir.path().join("m2.pgm"));
    ok(&["predict", "--checkpoint", p(&ckpt), "--image", p(&image), "--out-mask", p(&m1)]);
    ok(&["predict", "--checkpoint", p(&ckpt), "--image", p(&image), "--out-mask", p(&m2), "--prob-out", p(&dir.path().join("p2.pgm"))]);
    let raw = fs::read(&m1).unwrap();
    let header = b"P5\n32 32 255\n";
    assert!(raw.starts_with(header));
    assert!(raw[header.len()..].iter().all(|&b| b == 0 || b == 255));
    assert_eq!(raw, fs::read(&m2).unwrap());
    assert_eq!(fs::read(dir.path().join("m1_prob.pgm")).unwrap(), fs::read(dir.path().join("p2.pgm")).unwrap());
    load_mask(&m1).unwrap();
}

#[test]
fn mismatched_checkpoint_and_image_size_are_errors() {
    let dir = TempDir::new().unwrap();
    let run_dir = trained(dir.path(), "");
    let ckpt = run_dir.join("ckpt_epoch001.bin");

    let other = dir.path().join("other.cfg");
    fs::write(&other, format!("data.dir = {}\nmodel.input_size = 32\nmodel.stage_widths = 4,8,16\n", dir.path().join("data").display())).unwrap();
    let (code, _, err) = run(&["eval", "--checkpoint", p(&ckpt), "--config", p(&other)]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("parameter"), "{err}");

    ok(&["synth", "--count", "1", "--size", "64", "--out", p(&dir.path().join("big"))]);
    let (code, _, err) = run(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&dir.path().join("big/images/synth_0000.png")),
        "--out-mask",
        p(&dir.path().join("x.pgm")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn divergence_exits_with_numeric_status() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "2", "--count", "16", "--size", "32", "--out", p(&data)]);
    let cfg = dir.path().join("hot.cfg");
    fs::write(
        &cfg,
        format!(
            "data.dir = {}\noutput_dir = {}\nmodel.input_size = 32\ntrain.learning_rate = 1e30\n\
             train.optimizer = sgd\ntrain.momentum = 0\ntrain.epochs = 3\ntrain.batch_size = 2\nloss.kind = bce\n",
            data.display(),
            dir.path().join("run").display()
        ),
    )
    .unwrap();
    let (code, _, err) = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn lr_find_writes_sweep() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "5", "--count", "4", "--size", "32", "--out", p(&data)]);
    let cfg = dir.path().join("lr.cfg");
    let out_dir = dir.path().join("lr");
    fs::write(
        &cfg,
        format!(
            "data.dir = {}\noutput_dir = {}\nmodel.input_size = 32\nmodel.stage_widths = 4,8,8\ntrain.batch_size = 2\n",
            data.display(),
            out_dir.display()
        ),
    )
    .unwrap();
    let out = ok(&["lr-find", "--config", p(&cfg), "--steps", "20", "--lr-min", "1e-5", "--lr-max", "1"]);
    assert!(out.contains("suggested learning rate"), "{out}");
    let csv = fs::read_to_string(out_dir.join("lr_range.csv")).unwrap();
    assert!(csv.starts_with("step,lr,loss,smoothed_loss\n"));
    assert!(csv.lines().count() > 3);
}
