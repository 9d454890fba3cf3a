use std::path::Path;
use std::process::{Command, Output};

use patchlikely::data_io::{load_image, save_image, Image8};
use patchlikely::generation::Mask;
use patchlikely::training::load_checkpoint;
use patchlikely_cli::commands::sha256_hex;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchlikely"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Directory with a two-image corpus, a test image, a mask and a 3-step model.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--out-dir", "corpus", "--count", "2", "--width", "40", "--height", "40", "--seed", "3"]);
    std::fs::copy(d.join("corpus/scene_0001.png"), d.join("image.png")).unwrap();
    save_image(&Mask::empty(40, 40).with_rect(8, 8, 8, 8).to_image(), d.join("mask.png")).unwrap();
    ok(
        d,
        &[
            "train", "--corpus", "corpus", "--out", "m.ckpt", "--steps", "3", "--batch-size", "4", "--flow-steps", "1",
            "--hidden-width", "4", "--warmup-steps", "2",
        ],
    );
    dir
}

#[test]
fn help_and_usage_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(d.path(), &["train", "--out", "x.ckpt"]).status.code(), Some(1));
    let missing = run(d.path(), &["score", "--ckpt", "absent.ckpt", "--image", "absent.png"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.ckpt"));
}

#[test]
fn train_logs_every_step_and_resumes() {
    let w = workspace();
    let d = w.path();
    let log = ok(
        d,
        &[
            "train", "--image", "image.png", "--out", "r.ckpt", "--steps", "4", "--batch-size", "4", "--flow-steps", "1",
            "--hidden-width", "4", "--warmup-steps", "2", "--log-every", "2",
        ],
    );
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,nll_nats,bits_per_dim");
    let steps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "2", "3"]);
    assert_eq!(load_checkpoint(d.join("r.ckpt")).unwrap().step, 4);

    let resumed = ok(
        d,
        &[
            "train", "--image", "image.png", "--out", "r.ckpt", "--resume", "r.ckpt", "--steps", "6", "--batch-size", "4",
            "--flow-steps", "1", "--hidden-width", "4", "--warmup-steps", "2",
        ],
    );
    assert!(resumed.lines().nth(1).unwrap().starts_with("4,"));
    assert_eq!(load_checkpoint(d.join("r.ckpt")).unwrap().step, 6);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let w = workspace();
    let d = w.path();
    std::fs::write(d.join("run.cfg"), "# small run\nsteps = 2\nflow_steps = 1\nhidden_width = 4\nbatch_size = 4\nwarmup_steps = 1\n").unwrap();
    ok(d, &["--config", "run.cfg", "train", "--image", "image.png", "--out", "c.ckpt"]);
    assert_eq!(load_checkpoint(d.join("c.ckpt")).unwrap().step, 2);
    ok(d, &["train", "--config", "run.cfg", "--image", "image.png", "--out", "c.ckpt", "--steps", "1"]);
    assert_eq!(load_checkpoint(d.join("c.ckpt")).unwrap().step, 1);

    std::fs::write(d.join("bad.cfg"), "colour = red\n").unwrap();
    let bad = run(d, &["--config", "bad.cfg", "gradcheck"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn score_defaults_to_centred_patch() {
    let w = workspace();
    let out = ok(w.path(), &["score", "--ckpt", "m.ckpt", "--image", "image.png"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "x,y,nll_nats,bits_per_dim");
    assert!(lines[1].starts_with("12,12,"));
    let given = ok(w.path(), &["score", "--ckpt", "m.ckpt", "--image", "image.png", "--patch", "0,24"]);
    assert!(given.lines().nth(1).unwrap().starts_with("0,24,"));
    let outside = run(w.path(), &["score", "--ckpt", "m.ckpt", "--image", "image.png", "--patch", "30,0"]);
    assert_eq!(outside.status.code(), Some(1));
}

#[test]
fn heatmap_writes_png_csv_and_metadata() {
    let w = workspace();
    let d = w.path();
    ok(d, &["heatmap", "--ckpt", "m.ckpt", "--image", "image.png", "--stride", "4", "--out", "h.png"]);
    let png = load_image(d.join("h.png")).unwrap();
    assert_eq!((png.width(), png.height()), (7, 7));
    let csv = std::fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("h.json")).unwrap()).unwrap();
    assert_eq!(meta["stride"], 4);
    assert!(meta["nll_min"].as_f64().unwrap() <= meta["nll_max"].as_f64().unwrap());
}

#[test]
fn minmax_writes_mosaics_and_ranking() {
    let w = workspace();
    let d = w.path();
    ok(d, &["minmax", "--ckpt", "m.ckpt", "--image", "image.png", "--k", "12", "--stride", "2", "--out-dir", "mm"]);
    let mosaic = load_image(d.join("mm/most_likely.png")).unwrap();
    assert_eq!((mosaic.width(), mosaic.height()), (10 * 17 + 1, 2 * 17 + 1));
    let csv = std::fs::read_to_string(d.join("mm/ranking.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 12);
}

#[test]
fn explain_csv_and_comparison() {
    let w = workspace();
    let d = w.path();
    let out = ok(
        d,
        &[
            "explain", "--ckpt", "m.ckpt", "--illusion", "whites", "--context", "white_bar", "--versus", "black_bar",
            "--target", "128", "--out", "w.csv",
        ],
    );
    assert!(out.lines().any(|l| l.starts_with("comparison,128,")));
    let csv = std::fs::read_to_string(d.join("w.csv")).unwrap();
    assert_eq!(csv.lines().count(), 257);
    assert_eq!(csv.lines().next().unwrap(), "target_value,nll_nats,normalized_likelihood,percentile_rank");
    assert!(csv.lines().last().unwrap().ends_with(",100"));

    ok(d, &["explain", "--ckpt", "m.ckpt", "--illusion", "contrast", "--channel", "saturation", "--context", "40", "--out", "s.csv"]);
    for bad in [
        &["explain", "--ckpt", "m.ckpt", "--illusion", "whites", "--channel", "hue", "--out", "x.csv"][..],
        &["explain", "--ckpt", "m.ckpt", "--illusion", "contrast", "--context", "300", "--out", "x.csv"],
        &["explain", "--ckpt", "m.ckpt", "--illusion", "contrast", "--versus", "30", "--out", "x.csv"],
    ] {
        assert_eq!(run(d, bad).status.code(), Some(1), "{bad:?}");
    }
}

#[test]
fn generate_preserves_target_and_records_inputs() {
    let w = workspace();
    let d = w.path();
    ok(d, &["generate", "--ckpt", "m.ckpt", "--image", "image.png", "--mask", "mask.png", "--eta", "-0.8", "--out", "g.png"]);
    let (src, out) = (load_image(d.join("image.png")).unwrap(), load_image(d.join("g.png")).unwrap());
    for y in 8..16 {
        for x in 8..16 {
            assert_eq!(out.get(x, y), src.get(x, y));
        }
    }
    let sidecar = std::fs::read_to_string(d.join("g.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 1);
    let meta: serde_json::Value = serde_json::from_str(sidecar.trim()).unwrap();
    assert_eq!(meta["eta"], -0.8);
    assert_eq!(meta["stride"], 8);
    let ckpt_hash = sha256_hex(&std::fs::read(d.join("m.ckpt")).unwrap());
    assert_eq!(meta["checkpoint_sha256"], ckpt_hash.as_str());
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let d = tempfile::tempdir().unwrap();
    let good = run(d.path(), &["gradcheck"]);
    assert_eq!(good.status.code(), Some(0));
    let text = String::from_utf8(good.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(",ok")).count(), 19);
    let bad = run(d.path(), &["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn hermann_grid_renders_requested_size() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["hermann-grid", "--size", "256", "--block", "56", "--bar", "8", "--out", "g.png"]);
    let g: Image8 = load_image(d.path().join("g.png")).unwrap();
    assert_eq!((g.width(), g.height()), (256, 256));
    assert_eq!(run(d.path(), &["hermann-grid", "--size", "250", "--out", "g.png"]).status.code(), Some(1));
}
