//! End-to-end acceptance checks on a desk-scale model trained on a procedural
//! dead-leaves corpus. Each test writes one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) before asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use patchlikely::analysis::{
    intersection_patches, mean_patch_std, minmax_patches, render_hermann_grid, score::score_windows, score_patches,
    sweep_target, BarPolarity, ChannelMode, Template,
};
use patchlikely::data_io::{save_image, Image8};
use patchlikely::flow::{bits_per_dim, flow_forward, flow_inverse, FlowConfig, FlowParams};
use patchlikely::generation::{generate_illusion, latent_step, ManipulationConfig, Mask, ETA_DECREASE, ETA_INCREASE};
use patchlikely::numerics::linalg::Lu;
use patchlikely::numerics::{finite_diff_jacobian, gaussian_sample, Rng, Tensor};
use patchlikely::synth::{dead_leaves, write_corpus, SceneConfig};
use patchlikely::training::{
    dequantize_batch, initial_checkpoint, train, Checkpoint, PatchDataset, TrainConfig,
};
use patchlikely_cli::gradcheck;

const CORPUS_IMAGES: usize = 120;
const CORPUS_SEED: u64 = 1;
const TEST_IMAGE_STREAM_SEED: u64 = 2;
const TEST_IMAGES: u64 = 3;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] criterion {id:2} {name}: {verdict} ({detail})");
    assert!(pass, "criterion {id} {name}: {detail}");
}

fn corpus_config() -> TrainConfig {
    TrainConfig {
        flow: FlowConfig {
            patch_size: 16,
            channels: 3,
            steps: 6,
            hidden_width: 24,
        },
        batch_size: 24,
        steps: 1500,
        learning_rate: 1e-3,
        warmup_steps: 100,
        checkpoint_every: 100_000,
        checkpoint_path: None,
        seed: 1,
    }
}

struct CorpusModel {
    dataset: PatchDataset,
    checkpoint: Checkpoint,
}

/// Shared model trained once on a written-to-disk corpus of dead-leaves scenes.
fn corpus_model() -> &'static CorpusModel {
    static MODEL: OnceLock<CorpusModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), CORPUS_IMAGES, &SceneConfig::default(), CORPUS_SEED).unwrap();
        let dataset = PatchDataset::from_corpus(dir.path(), 16).unwrap();
        assert_eq!(dataset.len(), CORPUS_IMAGES);
        let checkpoint = train(&corpus_config(), &dataset, None, |_| {}).unwrap();
        CorpusModel { dataset, checkpoint }
    })
}

fn params() -> &'static FlowParams {
    &corpus_model().checkpoint.params
}

fn test_images() -> Vec<Image8> {
    let cfg = SceneConfig {
        width: 64,
        height: 64,
        ..SceneConfig::default()
    };
    (0..TEST_IMAGES)
        .map(|i| dead_leaves(&cfg, &mut Rng::with_stream(TEST_IMAGE_STREAM_SEED, i)).unwrap())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_01_invertibility() {
    let m = corpus_model();
    let mut rng = Rng::with_stream(11, 0);
    let patches = m.dataset.sample_patches(1000, &mut rng);
    let x = dequantize_batch(&patches, &mut rng).unwrap();
    let (z, _) = flow_forward(&x, params()).unwrap();
    let err = flow_inverse(&z, params()).unwrap().max_abs_diff(&x).unwrap();
    report(1, "invertibility", err < 1e-4, &format!("max abs error {err:e} over 1000 patches"));
}

#[test]
fn criterion_02_logdet_oracle() {
    let cfg = gradcheck::tiny_config();
    let mut rng = Rng::new(12);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = FlowParams::<f64>::random(cfg, &mut rng, 0.5).unwrap();
        let x = gaussian_sample::<f64>(&mut rng, &cfg.patch_shape()).map(|v| v * 0.3);
        let (_, ld) = flow_forward(&x, &p).unwrap();
        let shape = x.shape().to_vec();
        let jac = finite_diff_jacobian(
            |v| Ok(flow_forward(&Tensor::new(shape.clone(), v.to_vec())?, &p)?.0.into_data()),
            x.data(),
            gradcheck::JACOBIAN_EPS,
        )
        .unwrap();
        let n = jac.len();
        let oracle = Lu::new(&Tensor::<f64>::new(vec![n, n], jac.into_iter().flatten().collect()).unwrap())
            .unwrap()
            .log_abs_det();
        worst = worst.max((ld[0] - oracle).abs() / oracle.abs().max(1e-12));
    }
    report(2, "logdet oracle", worst < 1e-3, &format!("worst relative error {worst:e} over 20 draws"));
}

#[test]
fn criterion_03_gradient_oracle() {
    let r = gradcheck::check(13, false).unwrap();
    let worst = r.tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max);
    report(
        3,
        "gradient oracle",
        worst < gradcheck::GRADIENT_TOLERANCE,
        &format!("worst relative error {worst:e} over {} tensors, eps {}", r.tensors.len(), gradcheck::GRADIENT_EPS),
    );
}

#[test]
fn criterion_04_training_progress() {
    let scene = dead_leaves(
        &SceneConfig {
            width: 128,
            height: 128,
            ..SceneConfig::default()
        },
        &mut Rng::with_stream(14, 0),
    )
    .unwrap();
    let train_part = scene.crop(0, 0, 128, 96).unwrap();
    let held_out = scene.crop(0, 96, 128, 32).unwrap();
    let dataset = PatchDataset::from_images(vec![train_part], 16).unwrap();
    let cfg = TrainConfig {
        flow: FlowConfig {
            patch_size: 16,
            channels: 3,
            steps: 4,
            hidden_width: 16,
        },
        batch_size: 16,
        steps: 2000,
        learning_rate: 1e-3,
        warmup_steps: 100,
        checkpoint_every: 100_000,
        checkpoint_path: None,
        seed: 4,
    };
    let bpd = |p: &FlowParams| {
        let (_, _, nll) = score_windows(&held_out, p, 4).unwrap();
        bits_per_dim(mean(&nll), 768, 256)
    };
    let before = bpd(&initial_checkpoint(&cfg, &dataset).unwrap().params);
    let a = train(&cfg, &dataset, None, |_| {}).unwrap();
    let after = bpd(&a.params);
    let b = train(&cfg, &dataset, None, |_| {}).unwrap();
    let reproducible = a.to_bytes() == b.to_bytes();
    let drop = 1.0 - after / before;
    report(
        4,
        "training progress",
        drop >= 0.20 && reproducible,
        &format!(
            "held-out {before:.3} -> {after:.3} bits/dim, reduction {:.1}%, identical rerun {reproducible}",
            100.0 * drop
        ),
    );
}

#[test]
fn criterion_05_contrast_argmax() {
    let mut ok = true;
    let mut detail = Vec::new();
    for s in [64u8, 128, 192] {
        let a = sweep_target(&Template::contrast(s, ChannelMode::Gray), params()).unwrap().argmax();
        ok &= a.abs_diff(s) <= 16;
        detail.push(format!("surround {s} argmax {a}"));
    }
    report(5, "contrast argmax", ok, &detail.join(", "));
}

#[test]
fn criterion_06_contrast_rank_ordering() {
    let p = params();
    let mut violations = Vec::new();
    let cases = [(ChannelMode::Gray, 64u8, 192u8), (ChannelMode::HsvSaturation, 40, 200)];
    for (mode, lo, hi) in cases {
        let a = sweep_target(&Template::contrast(lo, mode), p).unwrap();
        let b = sweep_target(&Template::contrast(hi, mode), p).unwrap();
        for t in lo + 1..hi {
            if a.rank[t as usize] <= b.rank[t as usize] {
                violations.push(format!("{mode} T={t}"));
            }
        }
    }
    report(
        6,
        "contrast rank ordering",
        violations.is_empty(),
        &format!(
            "gray surrounds 64/192 and saturation surrounds 40/200, every T strictly between; {} violations {:?}",
            violations.len(),
            violations.iter().take(5).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_07_whites_direction() {
    let p = params();
    let w = sweep_target(&Template::whites(BarPolarity::WhiteBar), p).unwrap();
    let b = sweep_target(&Template::whites(BarPolarity::BlackBar), p).unwrap();
    let (rw, rb) = (w.rank[128], b.rank[128]);
    report(
        7,
        "White's direction",
        rw < rb,
        &format!(
            "rank of T=128: white bar {rw:.2}, black bar {rb:.2}; argmax white bar {}, black bar {}",
            w.argmax(),
            b.argmax()
        ),
    );
}

#[test]
fn criterion_08_hermann_two_scales() {
    let p = params();
    let hi = render_hermann_grid(512, 112, 16).unwrap();
    let lo = render_hermann_grid(256, 56, 8).unwrap();
    let nh = mean(&score_patches(&intersection_patches(&hi, 112, 16, 16).unwrap(), p).unwrap());
    let nl = mean(&score_patches(&intersection_patches(&lo, 56, 8, 16).unwrap(), p).unwrap());
    report(
        8,
        "Hermann two-scale",
        nh < nl,
        &format!("mean intersection NLL 512px {nh:.1} vs 256px {nl:.1} nats"),
    );
}

#[test]
fn criterion_09_minmax_smoothness() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, img) in test_images().iter().enumerate() {
        let mm = minmax_patches(img, params(), 100, 1).unwrap();
        let (top, bottom) = (mean_patch_std(&mm.most_likely), mean_patch_std(&mm.least_likely));
        ok &= mm.most_likely.len() == 100 && top < bottom;
        detail.push(format!("image {i}: {top:.1} < {bottom:.1}"));
    }
    report(9, "min-max smoothness", ok, &detail.join(", "));
}

#[test]
fn criterion_10_latent_step() {
    let zs: Vec<f32> = (-400..=400).map(|i| i as f32 * 0.01).collect();
    let z = Tensor::new(vec![zs.len()], zs.clone()).unwrap();
    let up = latent_step(&z, ETA_INCREASE);
    let down = latent_step(&z, ETA_DECREASE);
    let fixes_zero = latent_step(&Tensor::<f64>::zeros(&[3]), ETA_INCREASE).data() == [0.0; 3]
        && latent_step(&Tensor::<f64>::zeros(&[3]), ETA_DECREASE).data() == [0.0; 3];
    let shrinks = zs.iter().zip(up.data()).all(|(a, b)| b.abs() <= a.abs());
    let grows = zs.iter().zip(down.data()).all(|(a, b)| b.abs() >= a.abs());
    let one = Tensor::<f64>::ones(&[1]);
    let (vu, vd) = (latent_step(&one, ETA_INCREASE).data()[0], latent_step(&one, ETA_DECREASE).data()[0]);
    let spots = (vu - 0.63608).abs() < 1e-5 && (vd - 1.48523).abs() < 1e-5;
    report(
        10,
        "latent step",
        fixes_zero && shrinks && grows && spots,
        &format!("fixes 0 {fixes_zero}, eta 0.6 shrinks {shrinks}, eta -0.8 grows {grows}, z=1 -> {vu:.6} / {vd:.6}"),
    );
}

#[test]
fn criterion_11_generation_invariants() {
    let p = params();
    let cfg = |eta| ManipulationConfig {
        eta,
        stride: 8,
        patch_size: 16,
    };
    let (mut worst_round_trip, mut target_identical) = (0u8, true);
    let (mut orig, mut up, mut down) = (Vec::new(), Vec::new(), Vec::new());
    for img in test_images() {
        let mask = Mask::empty(img.width(), img.height()).with_rect(24, 24, 16, 16);
        let same = generate_illusion(&img, &mask, p, &cfg(0.0)).unwrap();
        worst_round_trip = worst_round_trip.max(
            img.data()
                .iter()
                .zip(same.data())
                .map(|(a, b)| a.abs_diff(*b))
                .max()
                .unwrap(),
        );
        let hi = generate_illusion(&img, &mask, p, &cfg(ETA_INCREASE)).unwrap();
        let lo = generate_illusion(&img, &mask, p, &cfg(ETA_DECREASE)).unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                target_identical &= !mask.get(x, y) || hi.get(x, y) == lo.get(x, y);
            }
        }
        orig.extend(score_windows(&img, p, 2).unwrap().2);
        up.extend(score_windows(&hi, p, 2).unwrap().2);
        down.extend(score_windows(&lo, p, 2).unwrap().2);
    }
    let (no, nu, nd) = (mean(&orig), mean(&up), mean(&down));
    report(
        11,
        "generation invariants",
        worst_round_trip <= 1 && target_identical && nu < no && no < nd && orig.len() >= 1000,
        &format!(
            "eta 0 max change {worst_round_trip}, target identical {target_identical}, mean NLL over {} patches: \
             eta 0.6 {nu:.1} < original {no:.1} < eta -0.8 {nd:.1}",
            orig.len()
        ),
    );
}

fn cli(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_patchlikely"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn criterion_12_determinism() {
    let root = tempfile::tempdir().unwrap();
    let shared = root.path();
    cli(shared, &["synth-corpus", "--out-dir", "corpus", "--count", "4", "--width", "48", "--height", "48"]);
    let image = dead_leaves(
        &SceneConfig {
            width: 40,
            height: 40,
            ..SceneConfig::default()
        },
        &mut Rng::new(15),
    )
    .unwrap();
    save_image(&image, shared.join("image.png")).unwrap();
    save_image(&Mask::empty(40, 40).with_rect(12, 12, 16, 16).to_image(), shared.join("mask.png")).unwrap();

    let mut differing = Vec::new();
    let mut runs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for run in ["a", "b"] {
        let d = shared.join(run);
        std::fs::create_dir(&d).unwrap();
        let train_args = [
            "train", "--corpus", "../corpus", "--out", "m.ckpt", "--steps", "20", "--batch-size", "8",
            "--flow-steps", "2", "--hidden-width", "8", "--warmup-steps", "5", "--seed", "9",
        ];
        let train_out = cli(&d, &train_args);
        let explain_out = cli(
            &d,
            &["explain", "--ckpt", "m.ckpt", "--illusion", "contrast", "--context", "64", "--target", "100", "--out", "sweep.csv"],
        );
        let generate_out = cli(
            &d,
            &["generate", "--ckpt", "m.ckpt", "--image", "../image.png", "--mask", "../mask.png", "--eta=-0.8", "--out", "gen.png"],
        );
        runs.push(vec![
            ("train stdout".into(), train_out),
            ("checkpoint".into(), read(d.join("m.ckpt"))),
            ("explain stdout".into(), explain_out),
            ("explain csv".into(), read(d.join("sweep.csv"))),
            ("generate stdout".into(), generate_out),
            ("generate png".into(), read(d.join("gen.png"))),
            ("generate sidecar".into(), read(d.join("gen.jsonl"))),
        ]);
    }
    for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
        if a != b || a.is_empty() {
            differing.push(name.clone());
        }
    }
    report(
        12,
        "determinism",
        differing.is_empty(),
        &format!("train, explain and generate outputs compared byte for byte; differing {differing:?}"),
    );
}
