use patchlikely::data_io::Image8;
use patchlikely::flow::{FlowConfig, FlowParams};
use patchlikely::generation::{generate_illusion, ManipulationConfig, Mask, ETA_DECREASE, ETA_INCREASE};
use patchlikely::numerics::Rng;
use patchlikely::synth::{dead_leaves, SceneConfig};

fn scene(seed: u64) -> Image8 {
    let cfg = SceneConfig {
        width: 48,
        height: 40,
        ..SceneConfig::default()
    };
    dead_leaves(&cfg, &mut Rng::new(seed)).unwrap()
}

fn cfg(eta: f64) -> ManipulationConfig {
    ManipulationConfig {
        eta,
        stride: 8,
        patch_size: 16,
    }
}

fn random_flow(seed: u64) -> FlowParams {
    let c = FlowConfig {
        steps: 3,
        hidden_width: 8,
        ..FlowConfig::default()
    };
    FlowParams::random(c, &mut Rng::new(seed), 0.3).unwrap()
}

#[test]
fn zero_step_round_trips_within_one_level() {
    let p = random_flow(1);
    let img = scene(2);
    let mask = Mask::empty(48, 40).with_rect(16, 16, 8, 8);
    let out = generate_illusion(&img, &mask, &p, &cfg(0.0)).unwrap();
    let worst = img.data().iter().zip(out.data()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
    assert!(worst <= 1, "max change {worst}");
}

#[test]
fn masked_pixels_are_preserved_for_both_directions() {
    let p = random_flow(3);
    let img = scene(4);
    let mask = Mask::empty(48, 40).with_rect(10, 12, 9, 7);
    let up = generate_illusion(&img, &mask, &p, &cfg(ETA_INCREASE)).unwrap();
    let down = generate_illusion(&img, &mask, &p, &cfg(ETA_DECREASE)).unwrap();
    assert_ne!(up, down);
    for y in 0..40 {
        for x in 0..48 {
            if mask.get(x, y) {
                assert_eq!(up.get(x, y), img.get(x, y));
                assert_eq!(down.get(x, y), img.get(x, y));
            }
        }
    }
}

#[test]
fn identity_flow_steps_move_pixels_towards_or_away_from_mid_gray() {
    let p = FlowParams::identity(FlowConfig::default()).unwrap();
    let img = scene(5);
    let mask = Mask::empty(48, 40).with_rect(0, 0, 4, 4);
    let up = generate_illusion(&img, &mask, &p, &cfg(ETA_INCREASE)).unwrap();
    let down = generate_illusion(&img, &mask, &p, &cfg(ETA_DECREASE)).unwrap();
    let dist = |v: u8| (f64::from(v) - 127.5).abs();
    let mut moved = 0;
    for ((&a, &u), &d) in img.data().iter().zip(up.data()).zip(down.data()) {
        assert!(dist(u) <= dist(a) + 1.0, "up {a} -> {u}");
        assert!(dist(d) + 1.0 >= dist(a), "down {a} -> {d}");
        moved += usize::from(u != a);
    }
    assert!(moved > img.data().len() / 4);
}

#[test]
fn generation_is_deterministic() {
    let p = random_flow(6);
    let img = scene(7);
    let mask = Mask::empty(48, 40).with_rect(20, 20, 8, 8);
    let a = generate_illusion(&img, &mask, &p, &cfg(ETA_INCREASE)).unwrap();
    let b = generate_illusion(&img, &mask, &p, &cfg(ETA_INCREASE)).unwrap();
    assert_eq!(a, b);
}
