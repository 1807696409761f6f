use ndarray::Array4;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use vcil::backbone::{load_checkpoint, save_checkpoint};
use vcil::{BackboneConfig, Distillation, FrameSequence, ModelState};

pub fn toy_config() -> BackboneConfig {
    BackboneConfig {
        frames: 4,
        channels: 3,
        height: 8,
        width: 8,
        widths: vec![4, 6, 8],
        shift_fraction: 0.25,
        shift_before_block: 1,
        head_init_scale: 0.3,
    }
}

fn batch(cfg: &BackboneConfig, n: usize, classes: usize, rng: &mut impl Rng) -> Vec<FrameSequence> {
    (0..n)
        .map(|i| {
            let frames = Array4::from_shape_simple_fn((cfg.frames, cfg.channels, cfg.height, cfg.width), || {
                rng.random_range(0.0f32..1.0)
            });
            FrameSequence::new(frames, i % classes, format!("b{i}")).unwrap()
        })
        .collect()
}

/// Max relative error between the analytic gradient and central differences
/// over `coords` coordinates with a non-negligible gradient.
fn gradient_check(model: &mut ModelState, data: &[FrameSequence], distill: Option<Distillation>, coords: usize, seed: u64) -> f64 {
    let (_, grads) = model.loss_and_gradient(data, distill).unwrap();
    let analytic = grads.flatten();
    let candidates: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > 1e-6).collect();
    assert!(candidates.len() >= coords);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for pick in sample(&mut rng, candidates.len(), coords) {
        let i = candidates[pick];
        let orig = model.params().get(i).unwrap();
        model.params_mut().set(i, orig + eps);
        let plus = model.training_loss(data, distill).unwrap();
        model.params_mut().set(i, orig - eps);
        let minus = model.training_loss(data, distill).unwrap();
        model.params_mut().set(i, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs());
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = toy_config();
    let mut model = ModelState::new(cfg.clone(), &mut rng).unwrap();
    model.expand_head(3, &mut rng).unwrap();
    let data = batch(&cfg, 3, 3, &mut rng);
    let err = gradient_check(&mut model, &data, None, 24, 9);
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = toy_config();
    let mut model = ModelState::new(cfg.clone(), &mut rng).unwrap();
    model.expand_head(2, &mut rng).unwrap();
    model.take_snapshot();
    model.expand_head(2, &mut rng).unwrap();
    // move away from the teacher so the distillation term is non-trivial
    let perturb = batch(&cfg, 4, 4, &mut rng);
    model.train_step(&perturb, None, 0.5).unwrap();
    let data = batch(&cfg, 3, 4, &mut rng);
    let distill = Some(Distillation { lambda: 1.0, temperature: 2.0 });
    let err = gradient_check(&mut model, &data, distill, 24, 10);
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn small_sgd_step_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = toy_config();
    let mut model = ModelState::new(cfg.clone(), &mut rng).unwrap();
    model.expand_head(4, &mut rng).unwrap();
    let data = batch(&cfg, 8, 4, &mut rng);
    let before = model.training_loss(&data, None).unwrap();
    model.train_step(&data, None, 1e-3).unwrap();
    let after = model.training_loss(&data, None).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = toy_config();
    let mut model = ModelState::new(cfg.clone(), &mut rng).unwrap();
    model.expand_head(3, &mut rng).unwrap();
    let data = batch(&cfg, 2, 3, &mut rng);
    let dir = tempdir().unwrap();
    save_checkpoint(&model, dir.path(), "m").unwrap();
    let back = load_checkpoint(dir.path(), "m").unwrap();
    assert_eq!(back.params().digest(), model.params().digest());
    assert_eq!(
        back.forward_sequences(&data).unwrap().logits,
        model.forward_sequences(&data).unwrap().logits
    );
}

#[test]
fn single_sample_sgd_step_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = toy_config();
    let mut model = ModelState::new(cfg.clone(), &mut rng).unwrap();
    model.expand_head(3, &mut rng).unwrap();
    let data = batch(&cfg, 1, 3, &mut rng);
    let before = model.training_loss(&data, None).unwrap();
    model.train_step(&data, None, 1e-3).unwrap();
    let after = model.training_loss(&data, None).unwrap();
    assert!(after < before, "{after} >= {before}");
}
