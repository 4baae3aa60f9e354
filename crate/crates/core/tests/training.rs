//! End-to-end training dynamics at reduced scale: the adversarial game runs,
//! losses stay finite, and the cycle-reconstruction term actually improves.

use gan_forensics::data::{synth_dataset, SyntheticSpec};
use gan_forensics::model::{GeneratorConfig, TrainingConfig, TrainSession};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { image_size: 16, n_train: 8, n_test: 2, ..SyntheticSpec::default() }
}

fn small_config(artifact_free: bool) -> GeneratorConfig {
    GeneratorConfig {
        image_size: 16,
        base_channels: 8,
        n_downsamples: 2,
        n_residual_blocks: 2,
        artifact_free,
    }
}

#[test]
fn cycle_loss_decreases_over_training() {
    let data = synth_dataset(&small_spec()).unwrap();
    for af in [false, true] {
        let config = small_config(af);
        let steps = 80;
        let mut session = TrainSession::new(
            config,
            TrainingConfig { total_steps: steps, rng_seed: 11, ..TrainingConfig::default() },
        )
        .unwrap();
        session.run(&data.train_a, &data.train_b, steps).unwrap();

        let history = session.history();
        assert_eq!(history.len() as u64, steps);
        assert!(history
            .iter()
            .all(|r| r.adv_d.is_finite() && r.adv_g.is_finite() && r.cyc.is_finite()));

        // average the first and last quarters to smooth out step-to-step noise
        let quarter = (steps / 4) as usize;
        let head: f64 = history[..quarter].iter().map(|r| r.cyc).sum::<f64>() / quarter as f64;
        let tail: f64 =
            history[history.len() - quarter..].iter().map(|r| r.cyc).sum::<f64>() / quarter as f64;
        assert!(
            tail < head,
            "artifact_free={af}: cycle loss did not improve ({head:.4} -> {tail:.4})"
        );
    }
}

#[test]
fn translated_images_stay_in_range() {
    let data = synth_dataset(&small_spec()).unwrap();
    let mut session = TrainSession::new(
        small_config(true),
        TrainingConfig { total_steps: 10, rng_seed: 12, ..TrainingConfig::default() },
    )
    .unwrap();
    session.run(&data.train_a, &data.train_b, 10).unwrap();
    let fakes = session.model.g_ab.generate(&data.test_a).unwrap();
    assert_eq!(fakes.len(), data.test_a.len());
    for img in &fakes {
        assert_eq!((img.height(), img.width()), (16, 16));
    }
}
