//! End-to-end training behaviour on small synthetic tasks.

use anc_core::conv4d::{AncConfig, AncVariant, ConvPath};
use anc_core::eval::{evaluate_model, PckConfig};
use anc_core::features::{synth_pair, SynthSpec, Transform};
use anc_core::model::{Model, ModelConfig};
use anc_core::rng::Rng;
use anc_core::self_similarity::SelfSimConfig;
use anc_core::training::{train, Phase, TrainConfig, TrainPair, TrainState};

fn model_config() -> ModelConfig {
    ModelConfig {
        self_sim: SelfSimConfig {
            window: 3,
            channels_1: 9,
            channels_2: 9,
            ..SelfSimConfig::default()
        },
        anc: AncConfig::new(AncVariant::D, vec![1, 2, 2, 1]).unwrap(),
        conv_path: ConvPath::Fast,
    }
}

fn pairs(seed: u64, n: usize, transform: Transform, noise: f64) -> Vec<TrainPair> {
    let spec = SynthSpec {
        height: 6,
        width: 6,
        depth: 16,
        stride: 16,
        transform,
        n_keypoints: 8,
        noise_std: noise,
    };
    let mut rng = Rng::new(seed);
    (0..n).map(|_| TrainPair::from(&synth_pair(&mut rng, &spec).unwrap())).collect()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        phases: vec![Phase { epochs, gaussian_kernel: 3 }],
        lr: 0.005,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn identity_pair_loss_decreases() {
    let data = pairs(1, 1, Transform::Translate { dx: 0, dy: 0 }, 0.0);
    let cfg = config(20);
    let mut model = Model::new(model_config(), 4).unwrap();
    let mut state = TrainState::new(&model, &cfg);
    let reports = train(&data, &mut model, &cfg, &mut state, |_, _, _| Ok(())).unwrap();
    assert_eq!(reports.len(), 20);
    let losses: Vec<f64> = reports.iter().map(|r| r.mean_keypoint_loss).collect();
    for w in losses[..5].windows(2) {
        assert!(w[1] < w[0], "losses {losses:?}");
    }
    assert!(losses[19] < losses[0]);
    let pck = evaluate_model(&model, &data, &PckConfig::default()).unwrap().pck;
    assert_eq!(pck, 1.0);
}

#[test]
fn training_is_deterministic() {
    let data = pairs(2, 3, Transform::Translate { dx: 1, dy: -1 }, 0.2);
    let cfg = config(3);
    let run = || {
        let mut model = Model::new(model_config(), 5).unwrap();
        let mut state = TrainState::new(&model, &cfg);
        let reports = train(&data, &mut model, &cfg, &mut state, |_, _, _| Ok(())).unwrap();
        (reports, model)
    };
    assert_eq!(run(), run());
}
