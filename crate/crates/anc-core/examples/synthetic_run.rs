//! Trains on synthetic pairs and reports held-out PCK.
//! Usage: synthetic_run [n_train] [phases] [channels] [path], defaulting to
//! 500 pairs, the default schedule, channels 1,1 and the f64 fast path.
use std::time::Instant;

use anc_core::conv4d::{AncConfig, AncVariant, ConvPath};
use anc_core::eval::{evaluate_model, evaluate_with, identity_keypoints, PckConfig, Reference};
use anc_core::features::{correlation_map, sample_transform, synth_pair, SynthSpec};
use anc_core::matching::{match_pixel, softmax_probabilities, Direction};
use anc_core::model::{Model, ModelConfig};
use anc_core::rng::Rng;
use anc_core::training::{train, TrainConfig, TrainPair, TrainState};

fn pairs(seed: u64, n: usize) -> Vec<TrainPair> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let spec = SynthSpec { height: 16, width: 16, depth: 32, stride: 16, transform: sample_transform(&mut rng, 4, true), n_keypoints: 20, noise_std: 0.3 };
            TrainPair::from(&synth_pair(&mut rng, &spec).unwrap())
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let n: usize = arg(1).map_or(500, |s| s.parse().expect("n_train"));
    let phases = arg(2).map_or_else(|| TrainConfig::default().phases, |s| TrainConfig::parse_phases(s).expect("phases"));
    let channels: Vec<usize> = arg(3).unwrap_or("1,1").split(',').map(|c| c.parse().expect("channels")).collect();
    let path: ConvPath = arg(4).map_or(ConvPath::Fast, |s| s.parse().expect("conv path"));
    let train_set = pairs(1, n);
    let test_set = pairs(2, 100);
    let pck_cfg = PckConfig { alpha: 0.1, reference: Reference::Image };
    let id = evaluate_with(&test_set, &pck_cfg, |p| Ok(identity_keypoints(p))).unwrap();
    let raw = evaluate_with(&test_set, &pck_cfg, |p| {
        let c = correlation_map(&p.source, &p.target)?;
        let v = softmax_probabilities(&c, Direction::SourceToTarget)?;
        p.source_kps.iter().map(|k| Ok(match_pixel(&v, k[0], k[1], 16)?.target_px)).collect()
    })
    .unwrap();
    println!("identity {:.3} raw {:.3}", id.pck, raw.pck);
    let cfg = ModelConfig { anc: AncConfig::new(AncVariant::D, channels).unwrap(), conv_path: path, ..Default::default() };
    let mut model = Model::new(cfg, 3).unwrap();
    println!("untrained {:.3}", evaluate_model(&model, &test_set, &pck_cfg).unwrap().pck);
    let tc = TrainConfig { phases, ..TrainConfig::default() };
    let mut st = TrainState::new(&model, &tc);
    let t = Instant::now();
    train(&train_set, &mut model, &tc, &mut st, |r, m, _| {
        let p = evaluate_model(m, &test_set, &pck_cfg)?.pck;
        println!("epoch {} k{} L_k {:.3} L_o {:.3} pck {:.3} t {:.0}s", r.epoch, r.gaussian_kernel, r.mean_keypoint_loss, r.mean_orthogonal_loss, p, t.elapsed().as_secs_f64());
        Ok(())
    })
    .unwrap();
}
