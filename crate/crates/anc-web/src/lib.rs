//! WebAssembly bindings for the demo page: a synthetic pair whose match
//! probabilities can be inspected cell by cell, a small in-browser training
//! loop, and a conv4d check that the page times itself.

use anc_core::conv4d::kernels::{self, ConvGeometry};
use anc_core::conv4d::{AncConfig, AncVariant, ConvPath};
use anc_core::eval::{evaluate_model, evaluate_with, identity_keypoints, PckConfig};
use anc_core::features::{correlation_map, sample_transform, synth_pair, SynthSpec, Transform};
use anc_core::matching::{softmax_probabilities, Direction, ProbabilityMap4D};
use anc_core::model::{Model, ModelConfig};
use anc_core::rng::Rng;
use anc_core::self_similarity::SelfSimConfig;
use anc_core::training::{train_epoch, Phase, TrainConfig, TrainPair, TrainState};
use anc_core::AncError;
use wasm_bindgen::prelude::*;

const DEPTH: usize = 16;
const KEYPOINTS: usize = 12;
const STRIDE: usize = 16;
const HELD_OUT: usize = 8;

fn js_err(e: AncError) -> JsError {
    JsError::new(&e.to_string())
}

fn model_config() -> ModelConfig {
    ModelConfig {
        self_sim: SelfSimConfig {
            window: 3,
            channels_1: 9,
            channels_2: 9,
            ..SelfSimConfig::default()
        },
        anc: AncConfig::new(AncVariant::D, vec![1, 1]).expect("valid plan"),
        conv_path: ConvPath::Fast,
    }
}

fn make_pair(rng: &mut Rng, size: usize, noise: f64, transform: Transform) -> Result<TrainPair, AncError> {
    let spec = SynthSpec {
        height: size,
        width: size,
        depth: DEPTH,
        stride: STRIDE,
        transform,
        n_keypoints: KEYPOINTS,
        noise_std: noise,
    };
    Ok(TrainPair::from(&synth_pair(rng, &spec)?))
}

fn random_pair(rng: &mut Rng, size: usize, noise: f64) -> Result<TrainPair, AncError> {
    let t = sample_transform(rng, 2, true);
    make_pair(rng, size, noise, t)
}

#[wasm_bindgen]
pub struct Demo {
    size: usize,
    noise: f64,
    rng: Rng,
    transform: Transform,
    pair: TrainPair,
    model: Model,
    train_cfg: TrainConfig,
    state: TrainState,
    held_out: Vec<TrainPair>,
    probs: Option<ProbabilityMap4D>,
}

impl Demo {
    fn probabilities(&mut self) -> Result<&ProbabilityMap4D, AncError> {
        if self.probs.is_none() {
            let c = self.model.predict(&self.pair.source, &self.pair.target)?;
            self.probs = Some(softmax_probabilities(&c, Direction::SourceToTarget)?);
        }
        Ok(self.probs.as_ref().expect("just computed"))
    }
}

#[wasm_bindgen]
impl Demo {
    /// A `size`×`size` synthetic task with per-component feature noise.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, noise: f64) -> Result<Demo, JsError> {
        if !(4..=12).contains(&size) {
            return Err(JsError::new("grid size must be between 4 and 12"));
        }
        if !(0.0..=2.0).contains(&noise) {
            return Err(JsError::new("noise must be between 0 and 2"));
        }
        let seed = seed as u64;
        let model = Model::new(model_config(), seed).map_err(js_err)?;
        // one pair per "epoch" so the schedule never runs out
        let train_cfg = TrainConfig {
            phases: vec![Phase {
                epochs: usize::MAX,
                gaussian_kernel: 3,
            }],
            lr: 0.01,
            seed,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&model, &train_cfg);
        let mut rng = Rng::new(seed);
        let held_out = (0..HELD_OUT)
            .map(|_| random_pair(&mut rng, size, noise))
            .collect::<Result<_, _>>()
            .map_err(js_err)?;
        let transform = Transform::Translate { dx: 1, dy: 1 };
        let pair = make_pair(&mut rng, size, noise, transform).map_err(js_err)?;
        Ok(Demo {
            size,
            noise,
            rng,
            transform,
            pair,
            model,
            train_cfg,
            state,
            held_out,
            probs: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Replaces the displayed pair; `transform` is e.g. `translate(2,-1)`,
    /// `flip_h`, `flip_v`, `scale_up` or `scale_down`.
    pub fn set_transform(&mut self, transform: &str) -> Result<(), JsError> {
        let t: Transform = transform.parse().map_err(js_err)?;
        self.pair = make_pair(&mut self.rng, self.size, self.noise, t).map_err(js_err)?;
        self.transform = t;
        self.probs = None;
        Ok(())
    }

    /// Model match probabilities over target cells for source cell
    /// `(row, col)`, row-major.
    pub fn heatmap(&mut self, row: usize, col: usize) -> Result<Vec<f64>, JsError> {
        if row >= self.size || col >= self.size {
            return Err(JsError::new("cell outside the grid"));
        }
        Ok(self.probabilities().map_err(js_err)?.slice(row, col))
    }

    /// Softmax of the raw feature correlation for the same cell.
    pub fn raw_heatmap(&self, row: usize, col: usize) -> Result<Vec<f64>, JsError> {
        if row >= self.size || col >= self.size {
            return Err(JsError::new("cell outside the grid"));
        }
        let c = correlation_map(&self.pair.source, &self.pair.target).map_err(js_err)?;
        let v = softmax_probabilities(&c, Direction::SourceToTarget).map_err(js_err)?;
        Ok(v.slice(row, col))
    }

    /// True target `[row, col]` of a source cell centre.
    pub fn expected(&self, row: usize, col: usize) -> Vec<f64> {
        let (r, c) = self.transform.apply_grid(row as f64, col as f64, self.size, self.size);
        vec![r, c]
    }

    /// Runs `steps` Adam steps, each on a fresh random pair; returns the
    /// mean keypoint loss.
    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        let mut total = 0.0;
        for _ in 0..steps {
            let pair = random_pair(&mut self.rng, self.size, self.noise).map_err(js_err)?;
            let r = train_epoch(std::slice::from_ref(&pair), &mut self.model, &self.train_cfg, &mut self.state)
                .map_err(js_err)?;
            total += r.mean_keypoint_loss;
        }
        self.probs = None;
        Ok(total / steps.max(1) as f64)
    }

    pub fn steps_trained(&self) -> usize {
        self.state.epoch
    }

    /// Held-out PCK@0.1 of the model.
    pub fn pck(&self) -> Result<f64, JsError> {
        let r = evaluate_model(&self.model, &self.held_out, &PckConfig::default()).map_err(js_err)?;
        Ok(r.pck)
    }

    /// Held-out PCK@0.1 of predicting every keypoint in place.
    pub fn identity_pck(&self) -> Result<f64, JsError> {
        let r = evaluate_with(&self.held_out, &PckConfig::default(), |p| Ok(identity_keypoints(p))).map_err(js_err)?;
        Ok(r.pck)
    }
}

/// Seeded inputs for a `size^4` volume with `channels` in and out.
#[wasm_bindgen]
pub struct ConvCase {
    geometry: ConvGeometry,
    x: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[wasm_bindgen]
impl ConvCase {
    /// `kernel` is `iso` (5⁴) or `non_iso` (3·3·5·5).
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, channels: usize, kernel: &str) -> Result<ConvCase, JsError> {
        if !(1..=10).contains(&size) || !(1..=4).contains(&channels) {
            return Err(JsError::new("size must be 1..=10 and channels 1..=4"));
        }
        let kernel = match kernel {
            "iso" => [5, 5, 5, 5],
            "non_iso" => [3, 3, 5, 5],
            other => return Err(JsError::new(&format!("unknown kernel {other:?}"))),
        };
        let geometry = ConvGeometry {
            c_in: channels,
            c_out: channels,
            vol: [size; 4],
            kernel,
        };
        let mut rng = Rng::new(size as u64 * 31 + channels as u64);
        let mut draw = |n: usize| rng.normal(&[n], 0.0, 1.0).map(|t| t.into_data()).map_err(js_err);
        Ok(ConvCase {
            x: draw(geometry.input_len())?,
            w: draw(geometry.weight_len())?,
            b: draw(channels)?,
            geometry,
        })
    }

    /// Runs one forward pass with `path` (`naive`, `fast` or `fast_f32`)
    /// and returns the output sum, so the page can time the call.
    pub fn run(&self, path: &str) -> Result<f64, JsError> {
        let path: ConvPath = path.parse().map_err(js_err)?;
        Ok(kernels::forward(path, &self.geometry, &self.x, &self.w, &self.b).iter().sum())
    }

    /// Largest difference between the naive and fast f64 outputs.
    pub fn max_abs_diff(&self) -> f64 {
        let a = kernels::forward(ConvPath::Naive, &self.geometry, &self.x, &self.w, &self.b);
        let b = kernels::forward(ConvPath::Fast, &self.geometry, &self.x, &self.w, &self.b);
        a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    pub fn macs(&self) -> f64 {
        self.geometry.macs() as f64
    }
}
