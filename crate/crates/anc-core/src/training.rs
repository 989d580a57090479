//! Adam, the epoch loop with its smoothing schedule, and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tape};
use crate::error::{invalid, AncError, Result};
use crate::features::{FeatureMap, SyntheticPair};
use crate::losses::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::DenseTensor;
use crate::tns;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<DenseTensor>,
    #[serde(skip)]
    pub v: Vec<DenseTensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| DenseTensor::zeros(p.value.dims()).unwrap()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// then zeroed. Non-finite gradients abort the step before anything changes.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(invalid!(
            "optimiser tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        ));
    }
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(AncError::Numeric(format!("non-finite gradient in {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, m) in state.m.iter_mut().enumerate() {
        let v = &mut state.v[i];
        let p = params.get_mut(i);
        let n = p.value.len();
        let (mut md, mut vd, mut th) = (m.data().to_vec(), v.data().to_vec(), p.value.data().to_vec());
        for k in 0..n {
            let g = p.grad.data()[k];
            md[k] = b1 * md[k] + (1.0 - b1) * g;
            vd[k] = b2 * vd[k] + (1.0 - b2) * g * g;
            th[k] -= lr * (md[k] / c1) / ((vd[k] / c2).sqrt() + eps);
        }
        let dims = p.value.dims().to_vec();
        *m = DenseTensor::new(&dims, md)?;
        *v = DenseTensor::new(&dims, vd)?;
        p.value = DenseTensor::new(&dims, th)?;
    }
    params.zero_grads();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub gaussian_kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phases: Vec<Phase>,
    pub lr: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phases: vec![
                Phase { epochs: 10, gaussian_kernel: 5 },
                Phase { epochs: 5, gaussian_kernel: 3 },
                Phase { epochs: 5, gaussian_kernel: 0 },
            ],
            lr: 0.001,
            alpha: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(invalid!("training needs at least one phase"));
        }
        for p in &self.phases {
            if p.epochs == 0 {
                return Err(invalid!("every phase needs at least one epoch"));
            }
            if p.gaussian_kernel != 0 && p.gaussian_kernel % 2 == 0 {
                return Err(invalid!("gaussian kernel {} must be odd or 0", p.gaussian_kernel));
            }
        }
        if !(self.lr > 0.0) || !(self.alpha >= 0.0) {
            return Err(invalid!("lr must be positive and alpha non-negative"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Phase index and smoothing kernel of zero-based `epoch`.
    pub fn phase_at(&self, epoch: usize) -> Option<(usize, usize)> {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.epochs;
            if epoch < end {
                return Some((i, p.gaussian_kernel));
            }
        }
        None
    }

    /// Parses `"10:5,5:3,5:0"` (epochs:kernel pairs).
    pub fn parse_phases(s: &str) -> Result<Vec<Phase>> {
        s.split(',')
            .map(|part| {
                let (e, k) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| invalid!("phase {part:?} is not epochs:kernel"))?;
                let num = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid!("bad number {v:?} in phases"));
                Ok(Phase {
                    epochs: num(e)?,
                    gaussian_kernel: num(k)?,
                })
            })
            .collect()
    }

    pub fn format_phases(phases: &[Phase]) -> String {
        phases
            .iter()
            .map(|p| format!("{}:{}", p.epochs, p.gaussian_kernel))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// One training example: normalised feature maps and corresponding
/// keypoints in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub source: FeatureMap,
    pub target: FeatureMap,
    pub source_kps: Vec<[f64; 2]>,
    pub target_kps: Vec<[f64; 2]>,
}

impl From<&SyntheticPair> for TrainPair {
    fn from(p: &SyntheticPair) -> Self {
        TrainPair {
            source: p.source.clone(),
            target: p.target.clone(),
            source_kps: p.keypoints.iter().map(|k| k.source).collect(),
            target_kps: p.keypoints.iter().map(|k| k.target).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// One-based epoch number across all phases.
    pub epoch: usize,
    pub phase: usize,
    pub gaussian_kernel: usize,
    pub mean_keypoint_loss: f64,
    pub mean_orthogonal_loss: f64,
    pub pairs: usize,
}

/// Everything needed to continue training besides the model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        TrainState {
            adam: AdamState::new(&model.params, cfg.lr),
            epoch: 0,
        }
    }
}

/// Visiting order of epoch `epoch`, a function of the seed only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).split(epoch as u64).shuffle(&mut order);
    order
}

/// Loss value of one pair, for evaluation.
pub fn pair_losses(model: &Model, pair: &TrainPair, cfg: &LossConfig) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (_, l) = model.loss(&mut tape, &pair.source, &pair.target, &pair.source_kps, &pair.target_kps, cfg)?;
    Ok((tape.value(l.keypoint).data()[0], tape.value(l.orthogonal).data()[0]))
}

/// One pass over `dataset` in seeded order, one Adam step per pair.
pub fn train_epoch(
    dataset: &[TrainPair],
    model: &mut Model,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochReport> {
    if dataset.is_empty() {
        return Err(invalid!("training dataset is empty"));
    }
    cfg.validate()?;
    let (phase, kernel) = cfg
        .phase_at(state.epoch)
        .ok_or_else(|| invalid!("epoch {} is past the schedule", state.epoch + 1))?;
    let loss_cfg = LossConfig::with_kernel(cfg.alpha, kernel);
    let (mut sum_k, mut sum_o) = (0.0, 0.0);
    for idx in epoch_order(cfg.seed, state.epoch, dataset.len()) {
        let pair = &dataset[idx];
        let mut step = || -> Result<(f64, f64)> {
            let mut tape = Tape::new();
            let (f, l) = model.loss(&mut tape, &pair.source, &pair.target, &pair.source_kps, &pair.target_kps, &loss_cfg)?;
            let (lk, lo) = (tape.value(l.keypoint).data()[0], tape.value(l.orthogonal).data()[0]);
            if !lk.is_finite() || !lo.is_finite() {
                return Err(AncError::Numeric(format!("loss is {lk} / {lo}")));
            }
            tape.backward(l.total)?;
            model.params.accumulate_grads(&tape, &f.params)?;
            adam_step(&mut state.adam, &mut model.params)?;
            Ok((lk, lo))
        };
        let (lk, lo) = step().map_err(|e| e.context(format!("epoch {} pair {idx}", state.epoch + 1)))?;
        sum_k += lk;
        sum_o += lo;
    }
    state.epoch += 1;
    let n = dataset.len() as f64;
    Ok(EpochReport {
        epoch: state.epoch,
        phase,
        gaussian_kernel: kernel,
        mean_keypoint_loss: sum_k / n,
        mean_orthogonal_loss: sum_o / n,
        pairs: dataset.len(),
    })
}

/// Runs every remaining epoch of the schedule, reporting each to `on_epoch`.
pub fn train(
    dataset: &[TrainPair],
    model: &mut Model,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochReport, &Model, &TrainState) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let mut out = Vec::new();
    while state.epoch < cfg.total_epochs() {
        let r = train_epoch(dataset, model, cfg, state)?;
        on_epoch(&r, model, state)?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    checkpoint_version: u32,
    config_hash: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    phase: Option<usize>,
    adam: AdamState,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

/// Stable hash of the configuration a checkpoint was trained with.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&(model, train)).expect("configs serialize");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensors(dir: &Path, prefix: &str, names: &[String], tensors: &[DenseTensor]) -> Result<Vec<TensorEntry>> {
    names
        .iter()
        .zip(tensors)
        .map(|(name, t)| {
            let file = format!("{prefix}{name}.tns");
            tns::write(t, dir.join(&file))?;
            Ok(TensorEntry {
                name: name.clone(),
                dims: t.dims().to_vec(),
                file,
            })
        })
        .collect()
}

/// Writes `manifest.json` and one `.tns` file per tensor into `dir`.
pub fn checkpoint_save(dir: impl AsRef<Path>, model: &Model, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| AncError::io(dir, e))?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let values: Vec<DenseTensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let manifest = Manifest {
        schema_version: 1,
        checkpoint_version: CHECKPOINT_VERSION,
        config_hash: config_hash(&model.config, cfg),
        model: model.config.clone(),
        train: cfg.clone(),
        epoch: state.epoch,
        phase: cfg.phase_at(state.epoch).map(|(p, _)| p),
        adam: state.adam.clone(),
        params: write_tensors(dir, "param.", &names, &values)?,
        adam_m: write_tensors(dir, "adam_m.", &names, &state.adam.m)?,
        adam_v: write_tensors(dir, "adam_v.", &names, &state.adam.v)?,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| AncError::io(&path, e))
}

fn read_tensors(dir: &Path, entries: &[TensorEntry]) -> Result<Vec<(String, DenseTensor)>> {
    entries
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            if !path.is_file() {
                return Err(AncError::Format(format!("checkpoint tensor {} is missing", path.display())));
            }
            let t = tns::read(&path)?;
            if t.dims() != e.dims {
                return Err(AncError::Format(format!(
                    "{}: dims {:?} but manifest says {:?}",
                    path.display(),
                    t.dims(),
                    e.dims
                )));
            }
            Ok((e.name.clone(), t))
        })
        .collect()
}

/// Restores a model, its training configuration and optimiser state.
pub fn checkpoint_load(dir: impl AsRef<Path>) -> Result<(Model, TrainConfig, TrainState)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| AncError::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| AncError::Format(format!("{}: {e}", path.display())))?;
    let version = value.get("checkpoint_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(AncError::Format(format!(
            "{}: checkpoint version {version:?}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let m: Manifest =
        serde_json::from_value(value).map_err(|e| AncError::Format(format!("{}: {e}", path.display())))?;
    if m.config_hash != config_hash(&m.model, &m.train) {
        return Err(AncError::Format(format!("{}: config hash does not match its configuration", path.display())));
    }
    let mut model = Model::new(m.model.clone(), 0).map_err(|e| AncError::Format(e.to_string()))?;
    let params = read_tensors(dir, &m.params)?;
    if params.len() != model.params.len() {
        return Err(AncError::Format(format!(
            "manifest lists {} tensors, model needs {}",
            params.len(),
            model.params.len()
        )));
    }
    for (i, (name, t)) in params.into_iter().enumerate() {
        let p = model.params.get_mut(i);
        if p.name != name || p.value.dims() != t.dims() {
            return Err(AncError::Format(format!(
                "tensor {name} {:?} does not fit parameter {} {:?}",
                t.dims(),
                p.name,
                p.value.dims()
            )));
        }
        p.value = t;
    }
    let moments = |entries: &[TensorEntry]| -> Result<Vec<DenseTensor>> {
        let t = read_tensors(dir, entries)?;
        if t.len() != model.params.len() {
            return Err(AncError::Format("optimiser moments do not match the parameters".into()));
        }
        Ok(t.into_iter().map(|(_, t)| t).collect())
    };
    let mut adam = m.adam.clone();
    adam.m = moments(&m.adam_m)?;
    adam.v = moments(&m.adam_v)?;
    Ok((model, m.train, TrainState { adam, epoch: m.epoch }))
}
