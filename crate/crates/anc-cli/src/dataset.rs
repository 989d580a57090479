//! On-disk synthetic datasets: one `.tns` file per feature map, the
//! annotation file `pairs.json` and a `manifest.json`.

use std::path::Path;

use anc_core::error::AncError;
use anc_core::features::{load_feature_pair, sample_transform, synth_pair, Annotations, SynthSpec};
use anc_core::rng::Rng;
use anc_core::tns;
use anc_core::training::TrainPair;
use serde::{Deserialize, Serialize};

pub const ANNOTATIONS: &str = "pairs.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub pairs: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
    pub keypoints: usize,
    pub noise_std: f64,
    pub max_shift: i64,
    pub flips: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    annotations: String,
    spec: GenSpec,
}

fn write_text(path: &Path, text: &str) -> Result<(), AncError> {
    std::fs::write(path, text).map_err(|e| AncError::io(path, e))
}

/// Generates `spec.pairs` pairs into `dir`; the output depends only on the
/// spec.
pub fn generate(dir: &Path, spec: &GenSpec) -> Result<Annotations, AncError> {
    if spec.pairs == 0 {
        return Err(AncError::InvalidArgument("pairs must be at least 1".into()));
    }
    crate::config::ensure_dir(dir)?;
    let mut rng = Rng::new(spec.seed);
    let mut ann = Annotations {
        schema_version: 1,
        pairs: Vec::with_capacity(spec.pairs),
    };
    for n in 0..spec.pairs {
        let s = SynthSpec {
            height: spec.height,
            width: spec.width,
            depth: spec.depth,
            stride: spec.stride,
            transform: sample_transform(&mut rng, spec.max_shift, spec.flips),
            n_keypoints: spec.keypoints,
            noise_std: spec.noise_std,
        };
        let pair = synth_pair(&mut rng, &s).map_err(|e| e.context(format!("pair {n}")))?;
        let (fs, ft) = (format!("pair_{n:04}_s.tns"), format!("pair_{n:04}_t.tns"));
        tns::write(pair.source.values(), dir.join(&fs))?;
        tns::write(pair.target.values(), dir.join(&ft))?;
        let mut a = pair.annotation();
        a.source.features = Some(fs);
        a.target.features = Some(ft);
        ann.pairs.push(a);
    }
    write_text(&dir.join(ANNOTATIONS), &ann.to_json())?;
    let manifest = Manifest {
        schema_version: 1,
        annotations: ANNOTATIONS.into(),
        spec: spec.clone(),
    };
    write_text(&dir.join(MANIFEST), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(ann)
}

/// Reads every annotated pair of `dir` with its feature files.
pub fn load(dir: &Path, stride: usize) -> Result<Vec<TrainPair>, AncError> {
    let ann = Annotations::read(dir.join(ANNOTATIONS))?;
    ann.pairs
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let file = |side: &str, f: &Option<String>| {
                f.as_ref()
                    .map(|f| dir.join(f))
                    .ok_or_else(|| AncError::Format(format!("pair {n}: {side} has no feature file")))
            };
            let (fs, ft) = load_feature_pair(file("source", &p.source.features)?, file("target", &p.target.features)?, stride)?;
            for (side, img, f) in [("source", &p.source, &fs), ("target", &p.target, &ft)] {
                let (w, h) = f.image_size();
                if img.width > w as f64 || img.height > h as f64 {
                    return Err(AncError::InvalidArgument(format!(
                        "pair {n}: {side} image {}x{} does not fit a {}x{} grid at stride {stride}",
                        img.width,
                        img.height,
                        f.width(),
                        f.height()
                    )));
                }
            }
            Ok(TrainPair {
                source: fs,
                target: ft,
                source_kps: p.source.keypoints.clone(),
                target_kps: p.target.keypoints.clone(),
            })
        })
        .collect()
}
