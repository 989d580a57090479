//! `key = value` configuration files merged with `--key` flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anc_core::conv4d::{AncConfig, AncVariant, ConvPath};
use anc_core::error::AncError;
use anc_core::model::ModelConfig;
use anc_core::self_similarity::SelfSimConfig;
use anc_core::training::{TrainConfig, TrainPair};
use anyhow::{Context, Result};
use clap::Args;

/// Every configuration key, each settable from a file or as `--key`.
#[derive(Debug, Clone, Default, Args)]
pub struct Keys {
    /// Plain-text `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub stride: Option<String>,
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, alias = "anc_variant")]
    pub anc_variant: Option<String>,
    /// ANC channel plan, e.g. `1,16,16,1`.
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long, alias = "conv_path")]
    pub conv_path: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// Phase schedule as `epochs:kernel` pairs, e.g. `10:5,5:3,5:0`.
    #[arg(long)]
    pub phases: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub pairs: Option<String>,
    #[arg(long)]
    pub height: Option<String>,
    #[arg(long)]
    pub width: Option<String>,
    #[arg(long)]
    pub depth: Option<String>,
    #[arg(long)]
    pub keypoints: Option<String>,
    #[arg(long, alias = "noise_std")]
    pub noise_std: Option<String>,
    #[arg(long, alias = "max_shift")]
    pub max_shift: Option<String>,
    #[arg(long)]
    pub flips: Option<String>,
}

const KEYS: &[&str] = &[
    "seed",
    "stride",
    "window",
    "anc_variant",
    "channels",
    "conv_path",
    "alpha",
    "lr",
    "phases",
    "data",
    "pairs",
    "height",
    "width",
    "depth",
    "keypoints",
    "noise_std",
    "max_shift",
    "flips",
];

/// Parses a config file body; unknown keys and malformed lines are errors.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, AncError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AncError::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(AncError::InvalidArgument(format!("config line {}: unknown key {k:?}", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Merged settings with typed accessors.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(keys: &Keys) -> Result<Self> {
        let mut values = match &keys.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| AncError::io(path, e))?;
                parse_file(&text).map_err(|e| e.context(path.display()))?
            }
            None => BTreeMap::new(),
        };
        let flags = [
            ("seed", &keys.seed),
            ("stride", &keys.stride),
            ("window", &keys.window),
            ("anc_variant", &keys.anc_variant),
            ("channels", &keys.channels),
            ("conv_path", &keys.conv_path),
            ("alpha", &keys.alpha),
            ("lr", &keys.lr),
            ("phases", &keys.phases),
            ("data", &keys.data),
            ("pairs", &keys.pairs),
            ("height", &keys.height),
            ("width", &keys.width),
            ("depth", &keys.depth),
            ("keypoints", &keys.keypoints),
            ("noise_std", &keys.noise_std),
            ("max_shift", &keys.max_shift),
            ("flips", &keys.flips),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(Settings { values })
    }

    /// Adds a setting that only exists as a command argument.
    pub fn with(mut self, key: &str, path: &Path) -> Self {
        self.values.insert(key.to_string(), path.display().to_string());
        self
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed value of `key`, or `default` when unset.
    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, AncError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| AncError::InvalidArgument(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, AncError> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| AncError::InvalidArgument(format!("missing required setting {key:?}")))
    }

    pub fn model(&self) -> Result<ModelConfig, AncError> {
        let window = self.get("window", 5usize)?;
        let variant: AncVariant = self.get("anc_variant", AncVariant::D)?;
        let channels = match self.raw("channels") {
            None => AncConfig::default().channels,
            Some(v) => v
                .split(',')
                .map(|c| c.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| AncError::InvalidArgument(format!("channels: cannot parse {v:?}")))?,
        };
        let cfg = ModelConfig {
            self_sim: SelfSimConfig {
                window,
                channels_1: window * window,
                channels_2: window * window,
                ..SelfSimConfig::default()
            },
            anc: AncConfig::new(variant, channels)?,
            conv_path: self.get("conv_path", ConvPath::Fast)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, AncError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            phases: match self.raw("phases") {
                Some(p) => TrainConfig::parse_phases(p)?,
                None => d.phases,
            },
            lr: self.get("lr", d.lr)?,
            alpha: self.get("alpha", d.alpha)?,
            seed: self.get("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads the dataset named by `key` with the configured stride.
pub fn load_data(settings: &Settings, key: &str) -> Result<Vec<TrainPair>> {
    let dir = settings.path(key)?;
    let stride = settings.get("stride", anc_core::features::DEFAULT_STRIDE)?;
    crate::dataset::load(&dir, stride).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn ensure_dir(path: &Path) -> Result<(), AncError> {
    std::fs::create_dir_all(path).map_err(|e| AncError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parsing() {
        let m = parse_file("# comment\nseed = 4\n\nchannels=1,2,1 # trailing\n").unwrap();
        assert_eq!(m["seed"], "4");
        assert_eq!(m["channels"], "1,2,1");
        assert!(parse_file("bogus = 1").is_err());
        assert!(parse_file("seed 4").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "seed = 4\nlr = 0.01\n").unwrap();
        let keys = Keys {
            config: Some(path),
            seed: Some("9".into()),
            ..Keys::default()
        };
        let s = Settings::load(&keys).unwrap();
        let t = s.train().unwrap();
        assert_eq!(t.seed, 9);
        assert_eq!(t.lr, 0.01);
    }

    #[test]
    fn bad_variant_is_invalid_argument() {
        let keys = Keys {
            anc_variant: Some("e".into()),
            ..Keys::default()
        };
        let err = Settings::load(&keys).unwrap().model().unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
    }
}
