//! The full network: self-similarity descriptors, the two correlation
//! volumes, bidirectional consensus refinement and mutual filtering.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::conv4d::{bidirectional_refine, init_anc_params, AncConfig, ConvPath, Correlation4D};
use crate::error::{invalid, Result};
use crate::features::{correlation_map, FeatureMap};
use crate::losses::{build_match_matrices, loss_total, LossConfig, LossNodes};
use crate::rng::Rng;
use crate::self_similarity::{init_self_sim_params, multiscale_forward, SelfSimConfig};

const SELF_SIM_PARAMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub self_sim: SelfSimConfig,
    pub anc: AncConfig,
    /// Convolution implementation used by the consensus module.
    pub conv_path: ConvPath,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            self_sim: SelfSimConfig::default(),
            anc: AncConfig::default(),
            conv_path: ConvPath::Fast,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.self_sim.validate()?;
        self.anc.layers()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Nodes recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub params: Vec<NodeId>,
    /// Refined volume before filtering.
    pub c_bar: NodeId,
    /// Mutually filtered volume.
    pub c_hat: NodeId,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        init_self_sim_params(&config.self_sim, &mut rng, &mut params)?;
        init_anc_params(&config.anc, &mut rng, &mut params)?;
        Ok(Model { config, params })
    }

    /// Records the network on `tape` for a pair of normalised feature maps.
    pub fn forward(&self, tape: &mut Tape, fs: &FeatureMap, ft: &FeatureMap) -> Result<Forward> {
        let nodes = self.params.bind(tape);
        self.forward_with(tape, nodes, fs, ft)
    }

    /// Like [`Model::forward`] with the parameters already bound to `nodes`,
    /// in [`ParamSet`] order. Used to differentiate through perturbed copies.
    pub fn forward_with(&self, tape: &mut Tape, nodes: Vec<NodeId>, fs: &FeatureMap, ft: &FeatureMap) -> Result<Forward> {
        if fs.depth() != ft.depth() {
            return Err(invalid!("feature depths differ: {} vs {}", fs.depth(), ft.depth()));
        }
        if nodes.len() != self.params.len() {
            return Err(invalid!("{} parameter nodes for {} parameters", nodes.len(), self.params.len()));
        }
        let (ss, anc) = nodes.split_at(SELF_SIM_PARAMS);
        let s_s = multiscale_forward(tape, fs, &self.config.self_sim, ss)?;
        let s_t = multiscale_forward(tape, ft, &self.config.self_sim, ss)?;
        let cs = tape.correlation(s_s, s_t)?;
        let cf = tape.constant(correlation_map(fs, ft)?.into_values());
        let c_bar = bidirectional_refine(tape, cs, cf, &self.config.anc, anc, self.config.conv_path)?;
        let c_hat = tape.mutual_nn(c_bar)?;
        Ok(Forward {
            params: nodes,
            c_bar,
            c_hat,
        })
    }

    /// Filtered volume for inference.
    pub fn predict(&self, fs: &FeatureMap, ft: &FeatureMap) -> Result<Correlation4D> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, fs, ft)?;
        Correlation4D::new(tape.value(f.c_hat).clone())
    }

    /// Records forward pass and losses for one annotated pair.
    pub fn loss(
        &self,
        tape: &mut Tape,
        fs: &FeatureMap,
        ft: &FeatureMap,
        source_kps: &[[f64; 2]],
        target_kps: &[[f64; 2]],
        cfg: &LossConfig,
    ) -> Result<(Forward, LossNodes)> {
        let f = self.forward(tape, fs, ft)?;
        let m = build_match_matrices(tape, f.c_hat, source_kps, target_kps, fs.stride(), cfg)?;
        let l = loss_total(tape, &m, cfg)?;
        Ok((f, l))
    }
}
