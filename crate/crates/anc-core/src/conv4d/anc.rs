use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{invalid, Result};
use crate::rng::Rng;

use super::kernels::ConvPath;
use super::SWAP_5D;

const ISO: [usize; 4] = [5, 5, 5, 5];
const NON_ISO: [usize; 4] = [3, 3, 5, 5];

/// Layer layouts of the consensus module.
///
/// * `A`: every layer is one isotropic 5x5x5x5 kernel.
/// * `B`: as `A`, but interior layers use a 3x3x5x5 kernel.
/// * `C`: every layer is one 3x3x5x5 kernel.
/// * `D`: every layer runs a 5x5x5x5 and a 3x3x5x5 branch side by side, each
///   producing half the output channels; a single-channel layer sums them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AncVariant {
    A,
    B,
    C,
    D,
}

impl std::str::FromStr for AncVariant {
    type Err = crate::error::AncError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(AncVariant::A),
            "b" => Ok(AncVariant::B),
            "c" => Ok(AncVariant::C),
            "d" => Ok(AncVariant::D),
            other => Err(invalid!("unknown ANC variant {other:?}; expected a, b, c or d")),
        }
    }
}

impl std::fmt::Display for AncVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AncVariant::A => "a",
            AncVariant::B => "b",
            AncVariant::C => "c",
            AncVariant::D => "d",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Concat,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    pub kernel: [usize; 4],
    pub c_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub branches: Vec<Branch>,
    pub combine: Combine,
}

impl LayerSpec {
    pub fn c_out(&self) -> usize {
        match self.combine {
            Combine::Concat => self.branches.iter().map(|b| b.c_out).sum(),
            Combine::Sum => self.branches[0].c_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncConfig {
    pub variant: AncVariant,
    /// Channel counts from input to output; starts and ends with 1.
    pub channels: Vec<usize>,
    /// Rectify the last layer too, so the refined volume is non-negative
    /// and the mutual filter's max ratios cannot flip signs.
    #[serde(default = "yes")]
    pub final_relu: bool,
}

fn yes() -> bool {
    true
}

impl Default for AncConfig {
    fn default() -> Self {
        AncConfig {
            variant: AncVariant::D,
            channels: vec![1, 16, 16, 1],
            final_relu: true,
        }
    }
}

impl AncConfig {
    pub fn new(variant: AncVariant, channels: Vec<usize>) -> Result<Self> {
        let cfg = AncConfig {
            variant,
            channels,
            final_relu: true,
        };
        cfg.layers()?;
        Ok(cfg)
    }

    /// Expands the variant and channel plan into concrete layers.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        let ch = &self.channels;
        if ch.len() < 2 || ch[0] != 1 || ch[ch.len() - 1] != 1 || ch.contains(&0) {
            return Err(invalid!(
                "channel plan {ch:?} must have at least two positive entries and start and end with 1"
            ));
        }
        let n = ch.len() - 1;
        (0..n)
            .map(|l| {
                let (c_in, c_out) = (ch[l], ch[l + 1]);
                let single = |kernel| LayerSpec {
                    c_in,
                    branches: vec![Branch { kernel, c_out }],
                    combine: Combine::Concat,
                };
                Ok(match self.variant {
                    AncVariant::A => single(ISO),
                    AncVariant::B if l > 0 && l + 1 < n => single(NON_ISO),
                    AncVariant::B => single(ISO),
                    AncVariant::C => single(NON_ISO),
                    AncVariant::D if c_out == 1 => LayerSpec {
                        c_in,
                        branches: vec![Branch { kernel: ISO, c_out: 1 }, Branch { kernel: NON_ISO, c_out: 1 }],
                        combine: Combine::Sum,
                    },
                    AncVariant::D if c_out % 2 == 0 => LayerSpec {
                        c_in,
                        branches: vec![
                            Branch { kernel: ISO, c_out: c_out / 2 },
                            Branch { kernel: NON_ISO, c_out: c_out / 2 },
                        ],
                        combine: Combine::Concat,
                    },
                    AncVariant::D => {
                        return Err(invalid!(
                            "variant d splits each layer into two equal branches; {c_out} channels is odd"
                        ))
                    }
                })
            })
            .collect()
    }

    /// Number of weight/bias tensor pairs.
    pub fn branch_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(|l| l.branches.len()).sum())
    }
}

/// Appends the module's kernels to `params` as `anc.<layer>.<branch>.w` and
/// `.b`, with weights uniform in `±1/sqrt(fan_in)` and zero biases.
pub fn init_anc_params(cfg: &AncConfig, rng: &mut Rng, params: &mut ParamSet) -> Result<()> {
    for (l, layer) in cfg.layers()?.iter().enumerate() {
        for (b, br) in layer.branches.iter().enumerate() {
            let taps: usize = br.kernel.iter().product();
            let a = 1.0 / ((layer.c_in * taps) as f64).sqrt();
            let [p, q, r, s] = br.kernel;
            let w = rng.uniform(&[br.c_out * layer.c_in, p, q, r, s], -a, a)?;
            params.push(format!("anc.{l}.{b}.w"), w)?;
            params.push(format!("anc.{l}.{b}.b"), crate::tensor::DenseTensor::zeros(&[br.c_out])?)?;
        }
    }
    Ok(())
}

/// Applies the consensus module to a `(1, h_s, w_s, h_t, w_t)` node.
/// `weights` holds the weight and bias nodes in the order written by
/// [`init_anc_params`]. ReLU follows every layer but the last, and the last
/// too when `final_relu` is set.
pub fn anc_forward(
    tape: &mut Tape,
    x: NodeId,
    cfg: &AncConfig,
    weights: &[NodeId],
    path: ConvPath,
) -> Result<NodeId> {
    let layers = cfg.layers()?;
    let expected = 2 * layers.iter().map(|l| l.branches.len()).sum::<usize>();
    if weights.len() != expected {
        return Err(invalid!("{} weight nodes for a module needing {expected}", weights.len()));
    }
    let mut h = x;
    let mut at = 0;
    for (l, layer) in layers.iter().enumerate() {
        if tape.value(h).dims()[0] != layer.c_in {
            return Err(invalid!(
                "layer {l} expects {} channels, input has {}",
                layer.c_in,
                tape.value(h).dims()[0]
            ));
        }
        let mut outs = Vec::with_capacity(layer.branches.len());
        for _ in &layer.branches {
            outs.push(tape.conv4d(h, weights[at], weights[at + 1], path)?);
            at += 2;
        }
        let mut y = match layer.combine {
            _ if outs.len() == 1 => outs[0],
            Combine::Concat => tape.concat(&outs, 0)?,
            Combine::Sum => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                acc
            }
        };
        if l + 1 < layers.len() || cfg.final_relu {
            y = tape.relu(y)?;
        }
        h = y;
    }
    Ok(h)
}

/// `N(C_s) + N(C_s^T)^T + N(C_f) + N(C_f^T)^T` with one shared module.
///
/// Each volume's two directions are summed first and the pairs added last,
/// so swapping the images yields the exact transpose: every partial sum is
/// a commutative pair of the same two terms.
pub fn bidirectional_refine(
    tape: &mut Tape,
    cs: NodeId,
    cf: NodeId,
    cfg: &AncConfig,
    weights: &[NodeId],
    path: ConvPath,
) -> Result<NodeId> {
    let (ds, df) = (tape.value(cs).dims().to_vec(), tape.value(cf).dims().to_vec());
    if ds != df || ds.len() != 5 || ds[0] != 1 {
        return Err(invalid!("refine expects two equal single-channel volumes, got {ds:?} and {df:?}"));
    }
    let both = |tape: &mut Tape, c: NodeId| -> Result<NodeId> {
        let fwd = anc_forward(tape, c, cfg, weights, path)?;
        let ct = tape.permute(c, &SWAP_5D)?;
        let back = anc_forward(tape, ct, cfg, weights, path)?;
        let back = tape.permute(back, &SWAP_5D)?;
        tape.add(fwd, back)
    };
    let s = both(tape, cs)?;
    let f = both(tape, cf)?;
    tape.add(s, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;
    use crate::conv4d::SWAP_5D;

    #[test]
    fn variant_d_default_layers() {
        let layers = AncConfig::default().layers().unwrap();
        assert_eq!(layers.len(), 3);
        assert_eq!(layers[0].branches, vec![Branch { kernel: ISO, c_out: 8 }, Branch { kernel: NON_ISO, c_out: 8 }]);
        assert_eq!(layers[1].c_in, 16);
        assert_eq!(layers[2].combine, Combine::Sum);
        assert_eq!(layers[2].c_out(), 1);
    }

    #[test]
    fn variants_a_b_c() {
        let plan = vec![1, 16, 16, 1];
        let a = AncConfig::new(AncVariant::A, plan.clone()).unwrap().layers().unwrap();
        assert!(a.iter().all(|l| l.branches == vec![Branch { kernel: ISO, c_out: l.c_out() }]));
        let b = AncConfig::new(AncVariant::B, plan.clone()).unwrap().layers().unwrap();
        assert_eq!(b.iter().map(|l| l.branches[0].kernel).collect::<Vec<_>>(), vec![ISO, NON_ISO, ISO]);
        let c = AncConfig::new(AncVariant::C, plan).unwrap().layers().unwrap();
        assert!(c.iter().all(|l| l.branches[0].kernel == NON_ISO));
    }

    #[test]
    fn bad_plans() {
        assert!(AncConfig::new(AncVariant::D, vec![1, 3, 1]).is_err());
        assert!(AncConfig::new(AncVariant::A, vec![2, 1]).is_err());
        assert!(AncConfig::new(AncVariant::A, vec![1]).is_err());
        assert!("e".parse::<AncVariant>().is_err());
        assert_eq!("D".parse::<AncVariant>().unwrap(), AncVariant::D);
    }

    fn identity_module(tape: &mut Tape) -> (AncConfig, Vec<NodeId>) {
        let cfg = AncConfig {
            final_relu: false,
            ..AncConfig::new(AncVariant::A, vec![1, 1]).unwrap()
        };
        let mut w = DenseTensor::zeros(&[1, 5, 5, 5, 5]).unwrap().into_data();
        w[312] = 1.0;
        let w = tape.leaf(DenseTensor::new(&[1, 5, 5, 5, 5], w).unwrap(), true);
        let b = tape.leaf(DenseTensor::zeros(&[1]).unwrap(), true);
        (cfg, vec![w, b])
    }

    #[test]
    fn identity_module_passes_input() {
        let mut tape = Tape::new();
        let (cfg, w) = identity_module(&mut tape);
        let x0 = Rng::new(1).normal(&[1, 3, 2, 3, 2], 0.0, 1.0).unwrap();
        let x = tape.constant(x0.clone());
        let y = anc_forward(&mut tape, x, &cfg, &w, ConvPath::Fast).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn final_relu_clamps_output() {
        let mut tape = Tape::new();
        let (cfg, w) = identity_module(&mut tape);
        let cfg = AncConfig { final_relu: true, ..cfg };
        let x0 = Rng::new(2).normal(&[1, 2, 2, 2, 2], 0.0, 1.0).unwrap();
        let x = tape.constant(x0.clone());
        let y = anc_forward(&mut tape, x, &cfg, &w, ConvPath::Fast).unwrap();
        assert_eq!(tape.value(y), &x0.map(|v| v.max(0.0)));
    }

    #[test]
    fn identity_refine_of_symmetric_volumes_doubles() {
        let mut tape = Tape::new();
        let (cfg, w) = identity_module(&mut tape);
        let a = Rng::new(5).normal(&[1, 3, 3, 3, 3], 0.0, 1.0).unwrap();
        let sym = |t: &DenseTensor| {
            let tt = t.permute(&SWAP_5D).unwrap();
            DenseTensor::new(t.dims(), t.data().iter().zip(tt.data()).map(|(x, y)| x + y).collect()).unwrap()
        };
        let cs0 = sym(&a);
        let cf0 = sym(&Rng::new(6).normal(&[1, 3, 3, 3, 3], 0.0, 1.0).unwrap());
        let cs = tape.constant(cs0.clone());
        let cf = tape.constant(cf0.clone());
        let out = bidirectional_refine(&mut tape, cs, cf, &cfg, &w, ConvPath::Fast).unwrap();
        for ((o, s), f) in tape.value(out).data().iter().zip(cs0.data()).zip(cf0.data()) {
            assert!((o - (2.0 * s + 2.0 * f)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_module_gives_zero() {
        let cfg = AncConfig::default();
        let mut params = ParamSet::new();
        init_anc_params(&cfg, &mut Rng::new(0), &mut params).unwrap();
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = params
            .iter()
            .map(|v| tape.leaf(DenseTensor::zeros(v.value.dims()).unwrap(), true))
            .collect();
        let x = tape.constant(Rng::new(2).normal(&[1, 4, 4, 4, 4], 0.0, 1.0).unwrap());
        let out = bidirectional_refine(&mut tape, x, x, &cfg, &nodes, ConvPath::Fast).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }
}
