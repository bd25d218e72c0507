//! Shared convolutional backbone with one 1x1 head per field.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{NodeId, Nonlinearity, Tape};
use crate::codec::FieldSet;
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::grid::Grid;
use crate::registry::{AttributeKind, TaskRegistry, CONFIDENCE};

/// Initial foreground probability of the confidence head under random init.
pub const CONFIDENCE_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub channels: usize,
    pub stride: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Normal weights; the confidence bias starts at [`CONFIDENCE_PRIOR`] and
    /// ranged continuous heads at their range midpoint.
    Random,
    /// Weights and biases all zero.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
}

impl From<ActivationKind> for Nonlinearity {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Relu => Nonlinearity::Relu,
            ActivationKind::Tanh => Nonlinearity::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub backbone: Vec<LayerSpec>,
    pub activation: ActivationKind,
    pub head_init: HeadInit,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: vec![
                LayerSpec {
                    channels: 16,
                    stride: 2,
                    kernel: 3,
                },
                LayerSpec {
                    channels: 24,
                    stride: 2,
                    kernel: 3,
                },
                LayerSpec {
                    channels: 24,
                    stride: 1,
                    kernel: 3,
                },
            ],
            activation: ActivationKind::Relu,
            head_init: HeadInit::Random,
        }
    }
}

impl NetworkConfig {
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|l| l.stride).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(0, |l| l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(Error::invalid("backbone needs at least one layer"));
        }
        if self
            .backbone
            .iter()
            .any(|l| l.channels == 0 || l.stride == 0 || l.kernel % 2 == 0)
        {
            return Err(Error::invalid("layers need positive channels/stride and an odd kernel"));
        }
        Ok(())
    }
}

/// The parameter blocks of a network and how they split into backbone and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub input_channels: usize,
    pub params: ParamStore,
    /// Parameter block count belonging to the backbone (blocks `0..backbone_blocks`).
    pub backbone_blocks: usize,
    /// `(weight, bias)` block indices per field.
    pub head_blocks: Vec<(usize, usize)>,
    pub head_channels: Vec<usize>,
    pub head_names: Vec<String>,
}

/// Blocks are seeded by name, so a block shared by two networks starts
/// from identical values regardless of how many heads exist.
fn normal_block(seed: u64, name: &str, n: usize, std: f64) -> Vec<f64> {
    let mut rng = crate::seed::stream(seed, name);
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

impl Network {
    pub fn new(config: NetworkConfig, input_channels: usize, registry: &TaskRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_channels == 0 {
            return Err(Error::invalid("network needs at least one input channel"));
        }
        let mut params = ParamStore::default();
        let mut c_in = input_channels;
        for (i, layer) in config.backbone.iter().enumerate() {
            let k = layer.kernel;
            let fan_in = (c_in * k * k) as f64;
            let gain = match config.activation {
                ActivationKind::Relu => 2.0,
                ActivationKind::Tanh => 1.0,
            };
            let name = format!("backbone.{i}.weight");
            let w = normal_block(seed, &name, layer.channels * c_in * k * k, (gain / fan_in).sqrt());
            params.push(name, vec![layer.channels, c_in, k, k], w);
            params.push(
                format!("backbone.{i}.bias"),
                vec![layer.channels],
                vec![0.0; layer.channels],
            );
            c_in = layer.channels;
        }
        let backbone_blocks = params.blocks.len();
        let mut head_blocks = Vec::new();
        let mut head_channels = Vec::new();
        let mut head_names = Vec::new();
        for spec in registry.specs() {
            let c = spec.channels();
            let name = format!("head.{}.weight", spec.name);
            let w = match config.head_init {
                HeadInit::Random => normal_block(seed, &name, c * c_in, (1.0 / c_in as f64).sqrt()),
                HeadInit::Zero => vec![0.0; c * c_in],
            };
            let wi = params.push(name, vec![c, c_in, 1, 1], w);
            // Ranged continuous heads start at the middle of their range and the
            // confidence head at the foreground prior, so an untrained network
            // neither fires everywhere nor lets one head dominate the backbone.
            let b0 = match (config.head_init, spec.range) {
                (HeadInit::Zero, _) => 0.0,
                _ if spec.id == CONFIDENCE => -((1.0 - CONFIDENCE_PRIOR) / CONFIDENCE_PRIOR).ln(),
                (_, Some([lo, hi])) if spec.kind == AttributeKind::Continuous => (lo + hi) / 2.0,
                _ => 0.0,
            };
            let bi = params.push(format!("head.{}.bias", spec.name), vec![c], vec![b0; c]);
            head_blocks.push((wi, bi));
            head_channels.push(c);
            head_names.push(spec.name.clone());
        }
        Ok(Network {
            config,
            input_channels,
            params,
            backbone_blocks,
            head_blocks,
            head_channels,
            head_names,
        })
    }

    pub fn tasks(&self) -> usize {
        self.head_blocks.len()
    }

    /// Output geometry for an input of `width x height` pixels.
    pub fn geometry(&self, width: usize, height: usize) -> Result<GridGeometry> {
        let (mut h, mut w) = (height, width);
        for l in &self.config.backbone {
            h = (h - 1) / l.stride + 1;
            w = (w - 1) / l.stride + 1;
        }
        let g = GridGeometry::for_image(width, height, self.config.stride())?;
        debug_assert_eq!((g.width, g.height), (w, h));
        Ok(g)
    }

    pub fn is_backbone_block(&self, block: usize) -> bool {
        block < self.backbone_blocks
    }

    pub fn forward(&self, input: &Grid) -> Result<Forward> {
        if input.channels() != self.input_channels {
            return Err(Error::shape(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                self.input_channels
            )));
        }
        let geometry = self.geometry(input.width(), input.height())?;
        let mut tape = Tape::new();
        let mut x = tape.input(input.shape().to_vec(), input.data().to_vec());
        let mut param_nodes = vec![0; self.params.len()];
        let act: Nonlinearity = self.config.activation.into();
        for (i, layer) in self.config.backbone.iter().enumerate() {
            let wb = &self.params.blocks[2 * i];
            let bb = &self.params.blocks[2 * i + 1];
            let w = tape.param(2 * i, wb.shape.clone(), wb.data.clone());
            let b = tape.param(2 * i + 1, bb.shape.clone(), bb.data.clone());
            param_nodes[2 * i] = w;
            param_nodes[2 * i + 1] = b;
            let y = tape.conv(x, w, b, layer.stride)?;
            x = tape.activation(y, act);
        }
        let fork = x;
        let mut heads = Vec::with_capacity(self.tasks());
        let mut grids = Vec::with_capacity(self.tasks());
        for &(wi, bi) in &self.head_blocks {
            let wb = &self.params.blocks[wi];
            let bb = &self.params.blocks[bi];
            let w = tape.param(wi, wb.shape.clone(), wb.data.clone());
            let b = tape.param(bi, bb.shape.clone(), bb.data.clone());
            param_nodes[wi] = w;
            param_nodes[bi] = b;
            let out = tape.conv(fork, w, b, 1)?;
            let s = tape.shape(out);
            grids.push(Grid::from_vec(s[0], s[1], s[2], tape.value(out).to_vec())?);
            heads.push(out);
        }
        Ok(Forward {
            tape,
            fork,
            heads,
            param_nodes,
            fields: FieldSet { geometry, grids },
        })
    }
}

/// Result of a forward pass: the recorded tape and the raw fields.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tape: Tape,
    /// Shared feature `z` where the heads branch off.
    pub fork: NodeId,
    /// Output node per field.
    pub heads: Vec<NodeId>,
    /// Leaf node per parameter block.
    pub param_nodes: Vec<NodeId>,
    pub fields: FieldSet,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Network, Grid) {
        let cfg = NetworkConfig {
            backbone: vec![
                LayerSpec {
                    channels: 4,
                    stride: 2,
                    kernel: 3,
                },
                LayerSpec {
                    channels: 5,
                    stride: 1,
                    kernel: 3,
                },
            ],
            activation: ActivationKind::Tanh,
            head_init: HeadInit::Random,
        };
        let reg = TaskRegistry::canonical(3).unwrap();
        let net = Network::new(cfg, 3, &reg, 11).unwrap();
        let input = Grid::from_vec(3, 8, 10, (0..240).map(|i| ((i * 37) % 17) as f64 / 17.0).collect()).unwrap();
        (net, input)
    }

    #[test]
    fn zero_heads_give_zero_fields() {
        let (mut net, input) = small();
        net.config.head_init = HeadInit::Zero;
        let net = Network::new(net.config.clone(), 3, &TaskRegistry::canonical(3).unwrap(), 11).unwrap();
        let f = net.forward(&input).unwrap();
        assert!(f.fields.grids.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, input) = small();
        let a = net.forward(&input).unwrap();
        let b = net.forward(&input).unwrap();
        assert_eq!(a.fields, b.fields);
        let again = small().0;
        assert_eq!(again.params, net.params);
        assert_eq!((a.fields.geometry.width, a.fields.geometry.height), (5, 4));
    }

    #[test]
    fn head_is_linear() {
        let (mut net, input) = small();
        let base = net.forward(&input).unwrap().fields;
        let (wi, bi) = net.head_blocks[4];
        for v in &mut net.params.blocks[wi].data {
            *v *= 2.0;
        }
        for v in &mut net.params.blocks[bi].data {
            *v *= 2.0;
        }
        let doubled = net.forward(&input).unwrap().fields;
        for (t, (a, b)) in base.grids.iter().zip(&doubled.grids).enumerate() {
            for (x, y) in a.data().iter().zip(b.data()) {
                if t == 4 {
                    assert!((2.0 * x - y).abs() < 1e-12);
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn shared_blocks_identical_across_registries() {
        let cfg = NetworkConfig::default();
        let a = Network::new(cfg.clone(), 6, &TaskRegistry::canonical(1).unwrap(), 3).unwrap();
        let b = Network::new(cfg, 6, &TaskRegistry::canonical(32).unwrap(), 3).unwrap();
        for blk in &a.params.blocks {
            let j = b.params.index_of(&blk.name).unwrap();
            assert_eq!(blk, &b.params.blocks[j]);
        }
    }

    #[test]
    fn wrong_channels_rejected() {
        let (net, _) = small();
        assert!(net.forward(&Grid::zeros(2, 8, 10)).is_err());
    }
}
