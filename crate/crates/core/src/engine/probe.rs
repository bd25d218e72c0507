//! Gradient-norm instrumentation.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::params::Gradients;
use crate::error::{Error, Result};

/// Which parameters a norm is taken over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Backbone,
    /// Every head.
    Heads,
    /// Heads of the listed fields only.
    Fields(Vec<usize>),
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Backbone => write!(f, "backbone"),
            Partition::Heads | Partition::Fields(_) => write!(f, "heads"),
        }
    }
}

/// L2 norm of the concatenated gradients of a partition, accumulated in f64.
pub fn grad_norm_probe(net: &Network, grads: &Gradients, partition: &Partition) -> Result<f64> {
    if !grads.same_layout(&net.params) {
        return Err(Error::shape("gradient layout differs from the network"));
    }
    let blocks: Vec<usize> = match partition {
        Partition::Backbone => (0..net.backbone_blocks).collect(),
        Partition::Heads => (net.backbone_blocks..grads.blocks.len()).collect(),
        Partition::Fields(fields) => {
            let mut b = Vec::with_capacity(2 * fields.len());
            for &f in fields {
                let &(w, bias) = net
                    .head_blocks
                    .get(f)
                    .ok_or_else(|| Error::invalid(format!("no head for field {f}")))?;
                b.extend([w, bias]);
            }
            b
        }
    };
    Ok(block_norm(grads, &blocks))
}

pub fn block_norm(grads: &Gradients, blocks: &[usize]) -> f64 {
    blocks
        .iter()
        .flat_map(|&b| grads.blocks[b].data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Least-squares slope of `ln(norm)` against `ln(T)`.
pub fn fit_loglog_slope(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::invalid(format!(
            "slope fit needs at least 3 points, got {}",
            series.len()
        )));
    }
    if series
        .iter()
        .any(|&(t, n)| !(t > 0.0 && n > 0.0 && t.is_finite() && n.is_finite()))
    {
        return Err(Error::invalid("slope fit needs positive finite task counts and norms"));
    }
    let pts: Vec<(f64, f64)> = series.iter().map(|&(t, n)| (t.ln(), n.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs at least two distinct task counts"));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::network::{LayerSpec, NetworkConfig};
    use crate::registry::TaskRegistry;
    use proptest::prelude::*;

    fn net() -> Network {
        let cfg = NetworkConfig {
            backbone: vec![LayerSpec {
                channels: 2,
                stride: 1,
                kernel: 3,
            }],
            ..Default::default()
        };
        Network::new(cfg, 1, &TaskRegistry::canonical(1).unwrap(), 0).unwrap()
    }

    #[test]
    fn probe_examples() {
        let n = net();
        let mut g = n.params.zeros_like();
        assert_eq!(grad_norm_probe(&n, &g, &Partition::Backbone).unwrap(), 0.0);
        g.blocks[0].data[0] = 3.0;
        assert_eq!(grad_norm_probe(&n, &g, &Partition::Backbone).unwrap(), 3.0);
        g.blocks[1].data[1] = 4.0;
        assert_eq!(grad_norm_probe(&n, &g, &Partition::Backbone).unwrap(), 5.0);
        assert_eq!(grad_norm_probe(&n, &g, &Partition::Heads).unwrap(), 0.0);
        let (w, _) = n.head_blocks[2];
        g.blocks[w].data[0] = 2.0;
        assert_eq!(grad_norm_probe(&n, &g, &Partition::Fields(vec![2])).unwrap(), 2.0);
        assert_eq!(grad_norm_probe(&n, &g, &Partition::Fields(vec![0, 1])).unwrap(), 0.0);
        assert!(grad_norm_probe(&n, &g, &Partition::Fields(vec![9])).is_err());
    }

    #[test]
    fn slope_examples() {
        let ts = [1.0, 3.0, 13.0, 32.0];
        let lin: Vec<_> = ts.iter().map(|&t| (t, 2.0 * t)).collect();
        assert!((fit_loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-9);
        let flat: Vec<_> = ts.iter().map(|&t| (t, 2.0)).collect();
        assert!(fit_loglog_slope(&flat).unwrap().abs() < 1e-12);
        let inv: Vec<_> = ts.iter().map(|&t| (t, 1.0 / t.sqrt())).collect();
        assert!((fit_loglog_slope(&inv).unwrap() + 0.5).abs() < 1e-9);
        assert!(fit_loglog_slope(&lin[..2]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn slope_recovers_power_laws(beta in -2.0f64..2.0, c in 0.01f64..100.0) {
            let s: Vec<_> = [4.0, 6.0, 16.0, 35.0].iter().map(|&t: &f64| (t, c * t.powf(beta))).collect();
            prop_assert!((fit_loglog_slope(&s).unwrap() - beta).abs() < 1e-9);
        }
    }
}
