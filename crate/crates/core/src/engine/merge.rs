//! How per-task gradients combine at the fork.
//!
//! Head parameters always receive `lambda_t dL_t/dtheta`. At the shared
//! feature `z` the branch gradients are summed with per-task coefficients
//! `kappa_t`, which only changes the backward pass.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::network::{Forward, Network};
use super::params::Gradients;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_POWER: f64 = 0.5;

/// Serialized as its display name, e.g. `"fork-power"` or `"fork-power:0.25"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MergeStrategy {
    /// `kappa_t = 1`.
    Accumulation,
    /// Every weight divided by `T~` on both sides of the fork.
    MeanLoss,
    /// One task, chosen uniformly, reaches the backbone.
    ForkSample,
    /// `kappa ~ Dir(1)`.
    ForkRandom,
    /// `kappa_t = 1 / T~`.
    ForkAverage,
    /// `kappa_t = 1 / T~^beta`.
    ForkPower { beta: f64 },
    /// Projection of conflicting per-task gradients.
    PcGrad,
}

impl MergeStrategy {
    pub fn fork_power() -> Self {
        MergeStrategy::ForkPower { beta: DEFAULT_POWER }
    }

    pub fn needs_rng(&self) -> bool {
        matches!(
            self,
            MergeStrategy::ForkSample | MergeStrategy::ForkRandom | MergeStrategy::PcGrad
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MergeStrategy::ForkPower { beta } if !(*beta > 0.0) => {
                Err(Error::invalid("fork-power beta must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// The strategies compared in the ablation, in table order.
    pub fn all() -> Vec<MergeStrategy> {
        vec![
            MergeStrategy::Accumulation,
            MergeStrategy::MeanLoss,
            MergeStrategy::ForkSample,
            MergeStrategy::ForkRandom,
            MergeStrategy::ForkAverage,
            MergeStrategy::fork_power(),
            MergeStrategy::PcGrad,
        ]
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeStrategy::Accumulation => write!(f, "accumulation"),
            MergeStrategy::MeanLoss => write!(f, "mean-loss"),
            MergeStrategy::ForkSample => write!(f, "fork-sample"),
            MergeStrategy::ForkRandom => write!(f, "fork-random"),
            MergeStrategy::ForkAverage => write!(f, "fork-average"),
            MergeStrategy::ForkPower { beta } if *beta == DEFAULT_POWER => write!(f, "fork-power"),
            MergeStrategy::ForkPower { beta } => write!(f, "fork-power:{beta}"),
            MergeStrategy::PcGrad => write!(f, "pcgrad"),
        }
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n.to_string(), Some(a.to_string())),
            None => (lower, None),
        };
        let strategy = match (name.as_str(), arg) {
            ("accumulation", None) => MergeStrategy::Accumulation,
            ("mean-loss", None) => MergeStrategy::MeanLoss,
            ("fork-sample", None) => MergeStrategy::ForkSample,
            ("fork-random", None) => MergeStrategy::ForkRandom,
            ("fork-average", None) => MergeStrategy::ForkAverage,
            ("fork-power", None) => MergeStrategy::fork_power(),
            ("fork-power", Some(b)) => MergeStrategy::ForkPower {
                beta: b
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad fork-power exponent '{b}'")))?,
            },
            ("pcgrad", None) => MergeStrategy::PcGrad,
            _ => return Err(Error::invalid(format!("unknown merge strategy '{s}'"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl TryFrom<String> for MergeStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MergeStrategy> for String {
    fn from(s: MergeStrategy) -> String {
        s.to_string()
    }
}

/// Fork coefficients for `effective_tasks` supervised tasks.
pub fn sample_kappa<R: Rng + ?Sized>(
    strategy: &MergeStrategy,
    effective_tasks: usize,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    let n = effective_tasks;
    if n == 0 {
        return Ok(Vec::new());
    }
    let need_rng = || Error::invalid(format!("strategy {strategy} needs a random generator"));
    Ok(match strategy {
        MergeStrategy::Accumulation | MergeStrategy::MeanLoss | MergeStrategy::PcGrad => vec![1.0; n],
        MergeStrategy::ForkAverage => vec![1.0 / n as f64; n],
        MergeStrategy::ForkPower { beta } => vec![1.0 / (n as f64).powf(*beta); n],
        MergeStrategy::ForkSample => {
            let rng = rng.ok_or_else(need_rng)?;
            let mut k = vec![0.0; n];
            k[rng.gen_range(0..n)] = 1.0;
            k
        }
        MergeStrategy::ForkRandom => {
            let rng = rng.ok_or_else(need_rng)?;
            // normalized i.i.d. Exp(1) draws are uniform on the simplex
            let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|v| v / total).collect()
        }
    })
}

/// Raw-field gradient of one task's (unweighted) loss.
#[derive(Clone, Debug)]
pub struct TaskGrad<'a> {
    pub field: usize,
    /// `lambda_t` already including any uncertainty factor.
    pub weight: f64,
    pub grad: &'a Grid,
    pub active: bool,
}

/// Norms measured at the fork for one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForkStats {
    /// `|| sum_t lambda_t dL_t/dz ||`.
    pub accumulated_norm: f64,
    /// `|| lambda_t dL_t/dz ||` for each supervised task.
    pub task_norms: Vec<f64>,
    /// Norm of the merged gradient actually sent into the backbone.
    pub merged_norm: f64,
}

impl ForkStats {
    pub fn sum_of_norms(&self) -> f64 {
        self.task_norms.iter().sum()
    }

    pub fn max_norm(&self) -> f64 {
        self.task_norms.iter().copied().fold(0.0, f64::max)
    }

    /// Checks `||dL/dz|| <= sum_t ||.|| <= T~ max_t ||.||` up to rounding.
    pub fn bound_holds(&self) -> bool {
        let sum = self.sum_of_norms();
        let tol = 1e-9 * (1.0 + sum);
        self.accumulated_norm <= sum + tol && sum <= self.task_norms.len() as f64 * self.max_norm() + tol
    }
}

/// A PCGrad projection event: gradient `task` was projected against `other`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub task: usize,
    pub other: usize,
    /// Dot product after the projection.
    pub dot_after: f64,
}

#[derive(Clone, Debug)]
pub struct BackwardResult {
    pub grads: Gradients,
    pub fork: ForkStats,
    /// Coefficient per field (0 for unsupervised fields).
    pub kappa: Vec<f64>,
    pub effective_tasks: usize,
    pub projections: Vec<Projection>,
}

struct BranchGrads {
    /// Head parameter gradients `(weight, bias)` per active task.
    heads: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// `lambda_t dL_t/dz` per active task.
    at_fork: Vec<Vec<f64>>,
}

fn branch_backward(fwd: &Forward, net: &Network, tasks: &[(usize, f64, &Grid)]) -> Result<BranchGrads> {
    let mut heads = Vec::with_capacity(tasks.len());
    let mut at_fork = Vec::with_capacity(tasks.len());
    for &(field, weight, grad) in tasks {
        let seed: Vec<f64> = grad.data().iter().map(|g| g * weight).collect();
        let node = fwd.heads[field];
        let mut g = fwd.tape.backward(&[(node, &seed)], Some(fwd.fork))?;
        let (wi, bi) = net.head_blocks[field];
        let wnode = fwd.param_nodes[wi];
        let bnode = fwd.param_nodes[bi];
        let gw = g
            .take(wnode)
            .unwrap_or_else(|| vec![0.0; net.params.blocks[wi].data.len()]);
        let gb = g
            .take(bnode)
            .unwrap_or_else(|| vec![0.0; net.params.blocks[bi].data.len()]);
        let gz = g
            .take(fwd.fork)
            .unwrap_or_else(|| vec![0.0; fwd.tape.value(fwd.fork).len()]);
        heads.push((field, gw, gb));
        at_fork.push(gz);
    }
    Ok(BranchGrads { heads, at_fork })
}

fn backbone_backward(fwd: &Forward, net: &Network, seed: &[f64], grads: &mut Gradients) -> Result<()> {
    let g = fwd.tape.backward(&[(fwd.fork, seed)], None)?;
    for block in (0..net.params.len()).filter(|&b| net.is_backbone_block(b)) {
        if let Some(v) = g.get(fwd.param_nodes[block]) {
            grads.blocks[block].data.copy_from_slice(v);
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reverse pass for one example with the given merge strategy.
pub fn backward_with_merge<R: Rng + ?Sized>(
    net: &Network,
    fwd: &Forward,
    tasks: &[TaskGrad<'_>],
    strategy: &MergeStrategy,
    mut rng: Option<&mut R>,
) -> Result<BackwardResult> {
    strategy.validate()?;
    if strategy.needs_rng() && rng.is_none() {
        return Err(Error::invalid(format!("strategy {strategy} needs a random generator")));
    }
    let active: Vec<&TaskGrad> = tasks.iter().filter(|t| t.active).collect();
    let n_eff = active.len();
    let scale = if *strategy == MergeStrategy::MeanLoss && n_eff > 0 {
        1.0 / n_eff as f64
    } else {
        1.0
    };
    let weighted: Vec<(usize, f64, &Grid)> = active.iter().map(|t| (t.field, t.weight * scale, t.grad)).collect();
    let branches = branch_backward(fwd, net, &weighted)?;

    let mut grads = net.params.zeros_like();
    for (field, gw, gb) in &branches.heads {
        let (wi, bi) = net.head_blocks[*field];
        grads.blocks[wi].data.copy_from_slice(gw);
        grads.blocks[bi].data.copy_from_slice(gb);
    }

    let zlen = fwd.tape.value(fwd.fork).len();
    let mut accumulated = vec![0.0; zlen];
    for g in &branches.at_fork {
        accumulated.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let task_norms: Vec<f64> = branches.at_fork.iter().map(|g| norm(g)).collect();

    let kappa_active = sample_kappa(strategy, n_eff, rng.as_deref_mut())?;
    let mut kappa = vec![0.0; net.tasks()];
    for (t, k) in active.iter().zip(&kappa_active) {
        kappa[t.field] = *k;
    }

    let mut projections = Vec::new();
    let merged_norm;
    if *strategy == MergeStrategy::PcGrad {
        // full-network per-task gradients, projected and summed
        let mut per_task = Vec::with_capacity(n_eff);
        for (k, (field, gw, gb)) in branches.heads.iter().enumerate() {
            let mut g = net.params.zeros_like();
            let (wi, bi) = net.head_blocks[*field];
            g.blocks[wi].data.copy_from_slice(gw);
            g.blocks[bi].data.copy_from_slice(gb);
            backbone_backward(fwd, net, &branches.at_fork[k], &mut g)?;
            per_task.push(g.flatten());
        }
        let rng = rng.expect("checked above");
        let (merged, events) = pcgrad_merge(&per_task, rng);
        projections = events
            .into_iter()
            .map(|p| Projection {
                task: active[p.task].field,
                other: active[p.other].field,
                dot_after: p.dot_after,
            })
            .collect();
        grads.unflatten(&merged);
        merged_norm = f64::NAN;
    } else {
        let mut merged = vec![0.0; zlen];
        for (g, k) in branches.at_fork.iter().zip(&kappa_active) {
            merged.iter_mut().zip(g).for_each(|(a, b)| *a += k * b);
        }
        merged_norm = norm(&merged);
        if n_eff > 0 {
            backbone_backward(fwd, net, &merged, &mut grads)?;
        }
    }

    Ok(BackwardResult {
        grads,
        fork: ForkStats {
            accumulated_norm: norm(&accumulated),
            task_norms,
            merged_norm,
        },
        kappa,
        effective_tasks: n_eff,
        projections,
    })
}

/// PCGrad projection: each gradient is projected onto the normal plane of
/// every other gradient it conflicts with, visited in a random order.
/// Returns the projected gradients and the projection events, which index into `grads`.
pub fn pcgrad_project<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> (Vec<Vec<f64>>, Vec<Projection>) {
    let n = grads.len();
    let mut events = Vec::new();
    let projected = (0..n)
        .map(|i| {
            let mut g = grads[i].clone();
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(rng);
            for j in others {
                let d = dot(&g, &grads[j]);
                let nn = dot(&grads[j], &grads[j]);
                if d < 0.0 && nn > 0.0 {
                    let c = d / nn;
                    g.iter_mut().zip(&grads[j]).for_each(|(a, b)| *a -= c * b);
                    events.push(Projection {
                        task: i,
                        other: j,
                        dot_after: dot(&g, &grads[j]),
                    });
                }
            }
            g
        })
        .collect();
    (projected, events)
}

/// PCGrad merge: the sum of the [`pcgrad_project`]ed gradients.
pub fn pcgrad_merge<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> (Vec<f64>, Vec<Projection>) {
    let dim = grads.first().map_or(0, Vec::len);
    let (projected, events) = pcgrad_project(grads, rng);
    let mut merged = vec![0.0; dim];
    for g in &projected {
        merged.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    (merged, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kappa_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = sample_kappa(&MergeStrategy::fork_power(), 4, Some(&mut rng)).unwrap();
        assert_eq!(k, vec![0.5; 4]);
        let avg = sample_kappa::<ChaCha8Rng>(&MergeStrategy::ForkAverage, 1, None).unwrap();
        let acc = sample_kappa::<ChaCha8Rng>(&MergeStrategy::Accumulation, 1, None).unwrap();
        assert_eq!(avg, acc);
        for n in 1..20 {
            let k = sample_kappa(&MergeStrategy::ForkRandom, n, Some(&mut rng)).unwrap();
            assert!(k.iter().all(|&v| v >= 0.0));
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let s = sample_kappa(&MergeStrategy::ForkSample, n, Some(&mut rng)).unwrap();
            assert_eq!(s.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(s.iter().sum::<f64>(), 1.0);
        }
        assert!(sample_kappa::<ChaCha8Rng>(&MergeStrategy::ForkRandom, 3, None).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in MergeStrategy::all() {
            assert_eq!(s.to_string().parse::<MergeStrategy>().unwrap(), s);
        }
        assert_eq!(
            "fork-power:0.25".parse::<MergeStrategy>().unwrap(),
            MergeStrategy::ForkPower { beta: 0.25 }
        );
        assert!("fork-power:0".parse::<MergeStrategy>().is_err());
        assert!("nope".parse::<MergeStrategy>().is_err());
    }

    #[test]
    fn pcgrad_hand_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g1 = vec![1.0, 0.0];
        let g2 = vec![-1.0, 1.0];
        let (merged, events) = pcgrad_merge(&[g1.clone(), g2.clone()], &mut rng);
        // g1 -> (0.5, 0.5); g2 -> g2 - (-1/1) g1 = (0, 1)
        assert_eq!(events.len(), 2);
        assert_eq!(merged, vec![0.5, 1.5]);
        let (projected, _) = pcgrad_project(&[g1, g2.clone()], &mut rng);
        assert_eq!(projected, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(dot(&projected[0], &g2), 0.0);
        for e in events {
            assert!(e.dot_after >= -1e-12);
        }
    }
}
