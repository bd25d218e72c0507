//! Mini-batch training loop with per-example fork merging.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::merge::{backward_with_merge, BackwardResult, MergeStrategy, TaskGrad};
use super::network::Network;
use super::optim::{ema_update, Sgd, SgdConfig, DEFAULT_EMA_DECAY};
use super::params::{Gradients, ParamStore};
use super::probe::{block_norm, grad_norm_probe, Partition};
use crate::codec::{encode_targets, TargetSet};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{masked_field_loss, total_loss, TaskWeights, TotalLoss, DEFAULT_FOCAL_GAMMA};
use crate::registry::{Group, TaskRegistry};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    /// Learn a log-variance per task.
    pub uncertainty: bool,
    /// Fixed multiplier on detection-field weights.
    pub detection_bias: f64,
    /// Per-field weight overrides by name.
    pub lambda: BTreeMap<String, f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            uncertainty: true,
            detection_bias: 1.0,
            lambda: BTreeMap::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::invalid("focal gamma must be non-negative"));
        }
        if !(self.detection_bias > 0.0 && self.detection_bias.is_finite()) {
            return Err(Error::invalid("detection bias must be positive"));
        }
        Ok(())
    }

    pub fn weights(&self, registry: &TaskRegistry) -> Result<TaskWeights> {
        self.validate()?;
        let mut w = TaskWeights::with_bias(registry.specs(), self.detection_bias, self.uncertainty);
        for (name, &value) in &self.lambda {
            let spec = registry
                .by_name(name)
                .ok_or_else(|| Error::invalid(format!("weight given for unknown field '{name}'")))?;
            w.lambda[spec.id] = value;
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub epochs: usize,
    pub strategy: MergeStrategy,
    /// Reshuffle the example order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: SgdConfig::default(),
            batch_size: 4,
            ema_decay: DEFAULT_EMA_DECAY,
            epochs: 10,
            strategy: MergeStrategy::Accumulation,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.strategy.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One training input with its encoded targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Grid,
    pub targets: TargetSet,
}

impl Example {
    pub fn from_scene(scene: &Scene, net: &Network, registry: &TaskRegistry) -> Result<Self> {
        let geometry = net.geometry(scene.image_size[0], scene.image_size[1])?;
        Ok(Example {
            input: scene.input.clone(),
            targets: encode_targets(scene, registry, &geometry)?,
        })
    }
}

/// Loss and gradients of a single example.
#[derive(Clone, Debug)]
pub struct ExampleOutcome {
    /// Unweighted `L_t`.
    pub task_losses: Vec<f64>,
    pub active: Vec<bool>,
    pub total: TotalLoss,
    pub backward: BackwardResult,
}

/// Runs forward, losses and the merged backward pass for one example.
pub fn example_gradients(
    net: &Network,
    registry: &TaskRegistry,
    example: &Example,
    weights: &TaskWeights,
    strategy: &MergeStrategy,
    focal_gamma: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ExampleOutcome> {
    if example.targets.fields.len() != net.tasks() || registry.len() != net.tasks() {
        return Err(Error::shape("targets, registry and network disagree on the task count"));
    }
    let fwd = net.forward(&example.input)?;
    let mut losses = Vec::with_capacity(net.tasks());
    for (t, spec) in registry.specs().iter().enumerate() {
        losses.push(masked_field_loss(
            &fwd.fields.grids[t],
            &example.targets.fields[t],
            spec,
            focal_gamma,
        )?);
    }
    let active: Vec<bool> = losses.iter().map(|l| l.is_active()).collect();
    let n_eff = active.iter().filter(|&&a| a).count();
    let scale = match strategy {
        MergeStrategy::MeanLoss if n_eff > 0 => vec![1.0 / n_eff as f64; losses.len()],
        _ => vec![1.0; losses.len()],
    };
    let values: Vec<f64> = losses.iter().map(|l| l.value).collect();
    let total = total_loss(&values, weights, &scale, &active)?;
    let tasks: Vec<TaskGrad> = losses
        .iter()
        .enumerate()
        .map(|(t, l)| TaskGrad {
            field: t,
            weight: weights.effective(t),
            grad: &l.grad,
            active: active[t],
        })
        .collect();
    let backward = backward_with_merge(net, &fwd, &tasks, strategy, rng)?;
    Ok(ExampleOutcome {
        task_losses: values,
        active,
        total,
        backward,
    })
}

/// Fields whose heads exist in every registry: the detection group.
pub fn shared_heads(registry: &TaskRegistry) -> Vec<usize> {
    registry
        .specs()
        .iter()
        .filter(|s| s.group == Group::Detection)
        .map(|s| s.id)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    /// Mean total loss over the batch.
    pub loss: f64,
    /// Mean unweighted loss per task over the examples supervising it.
    pub task_losses: Vec<Option<f64>>,
    /// Norms of the applied (batch-mean) gradient.
    pub backbone_norm: f64,
    pub head_norm: f64,
    /// Examples of this step for which the fork bound held.
    pub bound_checks: usize,
    pub bound_violations: usize,
    /// PCGrad projections leaving a dot product below `-1e-9`.
    pub projection_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub task_losses: Vec<Option<f64>>,
    pub backbone_norm: f64,
    pub head_norm: f64,
    pub bound_checks: usize,
    pub bound_violations: usize,
    pub projection_violations: usize,
}

pub struct Trainer {
    pub net: Network,
    pub registry: TaskRegistry,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub weights: TaskWeights,
    pub ema: ParamStore,
    pub step: u64,
    pub epoch: usize,
    optimizer: Sgd,
    log_var_velocity: Vec<f64>,
    merge_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    head_partition: Partition,
}

impl Trainer {
    pub fn new(net: Network, registry: TaskRegistry, config: TrainConfig, loss: LossConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if net.tasks() != registry.len() || net.head_names.iter().zip(registry.specs()).any(|(n, s)| n != &s.name) {
            return Err(Error::invalid("network heads do not match the task registry"));
        }
        let weights = loss.weights(&registry)?;
        let optimizer = Sgd::new(config.optimizer.clone(), &net.params)?;
        let head_partition = Partition::Fields(shared_heads(&registry));
        Ok(Trainer {
            ema: net.params.clone(),
            log_var_velocity: vec![0.0; registry.len()],
            merge_rng: crate::seed::stream(seed, "merge"),
            order_rng: crate::seed::stream(seed, "order"),
            net,
            registry,
            config,
            loss,
            weights,
            step: 0,
            epoch: 0,
            optimizer,
            head_partition,
        })
    }

    /// Batch-mean gradients without updating anything but the merge stream.
    pub fn batch_gradients(&mut self, batch: &[&Example]) -> Result<(Gradients, Vec<f64>, StepReport)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let strategy = self.config.strategy;
        let tasks = self.net.tasks();
        let mut grads = self.net.params.zeros_like();
        let mut log_var_grad = vec![0.0; tasks];
        let mut loss = 0.0;
        let mut task_sum = vec![0.0; tasks];
        let mut task_count = vec![0usize; tasks];
        let (mut checks, mut violations, mut projection_violations) = (0, 0, 0);
        // fixed ascending reduction order
        for example in batch {
            let rng = strategy.needs_rng().then_some(&mut self.merge_rng);
            let out = example_gradients(
                &self.net,
                &self.registry,
                example,
                &self.weights,
                &strategy,
                self.loss.focal_gamma,
                rng,
            )?;
            grads.add_assign(&out.backward.grads);
            loss += out.total.value;
            for (g, d) in log_var_grad.iter_mut().zip(&out.total.log_var_grad) {
                *g += d;
            }
            for t in 0..tasks {
                if out.active[t] {
                    task_sum[t] += out.task_losses[t];
                    task_count[t] += 1;
                }
            }
            checks += 1;
            if !out.backward.fork.bound_holds() {
                violations += 1;
            }
            projection_violations += out.backward.projections.iter().filter(|p| p.dot_after < -1e-9).count();
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        log_var_grad.iter_mut().for_each(|g| *g *= inv);
        let report = StepReport {
            step: self.step,
            loss: loss * inv,
            task_losses: task_sum
                .iter()
                .zip(&task_count)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            backbone_norm: grad_norm_probe(&self.net, &grads, &Partition::Backbone)?,
            head_norm: grad_norm_probe(&self.net, &grads, &self.head_partition)?,
            bound_checks: checks,
            bound_violations: violations,
            projection_violations,
        };
        Ok((grads, log_var_grad, report))
    }

    pub fn train_step(&mut self, batch: &[&Example]) -> Result<StepReport> {
        let (grads, log_var_grad, report) = self.batch_gradients(batch)?;
        self.optimizer.step(&mut self.net.params, &grads)?;
        if let Some(s) = &mut self.weights.log_var {
            let SgdConfig {
                learning_rate,
                momentum,
                ..
            } = self.config.optimizer;
            for ((s, v), g) in s.iter_mut().zip(&mut self.log_var_velocity).zip(&log_var_grad) {
                *v = momentum * *v + g;
                *s -= learning_rate * *v;
            }
        }
        ema_update(&mut self.ema, &self.net.params, self.config.ema_decay)?;
        self.step += 1;
        Ok(report)
    }

    pub fn train_epoch(&mut self, examples: &[Example]) -> Result<EpochReport> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut self.order_rng);
        }
        let tasks = self.net.tasks();
        let mut steps = 0;
        let (mut loss, mut bb, mut hd) = (0.0, 0.0, 0.0);
        let mut task_sum = vec![0.0; tasks];
        let mut task_count = vec![0usize; tasks];
        let (mut checks, mut violations, mut pv) = (0, 0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let r = self.train_step(&batch)?;
            steps += 1;
            loss += r.loss;
            bb += r.backbone_norm;
            hd += r.head_norm;
            for (t, l) in r.task_losses.iter().enumerate() {
                if let Some(l) = l {
                    task_sum[t] += l;
                    task_count[t] += 1;
                }
            }
            checks += r.bound_checks;
            violations += r.bound_violations;
            pv += r.projection_violations;
        }
        self.epoch += 1;
        let k = steps as f64;
        Ok(EpochReport {
            epoch: self.epoch,
            steps,
            loss: loss / k,
            task_losses: task_sum
                .iter()
                .zip(&task_count)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            backbone_norm: bb / k,
            head_norm: hd / k,
            bound_checks: checks,
            bound_violations: violations,
            projection_violations: pv,
        })
    }

    /// Norm of all head gradients, for diagnostics beyond the shared heads.
    pub fn all_heads_norm(&self, grads: &Gradients) -> f64 {
        block_norm(
            grads,
            &(self.net.backbone_blocks..grads.blocks.len()).collect::<Vec<_>>(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::network::{LayerSpec, NetworkConfig};
    use crate::scene::Instance;

    fn setup(strategy: MergeStrategy) -> (Trainer, Vec<Example>) {
        let registry = TaskRegistry::canonical(3).unwrap();
        let cfg = NetworkConfig {
            backbone: vec![
                LayerSpec {
                    channels: 4,
                    stride: 2,
                    kernel: 3,
                },
                LayerSpec {
                    channels: 4,
                    stride: 1,
                    kernel: 3,
                },
            ],
            ..Default::default()
        };
        let net = Network::new(cfg, 2, &registry, 5).unwrap();
        let mut examples = Vec::new();
        for i in 0..3 {
            let mut input = Grid::zeros(2, 8, 12);
            input
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v = ((i * 7 + j) % 5) as f64 / 5.0);
            let mut attributes = BTreeMap::new();
            attributes.insert("crossing".to_string(), Some((i % 2) as f64));
            attributes.insert("time_to_crossing".to_string(), if i == 1 { None } else { Some(2.0) });
            let scene = Scene {
                image_size: [12, 8],
                instances: vec![Instance {
                    center: [5.0, 4.0],
                    width: 6.0,
                    height: 6.0,
                    attributes,
                    occlusion: 0.0,
                }],
                input,
            };
            examples.push(Example::from_scene(&scene, &net, &registry).unwrap());
        }
        let config = TrainConfig {
            strategy,
            batch_size: 2,
            optimizer: SgdConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        (
            Trainer::new(net, registry, config, LossConfig::default(), 1).unwrap(),
            examples,
        )
    }

    #[test]
    fn epochs_are_deterministic() {
        let run = || {
            let (mut t, ex) = setup(MergeStrategy::ForkRandom);
            let r = t.train_epoch(&ex).unwrap();
            (r, t.net.params, t.weights)
        };
        let (a, pa, wa) = run();
        let (b, pb, wb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(wa, wb);
        assert_eq!(a.steps, 2);
        assert_eq!(a.bound_violations, 0);
        assert_eq!(a.bound_checks, 3);
    }

    #[test]
    fn training_reduces_loss() {
        let (mut t, ex) = setup(MergeStrategy::fork_power());
        let first = t.train_epoch(&ex).unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = t.train_epoch(&ex).unwrap().loss;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn loss_value_is_strategy_independent() {
        let (mut a, ex) = setup(MergeStrategy::Accumulation);
        let (mut b, _) = setup(MergeStrategy::ForkSample);
        let (mut m, _) = setup(MergeStrategy::MeanLoss);
        let batch: Vec<&Example> = ex.iter().collect();
        let ra = a.batch_gradients(&batch).unwrap().2;
        let rb = b.batch_gradients(&batch).unwrap().2;
        let rm = m.batch_gradients(&batch).unwrap().2;
        assert_eq!(ra.loss, rb.loss);
        assert!(rm.loss < ra.loss);
    }

    #[test]
    fn mismatched_registry_rejected() {
        let (t, _) = setup(MergeStrategy::Accumulation);
        let other = TaskRegistry::canonical(1).unwrap();
        assert!(Trainer::new(t.net, other, TrainConfig::default(), LossConfig::default(), 0).is_err());
    }
}
