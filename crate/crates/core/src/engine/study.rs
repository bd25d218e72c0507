//! Gradient-norm scaling study: how backbone and head gradient norms grow
//! with the number of tasks under each merge strategy.

use serde::{Deserialize, Serialize};

use super::merge::MergeStrategy;
use super::network::{Network, NetworkConfig};
use super::optim::SgdConfig;
use super::probe::fit_loglog_slope;
use super::trainer::{Example, LossConfig, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::registry::TaskRegistry;
use crate::synth::{self, GenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Attribute-set sizes to sweep; each must be a canonical set size.
    pub attribute_sets: Vec<usize>,
    pub strategies: Vec<MergeStrategy>,
    /// Number of seeds; seed `k` of a run with base seed `s` is `s + k`.
    pub seeds: usize,
    /// Epochs averaged per cell.
    pub epochs: usize,
    pub scenes: usize,
    /// Learning rate used by every cell. Lower than the training default so
    /// the averaged norms stay close to their values at initialisation; a
    /// small backbone drifts within a couple of epochs at the training rate.
    pub learning_rate: f64,
    /// Loss weight on the detection fields. Keeps the geometric fields from
    /// dominating the per-task gradient magnitudes.
    pub detection_weight: f64,
    /// Study scenes annotate every attribute so all tasks are active.
    pub missing_probability: f64,
    /// Uncertainty weighting would rescale tasks over time; off by default.
    pub uncertainty: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            attribute_sets: vec![1, 3, 13, 32],
            strategies: vec![
                MergeStrategy::Accumulation,
                MergeStrategy::MeanLoss,
                MergeStrategy::ForkAverage,
                MergeStrategy::fork_power(),
            ],
            seeds: 3,
            epochs: 2,
            scenes: 16,
            learning_rate: 5e-5,
            detection_weight: 0.75,
            missing_probability: 0.0,
            uncertainty: false,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attribute_sets.is_empty() || self.strategies.is_empty() {
            return Err(Error::invalid(
                "the study needs at least one attribute set and one strategy",
            ));
        }
        if self.seeds == 0 || self.epochs == 0 || self.scenes == 0 {
            return Err(Error::invalid("seeds, epochs and scenes must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("study learning_rate must be positive"));
        }
        if !(self.detection_weight > 0.0 && self.detection_weight.is_finite()) {
            return Err(Error::invalid("study detection_weight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.missing_probability) {
            return Err(Error::invalid("study missing_probability must lie in [0, 1]"));
        }
        for &a in &self.attribute_sets {
            TaskRegistry::canonical(a)?;
        }
        for s in &self.strategies {
            s.validate()?;
        }
        Ok(())
    }
}

/// Everything a study cell needs besides its coordinates. The study protocol
/// fields of [`StudyConfig`] override the matching generator, optimizer and
/// loss settings.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySetup {
    pub gen: GenConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub study: StudyConfig,
    pub seed: u64,
}

/// One `(strategy, attribute set, seed)` training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub strategy: MergeStrategy,
    pub attributes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub tasks: usize,
    pub backbone: f64,
    pub heads: f64,
    pub epochs: usize,
    pub bound_checks: usize,
    pub bound_violations: usize,
}

impl StudySetup {
    pub fn validate(&self) -> Result<()> {
        self.study.validate()?;
        self.gen.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let rendered = self.gen.registry()?;
        for &a in &self.study.attribute_sets {
            if !TaskRegistry::canonical(a)?.is_subset_of(&rendered) {
                return Err(Error::invalid(format!(
                    "attribute set {a} is not rendered by the generator (attributes = {})",
                    self.gen.attributes
                )));
            }
        }
        Ok(())
    }

    /// Cells in the fixed order strategy, attribute set, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &strategy in &self.study.strategies {
            for &attributes in &self.study.attribute_sets {
                for k in 0..self.study.seeds {
                    out.push(Cell {
                        strategy,
                        attributes,
                        seed: self.seed.wrapping_add(k as u64),
                    });
                }
            }
        }
        out
    }

    pub fn run_cell(&self, cell: &Cell) -> Result<CellResult> {
        let registry = TaskRegistry::canonical(cell.attributes)?;
        let gen = GenConfig {
            seed: cell.seed,
            missing_probability: self.study.missing_probability,
            ..self.gen.clone()
        };
        let net = Network::new(self.network.clone(), gen.input_channels()?, &registry, cell.seed)?;
        let examples = synth::generate_scenes(&gen, self.study.scenes)?
            .iter()
            .map(|s| Example::from_scene(s, &net, &registry))
            .collect::<Result<Vec<_>>>()?;
        let train = TrainConfig {
            strategy: cell.strategy,
            optimizer: SgdConfig {
                learning_rate: self.study.learning_rate,
                ..self.train.optimizer.clone()
            },
            ..self.train.clone()
        };
        let loss = LossConfig {
            uncertainty: self.study.uncertainty,
            detection_bias: self.study.detection_weight,
            ..self.loss.clone()
        };
        let mut trainer = Trainer::new(net, registry.clone(), train, loss, cell.seed)?;
        let (mut bb, mut hd, mut steps, mut checks, mut violations) = (0.0, 0.0, 0usize, 0, 0);
        for _ in 0..self.study.epochs {
            let r = trainer.train_epoch(&examples)?;
            bb += r.backbone_norm * r.steps as f64;
            hd += r.head_norm * r.steps as f64;
            steps += r.steps;
            checks += r.bound_checks;
            violations += r.bound_violations;
        }
        Ok(CellResult {
            cell: *cell,
            tasks: registry.len(),
            backbone: bb / steps as f64,
            heads: hd / steps as f64,
            epochs: self.study.epochs,
            bound_checks: checks,
            bound_violations: violations,
        })
    }

    pub fn run(&self) -> Result<GradReport> {
        self.validate()?;
        let results = self
            .cells()
            .iter()
            .map(|c| self.run_cell(c))
            .collect::<Result<Vec<_>>>()?;
        self.assemble(&results)
    }

    /// Averages cell results over seeds and fits one slope per strategy and partition.
    pub fn assemble(&self, results: &[CellResult]) -> Result<GradReport> {
        let mut rows = Vec::new();
        let mut slopes = Vec::new();
        for &strategy in &self.study.strategies {
            let mut series = [Vec::new(), Vec::new()];
            for &attributes in &self.study.attribute_sets {
                let cell: Vec<&CellResult> = results
                    .iter()
                    .filter(|r| r.cell.strategy == strategy && r.cell.attributes == attributes)
                    .collect();
                if cell.is_empty() {
                    return Err(Error::invalid(format!(
                        "no results for {strategy} with {attributes} attributes"
                    )));
                }
                let tasks = cell[0].tasks;
                let k = cell.len() as f64;
                for (p, partition) in ["backbone", "heads"].into_iter().enumerate() {
                    let mean = cell
                        .iter()
                        .map(|r| if p == 0 { r.backbone } else { r.heads })
                        .sum::<f64>()
                        / k;
                    series[p].push((tasks as f64, mean));
                    rows.push(GradRow {
                        kind: RowKind::Norm,
                        strategy: strategy.to_string(),
                        tasks: Some(tasks),
                        attributes: Some(attributes),
                        partition: partition.to_string(),
                        mean_norm: Some(mean),
                        epochs_averaged: Some(cell[0].epochs),
                        seeds: Some(cell.len()),
                        slope: None,
                        message: String::new(),
                    });
                }
            }
            for (p, partition) in ["backbone", "heads"].into_iter().enumerate() {
                match fit_loglog_slope(&series[p]) {
                    Ok(slope) => {
                        slopes.push((strategy, partition.to_string(), slope));
                        rows.push(GradRow {
                            kind: RowKind::Slope,
                            strategy: strategy.to_string(),
                            tasks: None,
                            attributes: None,
                            partition: partition.to_string(),
                            mean_norm: None,
                            epochs_averaged: None,
                            seeds: None,
                            slope: Some(slope),
                            message: String::new(),
                        });
                    }
                    Err(e) => rows.push(GradRow {
                        kind: RowKind::Warning,
                        strategy: strategy.to_string(),
                        tasks: None,
                        attributes: None,
                        partition: partition.to_string(),
                        mean_norm: None,
                        epochs_averaged: None,
                        seeds: None,
                        slope: None,
                        message: format!("slope skipped: {e}"),
                    }),
                }
            }
        }
        Ok(GradReport {
            rows,
            slopes,
            bound_checks: results.iter().map(|r| r.bound_checks).sum(),
            bound_violations: results.iter().map(|r| r.bound_violations).sum(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Norm,
    Slope,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub kind: RowKind,
    pub strategy: String,
    /// Number of fields.
    #[serde(rename = "T")]
    pub tasks: Option<usize>,
    pub attributes: Option<usize>,
    pub partition: String,
    pub mean_norm: Option<f64>,
    pub epochs_averaged: Option<usize>,
    pub seeds: Option<usize>,
    pub slope: Option<f64>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub slopes: Vec<(MergeStrategy, String, f64)>,
    pub bound_checks: usize,
    pub bound_violations: usize,
}

impl GradReport {
    pub fn slope(&self, strategy: &MergeStrategy, partition: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|(s, p, _)| s == strategy && p == partition)
            .map(|&(_, _, v)| v)
    }

    pub fn norm_rows(&self) -> impl Iterator<Item = &GradRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Norm)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::network::LayerSpec;

    fn tiny(strategies: Vec<MergeStrategy>, sets: Vec<usize>) -> StudySetup {
        StudySetup {
            gen: GenConfig {
                image_size: [48, 32],
                instances: [1, 1],
                box_width: [16.0, 20.0],
                box_height: [16.0, 20.0],
                ..Default::default()
            },
            network: NetworkConfig {
                backbone: vec![
                    LayerSpec {
                        channels: 4,
                        stride: 2,
                        kernel: 3,
                    },
                    LayerSpec {
                        channels: 4,
                        stride: 2,
                        kernel: 3,
                    },
                ],
                ..Default::default()
            },
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            study: StudyConfig {
                attribute_sets: sets,
                strategies,
                seeds: 1,
                epochs: 1,
                scenes: 4,
                ..Default::default()
            },
            seed: 0,
        }
    }

    #[test]
    fn single_cell_gives_two_rows_and_warnings() {
        let report = tiny(vec![MergeStrategy::Accumulation], vec![1]).run().unwrap();
        assert_eq!(report.norm_rows().count(), 2);
        assert!(report.slopes.is_empty());
        assert_eq!(report.rows.iter().filter(|r| r.kind == RowKind::Warning).count(), 2);
        assert!(report.norm_rows().all(|r| r.mean_norm.unwrap() > 0.0));
        assert_eq!(report.bound_violations, 0);
    }

    #[test]
    fn counting_and_mean_loss_head_scaling() {
        let setup = tiny(
            vec![MergeStrategy::Accumulation, MergeStrategy::MeanLoss],
            vec![1, 3, 13],
        );
        let report = setup.run().unwrap();
        assert_eq!(report.norm_rows().count(), 12);
        assert_eq!(report.slopes.len(), 4);
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("kind,strategy,T,attributes,partition,mean_norm,epochs_averaged,seeds,slope,message\n"));
        assert_eq!(csv, setup.run().unwrap().to_csv().unwrap());
    }
}
