//! Instance-wise decoding of a [`FieldSet`] into [`Detection`]s.
//!
//! Cells above the confidence threshold vote for the centre their `center`
//! field points at; the votes are grouped with OPTICS, and every field is then
//! aggregated over each group with confidence-weighted averages.

pub mod optics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::FieldSet;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::logistic;
use crate::registry::{activation_for, Activation, AttributeKind, TaskRegistry, CENTER, HEIGHT, WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    /// Confidence threshold on `logistic(S)`.
    pub gamma: f64,
    pub optics_min_cluster: usize,
    /// Grid units.
    pub optics_max_radius: f64,
    /// Reachability cut as a fraction of `optics_max_radius`.
    pub optics_cluster_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            gamma: 0.2,
            optics_min_cluster: 10,
            optics_max_radius: 5.0,
            optics_cluster_threshold: 0.5,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("gamma must lie in (0, 1)"));
        }
        if self.optics_min_cluster < 2 {
            return Err(Error::invalid("optics_min_cluster must be at least 2"));
        }
        if !(self.optics_max_radius > 0.0 && self.optics_cluster_threshold > 0.0) {
            return Err(Error::invalid("OPTICS radius and threshold must be positive"));
        }
        Ok(())
    }

    /// Absolute reachability cut in grid units.
    pub fn cut_radius(&self) -> f64 {
        self.optics_cluster_threshold * self.optics_max_radius
    }
}

/// Group of grid cells assigned to one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub cells: Vec<(usize, usize)>,
}

/// Per-attribute prediction for a detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    /// Value of a continuous attribute, or probability of a binary one.
    Scalar(f64),
    /// Class distribution of a categorical attribute.
    Distribution(Vec<f64>),
}

impl Prediction {
    /// Probability assigned to class `v` (binary: 0 or 1).
    pub fn class_probability(&self, v: usize) -> f64 {
        match self {
            Prediction::Scalar(p) => {
                if v == 1 {
                    *p
                } else {
                    1.0 - p
                }
            }
            Prediction::Distribution(d) => d.get(v).copied().unwrap_or(0.0),
        }
    }

    pub fn predicted_class(&self) -> usize {
        match self {
            Prediction::Scalar(p) => usize::from(*p >= 0.5),
            Prediction::Distribution(d) => crate::math::argmax(d),
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Prediction::Scalar(v) => *v,
            Prediction::Distribution(d) => crate::math::argmax(d) as f64,
        }
    }
}

/// A decoded instance, in grid units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f64,
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    /// Keyed by attribute name.
    pub attributes: BTreeMap<String, Prediction>,
}

/// Cells with `logistic(S) > gamma`, in row-major order.
pub fn select_cells(confidence: &Grid, gamma: f64) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for y in 0..confidence.height() {
        for x in 0..confidence.width() {
            if logistic(confidence.get(0, y, x)) > gamma {
                cells.push((x, y));
            }
        }
    }
    cells
}

/// `cell + V(cell)` for each cell.
pub fn estimate_centers(cells: &[(usize, usize)], center_field: &Grid) -> Vec<[f64; 2]> {
    cells
        .iter()
        .map(|&(x, y)| {
            [
                x as f64 + center_field.get(0, y, x),
                y as f64 + center_field.get(1, y, x),
            ]
        })
        .collect()
}

/// Clusters estimated centres; each cluster lists the cells that voted for it.
pub fn optics_cluster(cells: &[(usize, usize)], points: &[[f64; 2]], params: &DecodeParams) -> Vec<Cluster> {
    optics::cluster_points(
        points,
        params.optics_min_cluster,
        params.optics_max_radius,
        params.optics_cluster_threshold,
    )
    .into_iter()
    .enumerate()
    .map(|(id, members)| Cluster {
        id,
        cells: members.into_iter().map(|i| cells[i]).collect(),
    })
    .collect()
}

/// Logistic of the mean raw confidence over the cluster.
pub fn confidence(cluster: &Cluster, s: &Grid) -> Result<f64> {
    if cluster.cells.is_empty() {
        return Err(Error::invalid("empty cluster"));
    }
    let mean = cluster.cells.iter().map(|&(x, y)| s.get(0, y, x)).sum::<f64>() / cluster.cells.len() as f64;
    Ok(logistic(mean))
}

fn weights(cluster: &Cluster, s: &Grid) -> Vec<f64> {
    cluster.cells.iter().map(|&(x, y)| logistic(s.get(0, y, x))).collect()
}

/// Confidence-weighted per-channel mean of `field` over the cluster, before activation.
fn weighted_channels(cluster: &Cluster, w: &[f64], field: &Grid) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    (0..field.channels())
        .map(|c| {
            cluster
                .cells
                .iter()
                .zip(w)
                .map(|(&(x, y), wi)| wi * field.get(c, y, x))
                .sum::<f64>()
                / total
        })
        .collect()
}

/// Scalar vote: activation of the confidence-weighted mean of the raw field.
pub fn aggregate_scalar(cluster: &Cluster, s: &Grid, field: &Grid, act: Activation) -> Result<Vec<f64>> {
    if cluster.cells.is_empty() {
        return Err(Error::invalid("empty cluster"));
    }
    if let Activation::Softmax(k) = act {
        if field.channels() != k {
            return Err(Error::shape(format!("{} channels for {k} classes", field.channels())));
        }
    }
    let w = weights(cluster, s);
    Ok(act.apply(&weighted_channels(cluster, &w, field)))
}

/// Vectorial vote: confidence-weighted mean of the pointed-at locations.
pub fn aggregate_vector(cluster: &Cluster, s: &Grid, field: &Grid) -> Result<[f64; 2]> {
    if cluster.cells.is_empty() {
        return Err(Error::invalid("empty cluster"));
    }
    let w = weights(cluster, s);
    let total: f64 = w.iter().sum();
    let mut out = [0.0; 2];
    for (&(x, y), wi) in cluster.cells.iter().zip(&w) {
        out[0] += wi * (x as f64 + field.get(0, y, x));
        out[1] += wi * (y as f64 + field.get(1, y, x));
    }
    Ok([out[0] / total, out[1] / total])
}

/// Decodes all fields into detections sorted by descending score.
pub fn decode(fields: &FieldSet, registry: &TaskRegistry, params: &DecodeParams) -> Result<Vec<Detection>> {
    params.validate()?;
    fields.validate(registry)?;
    if !registry.has_box_fields() {
        return Err(Error::invalid("decoding needs the center, width and height fields"));
    }
    let s = fields.confidence();
    let cells = select_cells(s, params.gamma);
    let points = estimate_centers(&cells, fields.center());
    let clusters = optics_cluster(&cells, &points, params);

    let mut detections = Vec::with_capacity(clusters.len());
    for cluster in &clusters {
        let score = confidence(cluster, s)?;
        let center = aggregate_vector(cluster, s, &fields.grids[CENTER])?;
        let width = aggregate_scalar(cluster, s, &fields.grids[WIDTH], Activation::Identity)?[0];
        let height = aggregate_scalar(cluster, s, &fields.grids[HEIGHT], Activation::Identity)?[0];
        let mut attributes = BTreeMap::new();
        for spec in registry.attributes() {
            let act = activation_for(spec.kind)?;
            let v = aggregate_scalar(cluster, s, &fields.grids[spec.id], act)?;
            let pred = match spec.kind {
                AttributeKind::Categorical { .. } => Prediction::Distribution(v),
                _ => Prediction::Scalar(v[0]),
            };
            attributes.insert(spec.name.clone(), pred);
        }
        detections.push(Detection {
            score,
            center,
            width,
            height,
            attributes,
        });
    }
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(detections)
}
