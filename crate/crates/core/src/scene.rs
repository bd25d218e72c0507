use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::registry::TaskRegistry;

/// A ground-truth pedestrian, in image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    /// Attribute annotations keyed by attribute name; `None` or absent means
    /// not annotated.
    #[serde(default)]
    pub attributes: BTreeMap<String, Option<f64>>,
    #[serde(default)]
    pub occlusion: f64,
}

impl Instance {
    pub fn attribute(&self, name: &str) -> Option<f64> {
        self.attributes.get(name).copied().flatten()
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Closed box containment of an image point.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.width / 2.0 && (p[1] - self.center[1]).abs() <= self.height / 2.0
    }

    pub fn validate(&self, image_size: [usize; 2], registry: Option<&TaskRegistry>) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::invalid("instance box dimensions must be positive"));
        }
        let [w, h] = image_size;
        let [cx, cy] = self.center;
        if !(cx >= 0.0 && cx <= w as f64 && cy >= 0.0 && cy <= h as f64) {
            return Err(Error::invalid(format!(
                "instance center ({cx}, {cy}) outside the {w}x{h} image"
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::invalid("occlusion must be within [0, 1]"));
        }
        if let Some(registry) = registry {
            for (name, value) in &self.attributes {
                if let (Some(spec), Some(v)) = (registry.by_name(name), value) {
                    spec.check_value(*v)?;
                }
            }
        }
        Ok(())
    }
}

/// An annotated image together with the dense input consumed by the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_size: [usize; 2],
    pub instances: Vec<Instance>,
    /// `channels x H x W` input grid.
    pub input: Grid,
}

impl Scene {
    pub fn validate(&self, registry: Option<&TaskRegistry>) -> Result<()> {
        if self.input.width() != self.image_size[0] || self.input.height() != self.image_size[1] {
            return Err(Error::shape(format!(
                "input is {}x{} but image size is {}x{}",
                self.input.width(),
                self.input.height(),
                self.image_size[0],
                self.image_size[1]
            )));
        }
        self.instances
            .iter()
            .try_for_each(|i| i.validate(self.image_size, registry))
    }
}
