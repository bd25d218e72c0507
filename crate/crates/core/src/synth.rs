//! Deterministic synthetic scenes whose inputs encode every annotation.
//!
//! Each instance is painted as a filled rectangle. Channel layout:
//!
//! | channel | content inside a box |
//! |---|---|
//! | 0 | 1 (presence) |
//! | 1, 2 | `0.5 + (center - pixel) / (4 * max half size)` along x and y |
//! | 3, 4 | width and height over their maxima |
//! | 5.. | one channel per attribute of the registry, in registry order |
//!
//! Binary values render as `(1 + 2v) / 4`, categorical classes as
//! `(c + 0.5) / K`, continuous values as their position in the range.
//! Background is 0 everywhere before noise.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::registry::{AttributeKind, AttributeSpec, TaskRegistry};
use crate::scene::{Instance, Scene};

pub const GEOMETRY_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Centers at least `min_separation` apart and boxes disjoint.
    Separable,
    /// Independent uniform centers; boxes may overlap.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
    /// Inclusive instance-count range.
    pub instances: [usize; 2],
    pub box_width: [f64; 2],
    pub box_height: [f64; 2],
    pub min_separation: f64,
    /// Size of the rendered attribute set (detection counts as one).
    pub attributes: usize,
    pub missing_probability: f64,
    pub noise: f64,
    pub occlusion: [f64; 2],
    pub placement: Placement,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            image_size: [128, 64],
            instances: [1, 3],
            box_width: [16.0, 28.0],
            box_height: [20.0, 36.0],
            min_separation: 40.0,
            attributes: 32,
            missing_probability: 0.1,
            noise: 0.05,
            occlusion: [0.0, 0.5],
            placement: Placement::Separable,
            max_retries: 100,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if self.instances[0] > self.instances[1] {
            return Err(Error::invalid("instance range is reversed"));
        }
        for (name, r, limit) in [("box_width", self.box_width, w), ("box_height", self.box_height, h)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= limit as f64) {
                return Err(Error::invalid(format!(
                    "{name} range {r:?} must be positive, ordered and fit the image"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_probability) {
            return Err(Error::invalid("missing probability must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        if !(0.0 <= self.occlusion[0] && self.occlusion[0] <= self.occlusion[1] && self.occlusion[1] <= 1.0) {
            return Err(Error::invalid("occlusion range must be ordered within [0, 1]"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::invalid("min separation must be non-negative"));
        }
        TaskRegistry::canonical(self.attributes)?;
        Ok(())
    }

    /// Separation needed so that decoded clusters of distinct instances never merge.
    pub fn check_separable_for(&self, max_radius_cells: f64, stride: usize) -> Result<()> {
        let need = 2.0 * max_radius_cells * stride as f64;
        if self.placement == Placement::Separable && self.min_separation < need {
            return Err(Error::invalid(format!(
                "min separation {} is below {need} required by the decoder radius",
                self.min_separation
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<TaskRegistry> {
        TaskRegistry::canonical(self.attributes)
    }

    pub fn input_channels(&self) -> Result<usize> {
        Ok(GEOMETRY_CHANNELS + self.registry()?.attributes().count())
    }
}

fn sample_value<R: Rng + ?Sized>(spec: &AttributeSpec, rng: &mut R) -> f64 {
    match spec.kind {
        AttributeKind::Binary => f64::from(u8::from(rng.gen_bool(0.5))),
        AttributeKind::Categorical { classes } => rng.gen_range(0..classes) as f64,
        AttributeKind::Continuous => {
            let [lo, hi] = spec.range.unwrap_or([0.0, 1.0]);
            rng.gen_range(lo..=hi)
        }
        AttributeKind::Vectorial => 0.0,
    }
}

/// Intensity for an attribute value, in `[0, 1]`.
pub fn encode_intensity(spec: &AttributeSpec, value: f64) -> f64 {
    match spec.kind {
        AttributeKind::Binary => (1.0 + 2.0 * value) / 4.0,
        AttributeKind::Categorical { classes } => (value + 0.5) / classes as f64,
        AttributeKind::Continuous => {
            let [lo, hi] = spec.range.unwrap_or([0.0, 1.0]);
            (value - lo) / (hi - lo)
        }
        AttributeKind::Vectorial => 0.0,
    }
}

/// Inverse of [`encode_intensity`], snapping discrete kinds to the nearest level.
pub fn decode_intensity(spec: &AttributeSpec, intensity: f64) -> f64 {
    match spec.kind {
        AttributeKind::Binary => f64::from(u8::from(intensity >= 0.5)),
        AttributeKind::Categorical { classes } => {
            ((intensity * classes as f64 - 0.5).round()).clamp(0.0, (classes - 1) as f64)
        }
        AttributeKind::Continuous => {
            let [lo, hi] = spec.range.unwrap_or([0.0, 1.0]);
            lo + intensity * (hi - lo)
        }
        AttributeKind::Vectorial => 0.0,
    }
}

/// Candidate draws per instance before the whole layout is restarted.
const DRAWS_PER_INSTANCE: usize = 32;

fn place<R: Rng + ?Sized>(config: &GenConfig, count: usize, rng: &mut R) -> Result<Vec<([f64; 2], f64, f64)>> {
    let [iw, ih] = config.image_size.map(|v| v as f64);
    for _ in 0..=config.max_retries {
        let mut boxes: Vec<([f64; 2], f64, f64)> = Vec::with_capacity(count);
        'instance: for _ in 0..count {
            for _ in 0..DRAWS_PER_INSTANCE {
                let w = rng.gen_range(config.box_width[0]..=config.box_width[1]);
                let h = rng.gen_range(config.box_height[0]..=config.box_height[1]);
                let cx = rng.gen_range(w / 2.0..=iw - w / 2.0);
                let cy = rng.gen_range(h / 2.0..=ih - h / 2.0);
                let ok = config.placement == Placement::Hard
                    || boxes.iter().all(|&(c, bw, bh)| {
                        let far = (c[0] - cx).hypot(c[1] - cy) >= config.min_separation;
                        let disjoint = (c[0] - cx).abs() >= (bw + w) / 2.0 || (c[1] - cy).abs() >= (bh + h) / 2.0;
                        far && disjoint
                    });
                if ok {
                    boxes.push(([cx, cy], w, h));
                    continue 'instance;
                }
            }
            break;
        }
        if boxes.len() == count {
            return Ok(boxes);
        }
    }
    Err(Error::Placement(format!(
        "could not place {count} instances with separation {} after {} restarts",
        config.min_separation, config.max_retries
    )))
}

/// Paints the instances into a fresh input grid, before noise.
pub fn render(config: &GenConfig, registry: &TaskRegistry, instances: &[(Instance, Vec<f64>)]) -> Result<Grid> {
    let [iw, ih] = config.image_size;
    let attrs: Vec<&AttributeSpec> = registry.attributes().collect();
    let mut grid = Grid::zeros(GEOMETRY_CHANNELS + attrs.len(), ih, iw);
    let half = [config.box_width[1] / 2.0, config.box_height[1] / 2.0];
    for (inst, values) in instances {
        let x0 = (inst.center[0] - inst.width / 2.0).max(0.0);
        let x1 = (inst.center[0] + inst.width / 2.0).min(iw as f64);
        let y0 = (inst.center[1] - inst.height / 2.0).max(0.0);
        let y1 = (inst.center[1] + inst.height / 2.0).min(ih as f64);
        // pixel (px, py) covers [px, px+1); it is painted when its center is inside
        let xs = (x0 - 0.5).ceil().max(0.0) as usize..((x1 - 0.5).floor() + 1.0).clamp(0.0, iw as f64) as usize;
        let ys = (y0 - 0.5).ceil().max(0.0) as usize..((y1 - 0.5).floor() + 1.0).clamp(0.0, ih as f64) as usize;
        for py in ys.clone() {
            for px in xs.clone() {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                grid.set(0, py, px, 1.0);
                grid.set(1, py, px, 0.5 + (inst.center[0] - p[0]) / (4.0 * half[0]));
                grid.set(2, py, px, 0.5 + (inst.center[1] - p[1]) / (4.0 * half[1]));
                grid.set(3, py, px, inst.width / config.box_width[1]);
                grid.set(4, py, px, inst.height / config.box_height[1]);
                for (k, (spec, &v)) in attrs.iter().zip(values).enumerate() {
                    grid.set(GEOMETRY_CHANNELS + k, py, px, encode_intensity(spec, v));
                }
            }
        }
    }
    Ok(grid)
}

/// One scene from its own random stream.
pub fn generate_scene<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    let registry = config.registry()?;
    let count = rng.gen_range(config.instances[0]..=config.instances[1]);
    let boxes = place(config, count, rng)?;
    let mut painted = Vec::with_capacity(count);
    for (center, width, height) in boxes {
        let mut attributes = BTreeMap::new();
        let mut values = Vec::new();
        for spec in registry.attributes() {
            let v = sample_value(spec, rng);
            values.push(v);
            let annotated = !rng.gen_bool(config.missing_probability);
            attributes.insert(spec.name.clone(), annotated.then_some(v));
        }
        let occlusion = rng.gen_range(config.occlusion[0]..=config.occlusion[1]);
        painted.push((
            Instance {
                center,
                width,
                height,
                attributes,
                occlusion,
            },
            values,
        ));
    }
    let mut input = render(config, &registry, &painted)?;
    if config.noise > 0.0 {
        let dist = Normal::new(0.0, config.noise).expect("finite noise");
        input.data_mut().iter_mut().for_each(|v| *v += dist.sample(rng));
    }
    Ok(Scene {
        image_size: config.image_size,
        instances: painted.into_iter().map(|(i, _)| i).collect(),
        input,
    })
}

/// Scene `index` of the split seeded by `config.seed`.
pub fn generate_indexed(config: &GenConfig, index: usize) -> Result<Scene> {
    let mut rng = crate::seed::indexed_stream(config.seed, "scene", index as u64);
    generate_scene(config, &mut rng)
}

/// `n` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_scenes(config: &GenConfig, n: usize) -> Result<Vec<Scene>> {
    (0..n).map(|i| generate_indexed(config, i)).collect()
}
