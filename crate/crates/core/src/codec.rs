//! Scene annotations to per-field training targets.

use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::grid::Grid;
use crate::registry::{AttributeKind, TaskRegistry, CENTER, CONFIDENCE, HEIGHT, WIDTH};
use crate::scene::{Instance, Scene};

/// Instances more occluded than this are left out of the targets.
pub const MAX_TRAIN_OCCLUSION: f64 = 0.75;

/// Per-cell owner: instance index or background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ownership {
    pub geometry: GridGeometry,
    owners: Vec<Option<usize>>,
}

impl Ownership {
    pub fn owner(&self, x: usize, y: usize) -> Option<usize> {
        self.owners[self.geometry.cell_index(x, y)]
    }

    pub fn owners(&self) -> &[Option<usize>] {
        &self.owners
    }

    pub fn cells_of(&self, instance: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.geometry.width;
        self.owners
            .iter()
            .enumerate()
            .filter(move |(_, o)| **o == Some(instance))
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// Assigns every cell whose centre falls inside a box to that box; overlaps go
/// to the nearest centre, then the smaller area, then the lower index.
pub fn cell_ownership(instances: &[Instance], geom: &GridGeometry) -> Ownership {
    cell_ownership_filtered(instances, geom, |_| true)
}

fn cell_ownership_filtered(instances: &[Instance], geom: &GridGeometry, keep: impl Fn(&Instance) -> bool) -> Ownership {
    let mut owners = vec![None; geom.cells()];
    for y in 0..geom.height {
        for x in 0..geom.width {
            let p = geom.cell_center(x, y);
            let mut best: Option<(f64, f64, usize)> = None;
            for (i, inst) in instances.iter().enumerate() {
                if !keep(inst) || !inst.contains(p) {
                    continue;
                }
                let d = (p[0] - inst.center[0]).hypot(p[1] - inst.center[1]);
                let key = (d, inst.area(), i);
                let better = match best {
                    None => true,
                    Some(b) => key.0 < b.0 || (key.0 == b.0 && key.1 < b.1),
                };
                if better {
                    best = Some(key);
                }
            }
            owners[geom.cell_index(x, y)] = best.map(|b| b.2);
        }
    }
    Ownership {
        geometry: *geom,
        owners,
    }
}

/// Target grid and validity mask for one field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTarget {
    pub target: Grid,
    /// One flag per cell (`H x W`, row-major).
    pub mask: Vec<bool>,
}

impl FieldTarget {
    pub fn masked_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_active(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub geometry: GridGeometry,
    pub ownership: Ownership,
    /// Indexed by field id.
    pub fields: Vec<FieldTarget>,
}

impl TargetSet {
    /// Number of fields with at least one supervised cell (`T~`).
    pub fn effective_tasks(&self) -> usize {
        self.fields.iter().filter(|f| f.is_active()).count()
    }
}

pub fn encode_targets(scene: &Scene, registry: &TaskRegistry, geom: &GridGeometry) -> Result<TargetSet> {
    for inst in &scene.instances {
        inst.validate(scene.image_size, Some(registry))?;
    }
    encode_instances(&scene.instances, registry, geom)
}

/// Target encoding for a bare instance list (no input grid needed).
pub fn encode_instances(instances: &[Instance], registry: &TaskRegistry, geom: &GridGeometry) -> Result<TargetSet> {
    for inst in instances {
        for spec in registry.attributes() {
            if let Some(v) = inst.attribute(&spec.name) {
                spec.check_value(v)?;
            }
        }
    }
    let ownership = cell_ownership_filtered(instances, geom, |i| i.occlusion <= MAX_TRAIN_OCCLUSION);
    let (w, h) = (geom.width, geom.height);
    let mut fields: Vec<FieldTarget> = registry
        .specs()
        .iter()
        .map(|s| FieldTarget {
            target: Grid::zeros(s.channels(), h, w),
            mask: vec![s.id == CONFIDENCE; w * h],
        })
        .collect();

    for y in 0..h {
        for x in 0..w {
            let cell = geom.cell_index(x, y);
            let Some(owner) = ownership.owners[cell] else {
                continue;
            };
            let inst = &instances[owner];
            for spec in registry.specs() {
                let f = &mut fields[spec.id];
                let annotated = match spec.id {
                    CONFIDENCE => {
                        f.target.set(0, y, x, 1.0);
                        true
                    }
                    CENTER => {
                        let c = geom.to_grid(inst.center);
                        f.target.set(0, y, x, c[0] - x as f64);
                        f.target.set(1, y, x, c[1] - y as f64);
                        true
                    }
                    WIDTH => {
                        f.target.set(0, y, x, geom.to_cells(inst.width));
                        true
                    }
                    HEIGHT => {
                        f.target.set(0, y, x, geom.to_cells(inst.height));
                        true
                    }
                    _ => match inst.attribute(&spec.name) {
                        None => false,
                        Some(v) => {
                            match spec.kind {
                                AttributeKind::Categorical { .. } => f.target.set(v as usize, y, x, 1.0),
                                _ => f.target.set(0, y, x, v),
                            }
                            true
                        }
                    },
                };
                f.mask[cell] = annotated;
            }
        }
    }
    Ok(TargetSet {
        geometry: *geom,
        ownership,
        fields,
    })
}

/// Model output: one raw (pre-activation) grid per registry field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSet {
    pub geometry: GridGeometry,
    pub grids: Vec<Grid>,
}

impl FieldSet {
    pub fn validate(&self, registry: &TaskRegistry) -> Result<()> {
        if self.grids.len() != registry.len() {
            return Err(Error::shape(format!(
                "{} grids for {} fields",
                self.grids.len(),
                registry.len()
            )));
        }
        for (g, s) in self.grids.iter().zip(registry.specs()) {
            if g.shape() != [s.channels(), self.geometry.height, self.geometry.width] {
                return Err(Error::shape(format!(
                    "field '{}' has shape {:?}, expected {:?}",
                    s.name,
                    g.shape(),
                    [s.channels(), self.geometry.height, self.geometry.width]
                )));
            }
        }
        Ok(())
    }

    pub fn confidence(&self) -> &Grid {
        &self.grids[CONFIDENCE]
    }

    pub fn center(&self) -> &Grid {
        &self.grids[CENTER]
    }
}

/// Fields a perfect model would output for `targets`: confidence and
/// classification logits at `+-margin`, regression fields equal to their targets.
pub fn ideal_fields(targets: &TargetSet, registry: &TaskRegistry, margin: f64) -> FieldSet {
    let grids = registry
        .specs()
        .iter()
        .map(|spec| {
            let ft = &targets.fields[spec.id];
            let mut g = ft.target.clone();
            match spec.kind {
                AttributeKind::Binary => {
                    for (i, v) in g.data_mut().iter_mut().enumerate() {
                        *v = if !ft.mask[i] {
                            0.0
                        } else if *v > 0.5 {
                            margin
                        } else {
                            -margin
                        };
                    }
                }
                AttributeKind::Categorical { .. } => {
                    let plane = g.plane();
                    for (i, v) in g.data_mut().iter_mut().enumerate() {
                        *v = if ft.mask[i % plane] { *v * margin } else { 0.0 };
                    }
                }
                AttributeKind::Continuous | AttributeKind::Vectorial => {}
            }
            g
        })
        .collect();
    FieldSet {
        geometry: targets.geometry,
        grids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn inst(cx: f64, cy: f64, w: f64, h: f64) -> Instance {
        Instance {
            center: [cx, cy],
            width: w,
            height: h,
            attributes: BTreeMap::new(),
            occlusion: 0.0,
        }
    }

    fn geom(w: usize, h: usize, stride: usize) -> GridGeometry {
        GridGeometry::for_image(w, h, stride).unwrap()
    }

    #[test]
    fn single_box_owns_two_cells() {
        // cells (2,2) and (3,2) have centres (5,5) and (7,5) at stride 2
        let g = geom(16, 16, 2);
        let o = cell_ownership(&[inst(6.0, 5.0, 3.0, 1.0)], &g);
        let owned: Vec<_> = o.cells_of(0).collect();
        assert_eq!(owned, vec![(2, 2), (3, 2)]);
        assert_eq!(o.owners().iter().filter(|c| c.is_some()).count(), 2);
    }

    #[test]
    fn disjoint_boxes_partition() {
        let g = geom(32, 32, 4);
        let o = cell_ownership(&[inst(6.0, 6.0, 8.0, 8.0), inst(24.0, 24.0, 8.0, 8.0)], &g);
        let a: Vec<_> = o.cells_of(0).collect();
        let b: Vec<_> = o.cells_of(1).collect();
        assert!(!a.is_empty() && !b.is_empty());
        assert!(a.iter().all(|c| !b.contains(c)));
    }

    #[test]
    fn overlap_nearest_center_wins() {
        // shared cell centre at (5,5); centres at distance 1 and 3.
        let g = geom(16, 16, 2);
        let near = inst(6.0, 5.0, 3.0, 1.0);
        let far = inst(2.0, 5.0, 6.2, 1.0);
        let instances = [far, near];
        let o = cell_ownership(&instances, &g);
        assert_eq!(o.owner(2, 2), Some(1));
        // brute force: every owned cell goes to the minimum-distance containing box
        for y in 0..g.height {
            for x in 0..g.width {
                let p = g.cell_center(x, y);
                let best = instances
                    .iter()
                    .enumerate()
                    .filter(|(_, i)| i.contains(p))
                    .map(|(k, i)| ((p[0] - i.center[0]).hypot(p[1] - i.center[1]), k))
                    .min_by(|a, b| a.partial_cmp(b).unwrap())
                    .map(|(_, k)| k);
                assert_eq!(o.owner(x, y), best);
            }
        }
    }

    #[test]
    fn tie_goes_to_smaller_area_then_index() {
        let g = geom(16, 16, 2);
        let big = inst(5.0, 5.0, 6.0, 6.0);
        let small = inst(5.0, 5.0, 2.0, 2.0);
        assert_eq!(cell_ownership(&[big.clone(), small.clone()], &g).owner(2, 2), Some(1));
        assert_eq!(cell_ownership(&[small.clone(), small], &g).owner(2, 2), Some(0));
    }

    #[test]
    fn center_offset_and_box_units() {
        let registry = TaskRegistry::canonical(1).unwrap();
        // stride 2: grid centre (4,3) <=> pixel (9,7); box 6x10 px
        let g = geom(32, 32, 2);
        let t = encode_instances(&[inst(9.0, 7.0, 6.0, 10.0)], &registry, &g).unwrap();
        let v = &t.fields[CENTER].target;
        assert_eq!((v.get(0, 3, 3), v.get(1, 3, 3)), (1.0, 0.0));
        assert_eq!(t.fields[WIDTH].target.get(0, 3, 4), 3.0);
        assert_eq!(t.fields[HEIGHT].target.get(0, 3, 4), 5.0);
        assert!(t.fields[CONFIDENCE].mask.iter().all(|&m| m));
        assert_eq!(t.fields[CONFIDENCE].target.get(0, 3, 4), 1.0);
        assert_eq!(t.fields[CONFIDENCE].target.get(0, 0, 0), 0.0);
    }

    #[test]
    fn missing_attribute_is_masked_out() {
        let registry = TaskRegistry::canonical(3).unwrap();
        let g = geom(32, 32, 2);
        let mut a = inst(8.0, 8.0, 8.0, 8.0);
        a.attributes.insert("crossing".into(), None);
        a.attributes.insert("time_to_crossing".into(), Some(2.0));
        let t = encode_instances(&[a], &registry, &g).unwrap();
        let crossing = registry.by_name("crossing").unwrap().id;
        assert!(!t.fields[crossing].is_active());
        assert_eq!(t.fields[crossing + 1].masked_cells(), t.fields[CENTER].masked_cells());
        assert_eq!(t.effective_tasks(), 5);
    }

    #[test]
    fn out_of_range_value_rejected() {
        let registry = TaskRegistry::canonical(13).unwrap();
        let g = geom(32, 32, 2);
        let mut a = inst(8.0, 8.0, 8.0, 8.0);
        a.attributes.insert("group_size".into(), Some(4.0));
        assert!(encode_instances(&[a], &registry, &g).is_err());
    }

    #[test]
    fn heavily_occluded_instances_are_background() {
        let registry = TaskRegistry::canonical(1).unwrap();
        let g = geom(32, 32, 2);
        let mut a = inst(8.0, 8.0, 8.0, 8.0);
        a.occlusion = 0.8;
        let t = encode_instances(&[a], &registry, &g).unwrap();
        assert_eq!(t.effective_tasks(), 1);
    }

    #[test]
    fn categorical_one_hot() {
        let registry = TaskRegistry::canonical(32).unwrap();
        let g = geom(32, 32, 4);
        let mut a = inst(16.0, 16.0, 12.0, 12.0);
        a.attributes.insert("age".into(), Some(2.0));
        let t = encode_instances(&[a], &registry, &g).unwrap();
        let age = &t.fields[registry.by_name("age").unwrap().id];
        for cell in 0..g.cells() {
            if age.mask[cell] {
                let (x, y) = (cell % g.width, cell / g.width);
                let sum: f64 = (0..4).map(|c| age.target.get(c, y, x)).sum();
                assert_eq!(sum, 1.0);
                assert_eq!(age.target.get(2, y, x), 1.0);
            }
        }
    }
}
