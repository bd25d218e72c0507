//! Field vocabulary: one [`AttributeSpec`] per learned field.
//!
//! A [`TaskRegistry`] always begins with the detection fields in a fixed
//! order (`confidence`, `center`, `width`, `height`); everything after them is
//! a pedestrian attribute. Each entry owns exactly one network head, so the
//! registry length is the task count `T`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIDENCE: usize = 0;
pub const CENTER: usize = 1;
pub const WIDTH: usize = 2;
pub const HEIGHT: usize = 3;
pub const DETECTION_FIELDS: [&str; 4] = ["confidence", "center", "width", "height"];

pub const REGISTRY_FORMAT_VERSION: u32 = 1;

/// Sizes of the nested attribute sets: detection, + intention, + behavior, + appearance.
pub const CANONICAL_SETS: [usize; 4] = [1, 3, 13, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttributeKind {
    Binary,
    Categorical { classes: usize },
    Continuous,
    Vectorial,
}

impl AttributeKind {
    /// Channels in the field grid for this kind.
    pub fn channels(&self) -> usize {
        match *self {
            AttributeKind::Binary | AttributeKind::Continuous => 1,
            AttributeKind::Categorical { classes } => classes,
            AttributeKind::Vectorial => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Detection,
    Intention,
    Behavior,
    Appearance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub id: usize,
    pub name: String,
    pub kind: AttributeKind,
    pub group: Group,
    /// Value range of a continuous attribute, used for rendering and validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl AttributeSpec {
    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    /// Checks that `value` is a legal annotation for this attribute.
    pub fn check_value(&self, value: f64) -> Result<()> {
        let ok = match self.kind {
            AttributeKind::Binary => value == 0.0 || value == 1.0,
            AttributeKind::Categorical { classes } => value.fract() == 0.0 && value >= 0.0 && value < classes as f64,
            AttributeKind::Continuous => {
                value.is_finite() && self.range.is_none_or(|[lo, hi]| value >= lo && value <= hi)
            }
            AttributeKind::Vectorial => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "value {value} out of range for attribute '{}' ({:?})",
                self.name, self.kind
            )))
        }
    }
}

/// Ordered, validated list of fields.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskRegistry {
    specs: Vec<AttributeSpec>,
}

impl<'de> Deserialize<'de> for TaskRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            specs: Vec<AttributeSpec>,
        }
        let raw = Raw::deserialize(d)?;
        TaskRegistry::new(raw.specs).map_err(serde::de::Error::custom)
    }
}

impl TaskRegistry {
    pub fn new(specs: Vec<AttributeSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("registry is empty"));
        }
        let mut names = HashSet::new();
        for (i, s) in specs.iter().enumerate() {
            if s.id != i {
                return Err(Error::invalid(format!(
                    "attribute ids must be dense: '{}' has id {} at position {i}",
                    s.name, s.id
                )));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::invalid(format!("duplicate attribute '{}'", s.name)));
            }
            if let AttributeKind::Categorical { classes } = s.kind {
                if classes < 2 {
                    return Err(Error::invalid(format!(
                        "categorical attribute '{}' needs at least 2 classes",
                        s.name
                    )));
                }
            }
            if let Some([lo, hi]) = s.range {
                if !(lo < hi) {
                    return Err(Error::invalid(format!("bad range for '{}'", s.name)));
                }
            }
            let expected = match i {
                CONFIDENCE => Some((AttributeKind::Binary, "confidence")),
                CENTER => Some((AttributeKind::Vectorial, "center")),
                WIDTH => Some((AttributeKind::Continuous, "width")),
                HEIGHT => Some((AttributeKind::Continuous, "height")),
                _ => None,
            };
            match expected {
                Some((kind, name)) => {
                    if s.kind != kind || s.name != name || s.group != Group::Detection {
                        return Err(Error::invalid(format!(
                            "field {i} must be the detection field '{name}'"
                        )));
                    }
                }
                None => {
                    if s.group == Group::Detection || s.kind == AttributeKind::Vectorial {
                        return Err(Error::invalid(format!(
                            "'{}': only the built-in detection fields may be detection/vectorial",
                            s.name
                        )));
                    }
                }
            }
        }
        Ok(TaskRegistry { specs })
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    /// Task count `T` (one task per field).
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, id: usize) -> &AttributeSpec {
        &self.specs[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&AttributeSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// True when all four detection fields are present, i.e. boxes can be decoded.
    pub fn has_box_fields(&self) -> bool {
        self.specs.len() >= 4
    }

    /// Entries after the detection fields.
    pub fn attributes(&self) -> impl Iterator<Item = &AttributeSpec> {
        self.specs.iter().filter(|s| s.group != Group::Detection)
    }

    /// Number of attributes `A`; the bounding box counts as one attribute.
    pub fn attribute_count(&self) -> usize {
        1 + self.attributes().count()
    }

    /// `true` when every entry of `self` appears identically in `other`.
    pub fn is_subset_of(&self, other: &TaskRegistry) -> bool {
        self.specs.iter().all(|s| {
            other
                .by_name(&s.name)
                .is_some_and(|o| o.kind == s.kind && o.group == s.group && o.range == s.range)
        })
    }

    /// The nested attribute set of size `attributes` (detection counted as
    /// one attribute): one of [`CANONICAL_SETS`].
    pub fn canonical(attributes: usize) -> Result<Self> {
        if !CANONICAL_SETS.contains(&attributes) {
            return Err(Error::invalid(format!(
                "attribute set size must be one of {CANONICAL_SETS:?}, got {attributes}"
            )));
        }
        TaskRegistry::new(canonical_specs().into_iter().take(attributes + 3).collect())
    }

    /// Registry restricted to the confidence field alone (`T = 1`).
    pub fn confidence_only() -> Self {
        TaskRegistry {
            specs: canonical_specs().into_iter().take(1).collect(),
        }
    }
}

/// (name, kind, group, range) after the detection fields, ordered so that the
/// nested sets A = 1, 3, 13, 32 are prefixes.
const CANONICAL_ATTRIBUTES: [(&str, AttributeKind, Group, Option<[f64; 2]>); 31] = {
    use AttributeKind::*;
    use Group::*;
    const CAT4: AttributeKind = Categorical { classes: 4 };
    [
        ("crossing", Binary, Intention, None),
        ("time_to_crossing", Continuous, Intention, Some([0.0, 5.0])),
        ("instant_crossing", Binary, Behavior, None),
        ("looking", Binary, Behavior, None),
        ("walking", Binary, Behavior, None),
        ("motion_direction", Binary, Behavior, None),
        ("back_pose", Binary, Behavior, None),
        ("front_pose", Binary, Behavior, None),
        ("left_pose", Binary, Behavior, None),
        ("right_pose", Binary, Behavior, None),
        ("group_size", CAT4, Behavior, None),
        ("reaction", CAT4, Behavior, None),
        ("gender", Binary, Appearance, None),
        ("backpack", Binary, Appearance, None),
        ("bag_elbow", Binary, Appearance, None),
        ("bag_hand", Binary, Appearance, None),
        ("bag_left_side", Binary, Appearance, None),
        ("bag_right_side", Binary, Appearance, None),
        ("bag_shoulder", Binary, Appearance, None),
        ("cap", Binary, Appearance, None),
        ("clothes_below_knee", Binary, Appearance, None),
        ("dark_lower_clothes", Binary, Appearance, None),
        ("dark_upper_clothes", Binary, Appearance, None),
        ("light_lower_clothes", Binary, Appearance, None),
        ("light_upper_clothes", Binary, Appearance, None),
        ("hood", Binary, Appearance, None),
        ("object", Binary, Appearance, None),
        ("phone", Binary, Appearance, None),
        ("stroller_cart", Binary, Appearance, None),
        ("sunglasses", Binary, Appearance, None),
        ("age", CAT4, Appearance, None),
    ]
};

fn canonical_specs() -> Vec<AttributeSpec> {
    let detection = [
        AttributeKind::Binary,
        AttributeKind::Vectorial,
        AttributeKind::Continuous,
        AttributeKind::Continuous,
    ];
    let mut specs: Vec<AttributeSpec> = DETECTION_FIELDS
        .iter()
        .zip(detection)
        .enumerate()
        .map(|(id, (name, kind))| AttributeSpec {
            id,
            name: name.to_string(),
            kind,
            group: Group::Detection,
            range: None,
        })
        .collect();
    for (name, kind, group, range) in CANONICAL_ATTRIBUTES {
        specs.push(AttributeSpec {
            id: specs.len(),
            name: name.to_string(),
            kind,
            group,
            range,
        });
    }
    specs
}

/// Activation applied to a scalar field before it is read as a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Logistic,
    /// Normalized exponential over the given number of channels.
    Softmax(usize),
    Identity,
}

impl Activation {
    /// Applies the activation to one cell's channel vector.
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        match *self {
            Activation::Logistic => raw.iter().map(|&v| crate::math::logistic(v)).collect(),
            Activation::Softmax(_) => crate::math::softmax(raw),
            Activation::Identity => raw.to_vec(),
        }
    }
}

pub fn activation_for(kind: AttributeKind) -> Result<Activation> {
    match kind {
        AttributeKind::Binary => Ok(Activation::Logistic),
        AttributeKind::Categorical { classes } => Ok(Activation::Softmax(classes)),
        AttributeKind::Continuous => Ok(Activation::Identity),
        AttributeKind::Vectorial => Err(Error::invalid("vectorial fields have no scalar activation")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_sets_have_expected_field_counts() {
        let counts: Vec<usize> = [1, 3, 13, 32]
            .iter()
            .map(|&a| TaskRegistry::canonical(a).unwrap().len())
            .collect();
        assert_eq!(counts, vec![4, 6, 16, 35]);
        let full = TaskRegistry::canonical(32).unwrap();
        assert_eq!(full.attribute_count(), 32);
        let groups = |g| full.attributes().filter(|s| s.group == g).count();
        assert_eq!(groups(Group::Intention), 2);
        assert_eq!(groups(Group::Behavior), 10);
        assert_eq!(groups(Group::Appearance), 19);
        assert!(TaskRegistry::canonical(13).unwrap().is_subset_of(&full));
    }

    #[test]
    fn activations() {
        assert_eq!(activation_for(AttributeKind::Binary).unwrap(), Activation::Logistic);
        assert_eq!(activation_for(AttributeKind::Continuous).unwrap(), Activation::Identity);
        assert_eq!(
            activation_for(AttributeKind::Categorical { classes: 4 }).unwrap(),
            Activation::Softmax(4)
        );
        assert!(activation_for(AttributeKind::Vectorial).is_err());
        let p = Activation::Softmax(4).apply(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_registries() {
        let mut specs = canonical_specs();
        specs.truncate(6);
        let mut dup = specs.clone();
        dup[5].name = "crossing".into();
        assert!(TaskRegistry::new(dup).is_err());
        let mut sparse = specs.clone();
        sparse[5].id = 9;
        assert!(TaskRegistry::new(sparse).is_err());
        let mut k1 = specs.clone();
        k1[4].kind = AttributeKind::Categorical { classes: 1 };
        assert!(TaskRegistry::new(k1).is_err());
        let mut swapped = specs;
        swapped.swap(1, 2);
        assert!(TaskRegistry::new(swapped).is_err());
    }

    #[test]
    fn value_checks() {
        let r = TaskRegistry::canonical(32).unwrap();
        let ttc = r.by_name("time_to_crossing").unwrap();
        assert!(ttc.check_value(2.5).is_ok());
        assert!(ttc.check_value(6.0).is_err());
        let age = r.by_name("age").unwrap();
        assert!(age.check_value(3.0).is_ok());
        assert!(age.check_value(4.0).is_err());
        assert!(age.check_value(1.5).is_err());
        assert!(r.by_name("crossing").unwrap().check_value(0.5).is_err());
    }

    #[test]
    fn serde_roundtrip_validates() {
        let r = TaskRegistry::canonical(3).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: TaskRegistry = serde_json::from_str(&s).unwrap();
        assert_eq!(r, back);
        let broken = s.replace("\"id\":4", "\"id\":7");
        assert!(serde_json::from_str::<TaskRegistry>(&broken).is_err());
    }
}
