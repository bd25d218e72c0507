//! Detection and attribute evaluation.
//!
//! Average precision uses all-point interpolation: AP is the sum over recall
//! levels `k / n_gt` (in increasing order) of `p_interp(k)`, divided by
//! `n_gt`, where `p_interp(k)` is the best precision among thresholds
//! reaching at least `k` true positives.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Detection, Prediction};
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::registry::{AttributeKind, AttributeSpec, Group, TaskRegistry};
use crate::scene::Instance;

/// Axis-aligned box by center, width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCwh {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
}

impl BoxCwh {
    pub fn new(center: [f64; 2], width: f64, height: f64) -> Self {
        BoxCwh { center, width, height }
    }

    pub fn of_instance(i: &Instance) -> Self {
        BoxCwh::new(i.center, i.width, i.height)
    }

    /// Detection box in pixels.
    pub fn of_detection(d: &Detection, geometry: &GridGeometry) -> Self {
        BoxCwh::new(
            geometry.to_image(d.center),
            geometry.to_pixels(d.width),
            geometry.to_pixels(d.height),
        )
    }

    fn bounds(&self) -> [f64; 4] {
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        [
            self.center[0] - hw,
            self.center[1] - hh,
            self.center[0] + hw,
            self.center[1] + hh,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [x0, y0, x1, y1] = self.bounds();
        (x0..=x1).contains(&p[0]) && (y0..=y1).contains(&p[1])
    }
}

pub fn iou(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.bounds();
    let [bx0, by0, bx1, by1] = b.bounds();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.width.max(0.0) * a.height.max(0.0) + b.width.max(0.0) * b.height.max(0.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub flags: Vec<bool>,
    /// Ground truth matched by each detection.
    pub matched: Vec<Option<usize>>,
    pub unmatched_gt: usize,
}

/// Greedy matching of detections (sorted by descending score) to ground
/// truths; each detection takes the unmatched ground truth of highest IoU.
pub fn match_detections(detections: &[BoxCwh], truths: &[BoxCwh], threshold: f64) -> Matching {
    let mut used = vec![false; truths.len()];
    let mut matched = Vec::with_capacity(detections.len());
    for d in detections {
        let mut best: Option<(usize, f64)> = None;
        for (g, t) in truths.iter().enumerate().filter(|(g, _)| !used[*g]) {
            let v = iou(d, t);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        matched.push(best.map(|(g, _)| g));
    }
    Matching {
        flags: matched.iter().map(Option::is_some).collect(),
        unmatched_gt: used.iter().filter(|u| !**u).count(),
        matched,
    }
}

/// AP of a ranking where each position is its own threshold.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    let items: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, &f)| (-(i as f64), f)).collect();
    average_precision_scored(&items, n_gt)
}

/// AP of `(score, is_true_positive)` items; equal scores form one threshold.
pub fn average_precision_scored(items: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if items.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sorted: Vec<(f64, bool)> = items.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // cumulative (tp, predictions) at the end of each score group
    let mut points: Vec<(usize, usize)> = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    for (i, &(score, is_tp)) in sorted.iter().enumerate() {
        tp += usize::from(is_tp);
        seen += 1;
        if sorted.get(i + 1).is_none_or(|next| next.0 != score) {
            points.push((tp, seen));
        }
    }
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (j, &(tp, seen)) in points.iter().enumerate().rev() {
        best = best.max(tp as f64 / seen as f64);
        envelope[j] = best;
    }
    let mut area = 0.0;
    let mut level = 0;
    for (j, &(tp, _)) in points.iter().enumerate() {
        while level < tp.min(n_gt) {
            level += 1;
            area += envelope[j];
        }
    }
    area / n_gt as f64
}

/// Ground truths and decoded detections of one image.
#[derive(Clone, Copy, Debug)]
pub struct EvalImage<'a> {
    pub instances: &'a [Instance],
    pub detections: &'a [Detection],
    pub geometry: GridGeometry,
}

/// A detection of some image with its matched ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedDetection {
    pub image: usize,
    pub detection: usize,
    pub score: f64,
    pub gt: Option<usize>,
}

fn sorted_indices(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

pub fn match_images(images: &[EvalImage<'_>], threshold: f64) -> Vec<MatchedDetection> {
    let mut out = Vec::new();
    for (image, im) in images.iter().enumerate() {
        let order = sorted_indices(im.detections);
        let boxes: Vec<BoxCwh> = order
            .iter()
            .map(|&d| BoxCwh::of_detection(&im.detections[d], &im.geometry))
            .collect();
        let truths: Vec<BoxCwh> = im.instances.iter().map(BoxCwh::of_instance).collect();
        let m = match_detections(&boxes, &truths, threshold);
        for (k, &d) in order.iter().enumerate() {
            out.push(MatchedDetection {
                image,
                detection: d,
                score: im.detections[d].score,
                gt: m.matched[k],
            });
        }
    }
    out
}

pub fn detection_ap(images: &[EvalImage<'_>], matches: &[MatchedDetection]) -> f64 {
    let n_gt = images.iter().map(|i| i.instances.len()).sum();
    let items: Vec<(f64, bool)> = matches.iter().map(|m| (m.score, m.gt.is_some())).collect();
    average_precision_scored(&items, n_gt)
}

fn class_count(spec: &AttributeSpec) -> Option<usize> {
    match spec.kind {
        AttributeKind::Binary => Some(2),
        AttributeKind::Categorical { classes } => Some(classes),
        _ => None,
    }
}

fn annotated(images: &[EvalImage<'_>], image: usize, gt: usize, spec: &AttributeSpec) -> Option<f64> {
    images[image].instances[gt].attribute(&spec.name)
}

/// Mean over classes of the AP of detections ranked by `score * p(class)`.
/// `None` when no ground truth is annotated for the attribute. Detections on
/// ground truths lacking the annotation are skipped.
pub fn attribute_ap(
    images: &[EvalImage<'_>],
    matches: &[MatchedDetection],
    spec: &AttributeSpec,
) -> Result<Option<f64>> {
    let classes =
        class_count(spec).ok_or_else(|| Error::invalid(format!("'{}' is not a class attribute", spec.name)))?;
    let mut aps = Vec::new();
    for v in 0..classes {
        let n_gt = images
            .iter()
            .flat_map(|i| i.instances.iter())
            .filter(|g| g.attribute(&spec.name) == Some(v as f64))
            .count();
        if n_gt == 0 {
            continue;
        }
        let mut items = Vec::new();
        for m in matches {
            let label = m.gt.map(|g| annotated(images, m.image, g, spec));
            // detections on ground truths lacking this annotation are not evaluated
            if label == Some(None) {
                continue;
            }
            let confidence = m.score * prediction(images, m, spec)?.class_probability(v);
            // zero confidence in a class is no prediction of it
            if confidence > 0.0 {
                items.push((confidence, label.flatten() == Some(v as f64)));
            }
        }
        aps.push(average_precision_scored(&items, n_gt));
    }
    Ok((!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64))
}

fn prediction<'a>(images: &'a [EvalImage<'_>], m: &MatchedDetection, spec: &AttributeSpec) -> Result<&'a Prediction> {
    images[m.image].detections[m.detection]
        .attributes
        .get(&spec.name)
        .ok_or_else(|| Error::invalid(format!("detection lacks a prediction for '{}'", spec.name)))
}

/// Absolute-error thresholds 0.5, 1.0, ..., 5.0.
pub fn ttc_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| 0.5 * (k + 1) as f64)
}

/// Mean over error thresholds of the AP where a matched detection is a true
/// positive when its value is within the threshold.
pub fn ttc_ap(images: &[EvalImage<'_>], matches: &[MatchedDetection], spec: &AttributeSpec) -> Result<Option<f64>> {
    let n_gt = images
        .iter()
        .flat_map(|i| i.instances.iter())
        .filter(|g| g.attribute(&spec.name).is_some())
        .count();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut errors: Vec<(f64, Option<f64>)> = Vec::new();
    for m in matches {
        match m.gt.map(|g| annotated(images, m.image, g, spec)) {
            Some(None) => continue,
            Some(Some(truth)) => errors.push((m.score, Some((prediction(images, m, spec)?.value() - truth).abs()))),
            None => errors.push((m.score, None)),
        }
    }
    let thresholds = ttc_thresholds();
    let total: f64 = thresholds
        .iter()
        .map(|&tau| {
            let items: Vec<(f64, bool)> = errors.iter().map(|&(s, e)| (s, e.is_some_and(|e| e < tau))).collect();
            average_precision_scored(&items, n_gt)
        })
        .sum();
    Ok(Some(total / thresholds.len() as f64))
}

/// Class probabilities assigned to one ground truth in the box setting.
#[derive(Clone, Debug, PartialEq)]
pub struct GtPrediction {
    pub image: usize,
    pub gt: usize,
    pub label: usize,
    pub probabilities: Vec<f64>,
    /// False when no detection center fell inside the box.
    pub matched: bool,
}

fn probabilities(pred: &Prediction, classes: usize) -> Vec<f64> {
    (0..classes).map(|v| pred.class_probability(v)).collect()
}

fn one_hot(classes: usize, v: usize) -> Vec<f64> {
    (0..classes).map(|c| f64::from(u8::from(c == v))).collect()
}

/// Each annotated ground truth takes the prediction of the detection whose
/// center is inside its box and closest to its center, or the majority class.
pub fn gt_predictions(images: &[EvalImage<'_>], spec: &AttributeSpec, majority: usize) -> Result<Vec<GtPrediction>> {
    let classes =
        class_count(spec).ok_or_else(|| Error::invalid(format!("'{}' is not a class attribute", spec.name)))?;
    if majority >= classes {
        return Err(Error::invalid(format!(
            "majority class {majority} out of range for '{}'",
            spec.name
        )));
    }
    let mut out = Vec::new();
    for (image, im) in images.iter().enumerate() {
        let centers: Vec<[f64; 2]> = im.detections.iter().map(|d| im.geometry.to_image(d.center)).collect();
        for (gt, inst) in im.instances.iter().enumerate() {
            let Some(label) = inst.attribute(&spec.name) else {
                continue;
            };
            let b = BoxCwh::of_instance(inst);
            let mut best: Option<(usize, f64)> = None;
            for (d, c) in centers.iter().enumerate().filter(|(_, c)| b.contains(**c)) {
                let dist = (c[0] - inst.center[0]).hypot(c[1] - inst.center[1]);
                if best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((d, dist));
                }
            }
            let probs = match best {
                Some((d, _)) => {
                    let pred = im.detections[d]
                        .attributes
                        .get(&spec.name)
                        .ok_or_else(|| Error::invalid(format!("detection lacks a prediction for '{}'", spec.name)))?;
                    probabilities(pred, classes)
                }
                None => one_hot(classes, majority),
            };
            out.push(GtPrediction {
                image,
                gt,
                label: label as usize,
                probabilities: probs,
                matched: best.is_some(),
            });
        }
    }
    Ok(out)
}

/// Class-mean AP over ground-truth-level predictions.
pub fn class_mean_ap(items: &[(Vec<f64>, usize)], classes: usize) -> Option<f64> {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|v| {
            let n_gt = items.iter().filter(|(_, l)| *l == v).count();
            (n_gt > 0).then(|| {
                let scored: Vec<(f64, bool)> = items
                    .iter()
                    .filter(|(p, _)| p[v] > 0.0)
                    .map(|(p, l)| (p[v], *l == v))
                    .collect();
                average_precision_scored(&scored, n_gt)
            })
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub const BALANCED_RESAMPLES: usize = 10;

/// Mean AP over class-balanced resamples of the annotated ground truths.
pub fn balanced_ap_star<R: Rng + ?Sized>(
    images: &[EvalImage<'_>],
    spec: &AttributeSpec,
    majority: usize,
    rng: &mut R,
) -> Result<f64> {
    if spec.kind != AttributeKind::Binary {
        return Err(Error::invalid(format!(
            "balanced AP needs a binary attribute, '{}' is not",
            spec.name
        )));
    }
    let preds = gt_predictions(images, spec, majority)?;
    let by_class: [Vec<&GtPrediction>; 2] = [0, 1].map(|v| preds.iter().filter(|p| p.label == v).collect());
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "balanced AP for '{}' needs both classes",
            spec.name
        )));
    }
    let minority = usize::from(by_class[1].len() < by_class[0].len());
    let other = 1 - minority;
    let n = by_class[minority].len();
    let mut total = 0.0;
    for _ in 0..BALANCED_RESAMPLES {
        let picked = sample(rng, by_class[other].len(), n);
        let items: Vec<(Vec<f64>, usize)> = by_class[minority]
            .iter()
            .copied()
            .chain(picked.iter().map(|i| by_class[other][i]))
            .map(|p| (p.probabilities.clone(), p.label))
            .collect();
        total += class_mean_ap(&items, 2).expect("both classes present");
    }
    Ok(total / BALANCED_RESAMPLES as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxEval {
    pub attribute: String,
    pub accuracy: f64,
    pub ap: f64,
    pub image_accuracy: Option<f64>,
    pub image_ap: Option<f64>,
}

/// Box-classification protocol for one class attribute.
pub fn box_classification_eval(
    images: &[EvalImage<'_>],
    spec: &AttributeSpec,
    majority: usize,
) -> Result<Option<BoxEval>> {
    let classes =
        class_count(spec).ok_or_else(|| Error::invalid(format!("'{}' is not a class attribute", spec.name)))?;
    let preds = gt_predictions(images, spec, majority)?;
    if preds.is_empty() {
        return Ok(None);
    }
    let correct = preds
        .iter()
        .filter(|p| crate::math::argmax(&p.probabilities) == p.label)
        .count();
    let items: Vec<(Vec<f64>, usize)> = preds.iter().map(|p| (p.probabilities.clone(), p.label)).collect();
    let ap = class_mean_ap(&items, classes).expect("some annotated ground truth");
    let (image_accuracy, image_ap) = if spec.kind == AttributeKind::Binary {
        image_wise(images, spec, majority)
    } else {
        (None, None)
    };
    Ok(Some(BoxEval {
        attribute: spec.name.clone(),
        accuracy: correct as f64 / preds.len() as f64,
        ap,
        image_accuracy,
        image_ap,
    }))
}

/// An image is positive when any annotated instance is; its score is the
/// highest positive probability among its detections.
fn image_wise(images: &[EvalImage<'_>], spec: &AttributeSpec, majority: usize) -> (Option<f64>, Option<f64>) {
    let mut items = Vec::new();
    for im in images {
        let labels: Vec<f64> = im.instances.iter().filter_map(|i| i.attribute(&spec.name)).collect();
        if labels.is_empty() {
            continue;
        }
        let label = usize::from(labels.contains(&1.0));
        let p = im
            .detections
            .iter()
            .filter_map(|d| d.attributes.get(&spec.name))
            .map(|p| p.class_probability(1))
            .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))))
            .unwrap_or(f64::from(u8::from(majority == 1)));
        items.push((vec![1.0 - p, p], label));
    }
    if items.is_empty() {
        return (None, None);
    }
    let correct = items.iter().filter(|(p, l)| usize::from(p[1] >= 0.5) == *l).count();
    (Some(correct as f64 / items.len() as f64), class_mean_ap(&items, 2))
}

/// Most frequent annotated class of every class attribute (ties: lowest class).
pub fn majority_classes<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    registry: &TaskRegistry,
) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for spec in registry.attributes() {
        if let Some(k) = class_count(spec) {
            counts.insert(spec.name.clone(), vec![0; k]);
        }
    }
    for inst in instances {
        for (name, c) in counts.iter_mut() {
            if let Some(v) = inst.attribute(name) {
                if let Some(slot) = c.get_mut(v as usize) {
                    *slot += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|(name, c)| {
            let best = c.iter().enumerate().fold(0, |b, (i, &n)| if n > c[b] { i } else { b });
            (name, best)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Binary attributes also reported as balanced AP*.
    pub balanced: Vec<String>,
    /// Attribute evaluated in the box-classification protocol.
    pub box_attribute: Option<String>,
    /// Training-set majority classes; missing entries fall back to the evaluated set.
    pub majority: BTreeMap<String, usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            iou_threshold: 0.5,
            balanced: vec!["looking".into(), "walking".into()],
            box_attribute: Some("crossing".into()),
            majority: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid("IoU threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection_ap: f64,
    /// AP per attribute in registry order; `None` when never annotated.
    pub attributes: Vec<(String, Option<f64>)>,
    pub map: f64,
    pub balanced: Vec<(String, f64)>,
    pub box_eval: Option<BoxEval>,
}

impl EvalReport {
    pub fn attribute(&self, name: &str) -> Option<f64> {
        self.attributes.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }

    /// Recomputes mAP from the individual APs.
    pub fn recomputed_map(&self) -> f64 {
        let present: Vec<f64> = std::iter::once(self.detection_ap)
            .chain(self.attributes.iter().filter_map(|(_, v)| *v))
            .collect();
        present.iter().sum::<f64>() / present.len() as f64
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["metric", "value"]).map_err(err)?;
        let mut row = |k: String, v: Option<f64>| w.write_record([k, v.map_or_else(String::new, |v| v.to_string())]);
        row("detection_ap".into(), Some(self.detection_ap)).map_err(err)?;
        for (name, v) in &self.attributes {
            row(format!("ap.{name}"), *v).map_err(err)?;
        }
        row("map".into(), Some(self.map)).map_err(err)?;
        for (name, v) in &self.balanced {
            row(format!("ap_star.{name}"), Some(*v)).map_err(err)?;
        }
        if let Some(b) = &self.box_eval {
            row(format!("box_accuracy.{}", b.attribute), Some(b.accuracy)).map_err(err)?;
            row(format!("box_ap.{}", b.attribute), Some(b.ap)).map_err(err)?;
            row(format!("image_accuracy.{}", b.attribute), b.image_accuracy).map_err(err)?;
            row(format!("image_ap.{}", b.attribute), b.image_ap).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {}", "detection AP", pct(self.detection_ap));
        for (name, v) in &self.attributes {
            let _ = writeln!(s, "{:<24} {}", name, v.map_or_else(|| "   n/a".to_string(), pct));
        }
        let _ = writeln!(s, "{:<24} {}", "mAP", pct(self.map));
        for (name, v) in &self.balanced {
            let _ = writeln!(s, "{:<24} {}", format!("{name} AP*"), pct(*v));
        }
        if let Some(b) = &self.box_eval {
            let _ = writeln!(s, "{:<24} {}", format!("{} box acc", b.attribute), pct(b.accuracy));
            let _ = writeln!(s, "{:<24} {}", format!("{} box AP", b.attribute), pct(b.ap));
            if let (Some(a), Some(p)) = (b.image_accuracy, b.image_ap) {
                let _ = writeln!(s, "{:<24} {}", format!("{} image acc", b.attribute), pct(a));
                let _ = writeln!(s, "{:<24} {}", format!("{} image AP", b.attribute), pct(p));
            }
        }
        s
    }
}

/// Full report for a set of images.
pub fn evaluate(images: &[EvalImage<'_>], registry: &TaskRegistry, options: &EvalOptions) -> Result<EvalReport> {
    options.validate()?;
    let matches = match_images(images, options.iou_threshold);
    let detection_ap = detection_ap(images, &matches);
    let mut attributes = Vec::new();
    for spec in registry.specs().iter().filter(|s| s.group != Group::Detection) {
        let ap = match spec.kind {
            AttributeKind::Binary | AttributeKind::Categorical { .. } => attribute_ap(images, &matches, spec)?,
            AttributeKind::Continuous => ttc_ap(images, &matches, spec)?,
            AttributeKind::Vectorial => continue,
        };
        attributes.push((spec.name.clone(), ap));
    }
    let fallback = majority_classes(images.iter().flat_map(|i| i.instances.iter()), registry);
    let majority = |name: &str| {
        options
            .majority
            .get(name)
            .or_else(|| fallback.get(name))
            .copied()
            .unwrap_or(0)
    };
    let mut balanced = Vec::new();
    let mut rng = crate::seed::stream(options.seed, "balanced");
    for name in &options.balanced {
        let Some(spec) = registry.by_name(name) else { continue };
        match balanced_ap_star(images, spec, majority(name), &mut rng) {
            Ok(v) => balanced.push((name.clone(), v)),
            Err(e) => log::warn!("skipping balanced AP for '{name}': {e}"),
        }
    }
    let box_eval = match options.box_attribute.as_deref().and_then(|n| registry.by_name(n)) {
        Some(spec) => box_classification_eval(images, spec, majority(&spec.name))?,
        None => None,
    };
    let mut report = EvalReport {
        detection_ap,
        attributes,
        map: 0.0,
        balanced,
        box_eval,
    };
    report.map = report.recomputed_map();
    Ok(report)
}
