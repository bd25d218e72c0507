//! Subcommands driven through the library entry points and the binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use forkfield::config::RUN_MANIFEST;
use forkfield::engine::checkpoint::{CHECKPOINT_DATA, CHECKPOINT_MANIFEST};
use forkfield::engine::MergeStrategy;
use forkfield::io::{self, DetectionEntry, DetectionFile, DetectionIndex, DETECTION_INDEX, MANIFEST_NAME};
use forkfield::{decode, encode_targets, ideal_fields, DecodeParams, RunConfig};
use forkfield_cli::args::{Common, DecodeArgs, EvaluateArgs, GenerateArgs, GradStudyArgs, TrainArgs};
use forkfield_cli::commands::{self, EVAL_CSV, GRAD_STUDY_CSV, TRAIN_LOG};
use forkfield_cli::error::{CliError, EXIT_IO, EXIT_USAGE, EXIT_VALIDATION};
use tempfile::TempDir;

const SMALL: &str = r#"
scenes = 10

[gen]
image_size = [96, 48]
instances = [1, 2]
box_width = [16.0, 24.0]
box_height = [20.0, 28.0]
attributes = 3

[[network.backbone]]
channels = 6
stride = 2
kernel = 3

[[network.backbone]]
channels = 6
stride = 2
kernel = 3

[train]
epochs = 1

[study]
scenes = 3
epochs = 1
seeds = 1
"#;

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(toml: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, toml).unwrap();
        Workspace { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn common(&self, out: &str, seed: u64) -> Common {
        Common {
            config: Some(self.config.clone()),
            seed: Some(seed),
            out: Some(self.path(out)),
        }
    }

    fn generate(&self, out: &str, scenes: usize, seed: u64) -> PathBuf {
        commands::generate(&GenerateArgs {
            common: self.common(out, seed),
            scenes: Some(scenes),
        })
        .unwrap();
        self.path(out)
    }

    fn train_args(&self, data: &Path, out: &str, seed: u64) -> TrainArgs {
        TrainArgs {
            common: self.common(out, seed),
            data: data.to_path_buf(),
            strategy: None,
            tasks: None,
            epochs: None,
        }
    }

    fn decode_args(&self, checkpoint: &Path, data: &Path, out: &str, gamma: Option<f64>) -> DecodeArgs {
        DecodeArgs {
            common: self.common(out, 0),
            checkpoint: checkpoint.to_path_buf(),
            data: data.to_path_buf(),
            ema: false,
            gamma,
        }
    }

    fn evaluate_args(&self, detections: &Path, data: &Path, out: &str) -> EvaluateArgs {
        EvaluateArgs {
            common: self.common(out, 0),
            detections: detections.to_path_buf(),
            data: data.to_path_buf(),
            train_data: None,
        }
    }

    fn study_args(&self, out: &str, tasks: Vec<usize>, strategy: Vec<MergeStrategy>) -> GradStudyArgs {
        GradStudyArgs {
            common: self.common(out, 5),
            tasks,
            strategy,
            epochs: None,
            seeds: None,
            parallel: false,
            threads: None,
        }
    }
}

fn forkfield(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_forkfield"))
        .args(args)
        .output()
        .unwrap()
}

fn detection_counts(dir: &Path) -> Vec<usize> {
    let (det_dir, index) = io::read_detection_index(dir).unwrap();
    index
        .entries
        .iter()
        .map(|e| {
            io::read_detections(&det_dir.join(&e.detections))
                .unwrap()
                .detections
                .len()
        })
        .collect()
}

/// Writes a detections directory for `data` whose files are produced by `detect`.
fn write_detections(data: &Path, out: &Path, detect: impl Fn(&forkfield::Scene) -> DetectionFile) {
    let (manifest, scenes) = io::load_split(data).unwrap();
    let mut entries = Vec::new();
    for (entry, scene) in manifest.scenes.iter().zip(&scenes) {
        let name = format!("{}.detections.json", entries.len());
        io::write_json(&out.join(&name), &detect(scene)).unwrap();
        entries.push(DetectionEntry {
            scene: entry.file.clone(),
            detections: name,
        });
    }
    let index = DetectionIndex {
        format_version: io::FORMAT_VERSION,
        registry: manifest.registry,
        entries,
    };
    io::write_json(&out.join(DETECTION_INDEX), &index).unwrap();
}

#[test]
fn generate_writes_a_manifest_and_one_file_per_scene() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 3, 1);
    let (_, manifest) = io::read_manifest(&data).unwrap();
    assert_eq!(manifest.scenes.len(), 3);
    assert!(manifest.scenes.iter().all(|s| data.join(&s.file).is_file()));

    let run: serde_json::Value = io::read_json(&data.join(RUN_MANIFEST)).unwrap();
    assert_eq!(run["seed"], 1);
    assert_eq!(run["config"]["gen"]["seed"], 1);
    let echoed: RunConfig = serde_json::from_value(run["config"].clone()).unwrap();
    assert_eq!(run["config_hash"], echoed.hash().unwrap());
}

#[test]
fn zero_scenes_give_an_empty_manifest() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 0, 0);
    let (_, manifest) = io::read_manifest(&data).unwrap();
    assert!(manifest.scenes.is_empty());
    assert!(data.join(MANIFEST_NAME).is_file());
}

#[test]
fn exit_codes_separate_usage_validation_and_io() {
    let ws = Workspace::new("[gen]\nno_such_key = 1\n");
    let config = ws.config.to_str().unwrap();
    let out = ws.path("out");
    let out = out.to_str().unwrap();

    let unknown_key = forkfield(&["generate", "--config", config, "--out", out]);
    assert_eq!(unknown_key.status.code(), Some(i32::from(EXIT_USAGE)));
    assert_eq!(
        forkfield(&["generate", "--no-such-flag"]).status.code(),
        Some(i32::from(EXIT_USAGE))
    );
    assert_eq!(forkfield(&["--help"]).status.code(), Some(0));

    let empty = Workspace::new("");
    let config = empty.config.to_str().unwrap();
    let bad_gamma = forkfield(&[
        "decode",
        "--config",
        config,
        "--checkpoint",
        out,
        "--data",
        out,
        "--gamma",
        "1.5",
    ]);
    assert_eq!(bad_gamma.status.code(), Some(i32::from(EXIT_VALIDATION)));
    let missing = forkfield(&[
        "evaluate",
        "--config",
        config,
        "--detections",
        out,
        "--data",
        out,
        "--out",
        out,
    ]);
    assert_eq!(missing.status.code(), Some(i32::from(EXIT_IO)));
}

#[test]
fn one_epoch_writes_a_checkpoint_and_one_log_row() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 10, 2);
    commands::train(&ws.train_args(&data, "a", 7)).unwrap();
    let a = ws.path("a");
    assert!(a.join(CHECKPOINT_MANIFEST).is_file());
    let mut log = csv::Reader::from_path(a.join(TRAIN_LOG)).unwrap();
    let header = log.headers().unwrap().clone();
    assert_eq!(&header[0], "epoch");
    assert!(header.iter().any(|h| h == "loss.confidence"));
    assert_eq!(log.records().count(), 1);

    commands::train(&ws.train_args(&data, "b", 7)).unwrap();
    let bytes = |dir: &str| std::fs::read(ws.path(dir).join(CHECKPOINT_DATA)).unwrap();
    assert_eq!(
        io::sha256_hex(&bytes("a")),
        io::sha256_hex(&bytes("b")),
        "same seed, same checkpoint"
    );
}

#[test]
fn training_on_attributes_the_data_lacks_is_rejected() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 2, 0);
    let mut args = ws.train_args(&data, "run", 0);
    args.tasks = Some(13);
    let err = commands::train(&args).unwrap_err();
    assert_eq!(err.code(), EXIT_VALIDATION, "{err}");
    assert!(!ws.path("run").join(CHECKPOINT_MANIFEST).exists());
}

#[test]
fn decode_rejects_a_checkpoint_for_another_registry() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 2, 0);
    commands::train(&ws.train_args(&data, "run", 0)).unwrap();

    let other = Workspace::new(&SMALL.replace("attributes = 3", "attributes = 1"));
    let narrow = other.generate("data", 2, 0);
    let err = commands::decode(&ws.decode_args(&ws.path("run"), &narrow, "dets", None)).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)), "{err}");
}

#[test]
fn decode_is_deterministic_and_monotone_in_gamma() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 10, 3);
    commands::train(&ws.train_args(&data, "run", 3)).unwrap();
    let ckpt = ws.path("run");

    commands::decode(&ws.decode_args(&ckpt, &data, "d1", Some(0.2))).unwrap();
    commands::decode(&ws.decode_args(&ckpt, &data, "d2", Some(0.2))).unwrap();
    let (_, index) = io::read_detection_index(&ws.path("d1")).unwrap();
    for e in &index.entries {
        let read = |dir: &str| std::fs::read(ws.path(dir).join(&e.detections)).unwrap();
        assert_eq!(read("d1"), read("d2"), "{}", e.detections);
    }

    commands::decode(&ws.decode_args(&ckpt, &data, "strict", Some(0.99))).unwrap();
    for (loose, strict) in detection_counts(&ws.path("d1"))
        .into_iter()
        .zip(detection_counts(&ws.path("strict")))
    {
        assert!(strict <= loose);
    }
}

#[test]
fn background_only_scenes_decode_to_nothing() {
    let ws = Workspace::new(SMALL);
    // One epoch: the confidence head starts at a low foreground prior.
    let data = ws.generate("data", 6, 4);
    commands::train(&ws.train_args(&data, "run", 4)).unwrap();
    let empty = Workspace::new(&SMALL.replace("instances = [1, 2]", "instances = [0, 0]"));
    let background = empty.generate("data", 4, 4);
    commands::decode(&ws.decode_args(&ws.path("run"), &background, "dets", None)).unwrap();
    assert_eq!(detection_counts(&ws.path("dets")), vec![0; 4]);
}

#[test]
fn perfect_detections_score_one_and_empty_ones_zero() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data", 8, 5);
    let (manifest, _) = io::load_split(&data).unwrap();
    let registry = manifest.registry.clone();

    let perfect = ws.path("perfect");
    write_detections(&data, &perfect, |scene| {
        let geom = forkfield::GridGeometry::for_image(scene.image_size[0], scene.image_size[1], 4).unwrap();
        let targets = encode_targets(scene, &registry, &geom).unwrap();
        let dets = decode(
            &ideal_fields(&targets, &registry, 8.0),
            &registry,
            &DecodeParams::default(),
        )
        .unwrap();
        DetectionFile::new("", geom, dets)
    });
    let report = commands::evaluate(&ws.evaluate_args(&perfect, &data, "eval")).unwrap();
    assert_eq!(report.detection_ap, 1.0);
    assert_eq!(report.map, 1.0);

    // The written report agrees with a recomputation from its own columns.
    let mut rows = csv::Reader::from_path(ws.path("eval").join(EVAL_CSV)).unwrap();
    let mut aps = Vec::new();
    let mut map = None;
    for row in rows.records() {
        let row = row.unwrap();
        let value = || row[1].parse::<f64>().ok();
        match &row[0] {
            "detection_ap" => aps.extend(value()),
            "map" => map = value(),
            name if name.starts_with("ap.") => aps.extend(value()),
            _ => {}
        }
    }
    assert_eq!(aps.len(), registry.attributes().count() + 1);
    assert_eq!(map, Some(aps.iter().sum::<f64>() / aps.len() as f64));

    let empty = ws.path("empty");
    write_detections(&data, &empty, |scene| {
        let geom = forkfield::GridGeometry::for_image(scene.image_size[0], scene.image_size[1], 4).unwrap();
        DetectionFile::new("", geom, Vec::new())
    });
    let report = commands::evaluate(&ws.evaluate_args(&empty, &data, "eval_empty")).unwrap();
    assert_eq!(report.detection_ap, 0.0);
    assert_eq!(report.recomputed_map(), report.map);
}

fn study_rows(csv_path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(csv_path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn count_kind(rows: &[csv::StringRecord], headers: &csv::StringRecord, kind: &str) -> usize {
    let col = headers.iter().position(|h| h == "kind").unwrap();
    rows.iter().filter(|r| &r[col] == kind).count()
}

#[test]
fn a_single_cell_study_has_two_norm_rows_and_no_slopes() {
    let ws = Workspace::new(SMALL);
    commands::grad_study(&ws.study_args("one", vec![1], vec![MergeStrategy::Accumulation])).unwrap();
    let path = ws.path("one").join(GRAD_STUDY_CSV);
    let headers = csv::Reader::from_path(&path).unwrap().headers().unwrap().clone();
    let rows = study_rows(&path);
    assert_eq!(count_kind(&rows, &headers, "norm"), 2);
    assert_eq!(count_kind(&rows, &headers, "slope"), 0);
    assert!(count_kind(&rows, &headers, "warning") >= 1);
}

#[test]
fn the_full_sweep_is_reproducible_and_parallel_safe() {
    let ws = Workspace::new(&SMALL.replace("attributes = 3", "attributes = 32"));
    let sweep = || ws.study_args("seq", vec![], vec![]);
    let report = commands::grad_study(&sweep()).unwrap();
    assert_eq!(report.slopes.len(), 8);
    let path = ws.path("seq").join(GRAD_STUDY_CSV);
    let headers = csv::Reader::from_path(&path).unwrap().headers().unwrap().clone();
    let rows = study_rows(&path);
    assert_eq!(count_kind(&rows, &headers, "norm"), 32);
    assert_eq!(count_kind(&rows, &headers, "slope"), 8);
    let first = std::fs::read(&path).unwrap();

    commands::grad_study(&sweep()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first, "repeat differs");

    let mut parallel = ws.study_args("par", vec![], vec![]);
    parallel.parallel = true;
    parallel.threads = Some(2);
    commands::grad_study(&parallel).unwrap();
    assert_eq!(
        std::fs::read(ws.path("par").join(GRAD_STUDY_CSV)).unwrap(),
        first,
        "parallel differs"
    );
}
