//! One function per subcommand. Each resolves the run configuration, does its
//! work and writes a [`RunManifest`] next to its outputs.

use std::path::Path;

use log::info;
use rayon::prelude::*;

use forkfield::engine::checkpoint::{CHECKPOINT_DATA, CHECKPOINT_MANIFEST};
use forkfield::engine::{load_checkpoint, save_checkpoint, EpochReport, Example, GradReport, Network, Trainer};
use forkfield::io::{self, DetectionEntry, DetectionFile, DetectionIndex, DETECTION_INDEX, MANIFEST_NAME};
use forkfield::metrics::{self, EvalImage, EvalReport};
use forkfield::{RunConfig, RunManifest, TaskRegistry};

use crate::args::{Common, DecodeArgs, EvaluateArgs, GenerateArgs, GradStudyArgs, TrainArgs};
use crate::error::CliError;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_TEXT: &str = "eval.txt";
pub const GRAD_STUDY_CSV: &str = "grad_study.csv";

/// Config file (or defaults) with the common flag overrides applied.
pub fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    Ok(config)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn csv_error(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("csv: {e}"))
}

pub fn generate(args: &GenerateArgs) -> CliResult<RunManifest> {
    let mut config = resolve(&args.common)?;
    if let Some(n) = args.scenes {
        config.scenes = n;
    }
    config.validate()?;
    let out = config.output.clone();
    let manifest = io::generate_split(&config.gen, config.scenes, &out)?;
    let mut run = RunManifest::new("generate", &config)?;
    run.outputs = std::iter::once(MANIFEST_NAME.to_string())
        .chain(manifest.scenes.iter().map(|s| s.file.clone()))
        .collect();
    run.write(&out)?;
    info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(run)
}

fn train_log(registry: &TaskRegistry, epochs: &[EpochReport]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "epoch",
        "steps",
        "loss",
        "backbone_norm",
        "head_norm",
        "bound_checks",
        "bound_violations",
        "projection_violations",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(registry.specs().iter().map(|s| format!("loss.{}", s.name)));
    w.write_record(&header).map_err(csv_error)?;
    for r in epochs {
        let mut row = vec![
            r.epoch.to_string(),
            r.steps.to_string(),
            r.loss.to_string(),
            r.backbone_norm.to_string(),
            r.head_norm.to_string(),
            r.bound_checks.to_string(),
            r.bound_violations.to_string(),
            r.projection_violations.to_string(),
        ];
        row.extend(
            r.task_losses
                .iter()
                .map(|l| l.map_or_else(String::new, |v| v.to_string())),
        );
        w.write_record(&row).map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

pub fn train(args: &TrainArgs) -> CliResult<RunManifest> {
    let mut config = resolve(&args.common)?;
    if let Some(strategy) = args.strategy {
        config.train.strategy = strategy;
    }
    if let Some(a) = args.tasks {
        config.attributes = Some(a);
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    config.validate()?;
    let (manifest, scenes) = io::load_split(&args.data)?;
    if scenes.is_empty() {
        return Err(CliError::Validation("the dataset has no scenes".into()));
    }
    let registry = config.training_registry(&manifest.registry)?;
    let net = Network::new(
        config.network.clone(),
        manifest.config.input_channels()?,
        &registry,
        config.seed,
    )?;
    let examples = scenes
        .iter()
        .map(|s| Example::from_scene(s, &net, &registry))
        .collect::<forkfield::Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(
        net,
        registry.clone(),
        config.train.clone(),
        config.loss.clone(),
        config.seed,
    )?;
    let mut epochs = Vec::with_capacity(config.train.epochs);
    for _ in 0..config.train.epochs {
        let r = trainer.train_epoch(&examples)?;
        info!(
            "epoch {} loss {:.6} backbone {:.4} heads {:.4}",
            r.epoch, r.loss, r.backbone_norm, r.head_norm
        );
        epochs.push(r);
    }
    let out = config.output.clone();
    io::write_bytes(&out.join(TRAIN_LOG), &train_log(&registry, &epochs)?)?;
    let echo = serde_json::to_value(&config).map_err(|e| CliError::Validation(e.to_string()))?;
    save_checkpoint(&out, &trainer, config.seed, echo, config.hash()?)?;
    let mut run = RunManifest::new("train", &config)?;
    run.inputs.insert("data".into(), display(&args.data));
    run.outputs = vec![CHECKPOINT_MANIFEST.into(), CHECKPOINT_DATA.into(), TRAIN_LOG.into()];
    run.write(&out)?;
    Ok(run)
}

pub fn decode(args: &DecodeArgs) -> CliResult<RunManifest> {
    let mut config = resolve(&args.common)?;
    if let Some(g) = args.gamma {
        config.decode.gamma = g;
    }
    config.validate()?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (data_dir, manifest) = io::read_manifest(&args.data)?;
    let registry = checkpoint.manifest.registry.clone();
    if !registry.is_subset_of(&manifest.registry)
        || checkpoint.manifest.input_channels != manifest.config.input_channels()?
    {
        return Err(CliError::Validation(
            "the checkpoint's registry or input channels do not match the dataset".into(),
        ));
    }
    let net = if args.ema {
        checkpoint.ema_network()
    } else {
        checkpoint.net.clone()
    };
    let out = config.output.clone();
    let mut entries = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let scene = io::read_scene(&data_dir.join(&entry.file))?;
        let forward = net.forward(&scene.input)?;
        let detections = forkfield::decode(&forward.fields, &registry, &config.decode)?;
        let geometry = net.geometry(scene.image_size[0], scene.image_size[1])?;
        let name = format!("{}.detections.json", entry.file.trim_end_matches(".scene.json"));
        io::write_json(
            &out.join(&name),
            &DetectionFile::new(entry.file.clone(), geometry, detections),
        )?;
        entries.push(DetectionEntry {
            scene: entry.file.clone(),
            detections: name,
        });
    }
    let index = DetectionIndex {
        format_version: io::FORMAT_VERSION,
        registry,
        entries,
    };
    io::write_json(&out.join(DETECTION_INDEX), &index)?;
    let mut run = RunManifest::new("decode", &config)?;
    run.inputs.insert("checkpoint".into(), display(&args.checkpoint));
    run.inputs.insert("data".into(), display(&args.data));
    run.inputs
        .insert("weights".into(), if args.ema { "ema" } else { "raw" }.into());
    run.outputs = std::iter::once(DETECTION_INDEX.to_string())
        .chain(index.entries.iter().map(|e| e.detections.clone()))
        .collect();
    run.write(&out)?;
    Ok(run)
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<EvalReport> {
    let config = resolve(&args.common)?;
    config.validate()?;
    let (det_dir, index) = io::read_detection_index(&args.detections)?;
    let (data_dir, _) = io::read_manifest(&args.data)?;
    let mut scenes = Vec::with_capacity(index.entries.len());
    let mut files = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        scenes.push(io::read_scene(&data_dir.join(&e.scene))?);
        files.push(io::read_detections(&det_dir.join(&e.detections))?);
    }
    let mut options = config.eval.clone();
    if let Some(train) = &args.train_data {
        let (_, train_scenes) = io::load_split(train)?;
        let majority = metrics::majority_classes(train_scenes.iter().flat_map(|s| s.instances.iter()), &index.registry);
        for (name, class) in majority {
            options.majority.entry(name).or_insert(class);
        }
    }
    let images: Vec<EvalImage<'_>> = scenes
        .iter()
        .zip(&files)
        .map(|(s, f)| EvalImage {
            instances: &s.instances,
            detections: &f.detections,
            geometry: f.geometry,
        })
        .collect();
    let report = metrics::evaluate(&images, &index.registry, &options)?;
    let out = config.output.clone();
    io::write_bytes(&out.join(EVAL_CSV), report.to_csv()?.as_bytes())?;
    io::write_bytes(&out.join(EVAL_TEXT), report.to_text().as_bytes())?;
    let mut run = RunManifest::new("evaluate", &config)?;
    run.inputs.insert("detections".into(), display(&args.detections));
    run.inputs.insert("data".into(), display(&args.data));
    if let Some(train) = &args.train_data {
        run.inputs.insert("train_data".into(), display(train));
    }
    run.outputs = vec![EVAL_CSV.into(), EVAL_TEXT.into()];
    run.write(&out)?;
    Ok(report)
}

pub fn grad_study(args: &GradStudyArgs) -> CliResult<GradReport> {
    let mut config = resolve(&args.common)?;
    if !args.tasks.is_empty() {
        config.study.attribute_sets = args.tasks.clone();
    }
    if !args.strategy.is_empty() {
        config.study.strategies = args.strategy.clone();
    }
    if let Some(e) = args.epochs {
        config.study.epochs = e;
    }
    if let Some(s) = args.seeds {
        config.study.seeds = s;
    }
    config.validate()?;
    let setup = config.study_setup();
    setup.validate()?;
    let cells = setup.cells();
    let results = if args.parallel {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
        // Results are collected in cell order, so the report does not depend
        // on scheduling.
        pool.install(|| {
            cells
                .par_iter()
                .map(|c| setup.run_cell(c))
                .collect::<forkfield::Result<Vec<_>>>()
        })?
    } else {
        cells
            .iter()
            .map(|c| setup.run_cell(c))
            .collect::<forkfield::Result<Vec<_>>>()?
    };
    let report = setup.assemble(&results)?;
    let out = config.output.clone();
    io::write_bytes(&out.join(GRAD_STUDY_CSV), report.to_csv()?.as_bytes())?;
    let mut run = RunManifest::new("grad-study", &config)?;
    run.outputs = vec![GRAD_STUDY_CSV.into()];
    run.write(&out)?;
    Ok(report)
}
