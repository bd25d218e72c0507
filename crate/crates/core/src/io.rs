//! On-disk formats.
//!
//! Every structured record is JSON carrying a `format_version`. Grids are
//! stored as flat little-endian `f32` (`<stem>.f32`, channel-major) next to
//! a JSON sidecar (`<stem>.json`) giving name, shape, stride and dtype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::FieldSet;
use crate::decoder::Detection;
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::grid::Grid;
use crate::registry::{TaskRegistry, REGISTRY_FORMAT_VERSION};
use crate::scene::{Instance, Scene};
use crate::synth::{self, GenConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const GRID_DTYPE: &str = "f32le";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON form of a value; key order is fixed by the types.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

fn check_version(path: &Path, found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format_version {found}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub format_version: u32,
    pub name: String,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    /// Pixels per cell; 1 for image-resolution grids.
    pub stride: usize,
    pub dtype: String,
    /// Data file relative to the sidecar.
    pub data: String,
}

fn sibling(path: &Path, file: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(file), |d| d.join(file))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes `<stem>.f32` and `<stem>.json` (appended, never replacing an
/// extension); returns the sidecar path.
pub fn write_grid(stem: &Path, name: &str, grid: &Grid, stride: usize) -> Result<PathBuf> {
    let data_path = PathBuf::from(format!("{}.f32", stem.display()));
    let header_path = PathBuf::from(format!("{}.json", stem.display()));
    let mut bytes = Vec::with_capacity(4 * grid.data().len());
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(&data_path, &bytes)?;
    let header = GridHeader {
        format_version: FORMAT_VERSION,
        name: name.to_string(),
        shape: grid.shape(),
        stride,
        dtype: GRID_DTYPE.to_string(),
        data: file_name(&data_path),
    };
    write_json(&header_path, &header)?;
    Ok(header_path)
}

pub fn read_grid(header_path: &Path) -> Result<(GridHeader, Grid)> {
    let header: GridHeader = read_json(header_path)?;
    check_version(header_path, header.format_version)?;
    if header.dtype != GRID_DTYPE {
        return Err(Error::format(
            header_path,
            format!("unsupported dtype '{}'", header.dtype),
        ));
    }
    let data_path = sibling(header_path, &header.data);
    let bytes = read_bytes(&data_path)?;
    let [c, h, w] = header.shape;
    if bytes.len() != 4 * c * h * w {
        return Err(Error::format(
            &data_path,
            format!("expected {} bytes, found {}", 4 * c * h * w, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let grid = Grid::from_vec(c, h, w, data)?;
    Ok((header, grid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub format_version: u32,
    pub attributes: TaskRegistry,
}

pub fn write_registry(path: &Path, registry: &TaskRegistry) -> Result<()> {
    write_json(
        path,
        &RegistryFile {
            format_version: REGISTRY_FORMAT_VERSION,
            attributes: registry.clone(),
        },
    )
}

pub fn read_registry(path: &Path) -> Result<TaskRegistry> {
    let file: RegistryFile = read_json(path)?;
    if file.format_version != REGISTRY_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported registry format_version {}", file.format_version),
        ));
    }
    Ok(file.attributes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub format_version: u32,
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
    /// Grid sidecar of the input, relative to this record.
    pub input: String,
    pub instances: Vec<Instance>,
}

/// Writes `<stem>.scene.json` and the input grid `<stem>.input.*`.
pub fn write_scene(stem: &Path, scene: &Scene) -> Result<PathBuf> {
    let input_stem = PathBuf::from(format!("{}.input", stem.display()));
    let header = write_grid(&input_stem, "input", &scene.input, 1)?;
    let path = PathBuf::from(format!("{}.scene.json", stem.display()));
    write_json(
        &path,
        &SceneRecord {
            format_version: FORMAT_VERSION,
            image_size: scene.image_size,
            input: file_name(&header),
            instances: scene.instances.clone(),
        },
    )?;
    Ok(path)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let record: SceneRecord = read_json(path)?;
    check_version(path, record.format_version)?;
    let (_, input) = read_grid(&sibling(path, &record.input))?;
    let scene = Scene {
        image_size: record.image_size,
        instances: record.instances,
        input,
    };
    scene.validate(None).map_err(|e| Error::format(path, e))?;
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldIndex {
    pub format_version: u32,
    pub geometry: GridGeometry,
    /// `(field name, grid sidecar)` in registry order.
    pub fields: Vec<(String, String)>,
}

/// Writes one grid per field plus `<stem>.fields.json`.
pub fn write_fieldset(stem: &Path, fields: &FieldSet, registry: &TaskRegistry) -> Result<PathBuf> {
    fields.validate(registry)?;
    let mut entries = Vec::with_capacity(fields.grids.len());
    for (spec, grid) in registry.specs().iter().zip(&fields.grids) {
        let header = write_grid(
            &PathBuf::from(format!("{}.{}", stem.display(), spec.name)),
            &spec.name,
            grid,
            fields.geometry.stride,
        )?;
        entries.push((spec.name.clone(), file_name(&header)));
    }
    let path = PathBuf::from(format!("{}.fields.json", stem.display()));
    write_json(
        &path,
        &FieldIndex {
            format_version: FORMAT_VERSION,
            geometry: fields.geometry,
            fields: entries,
        },
    )?;
    Ok(path)
}

pub fn read_fieldset(path: &Path, registry: &TaskRegistry) -> Result<FieldSet> {
    let index: FieldIndex = read_json(path)?;
    check_version(path, index.format_version)?;
    if index.fields.len() != registry.len()
        || index
            .fields
            .iter()
            .zip(registry.specs())
            .any(|((n, _), s)| n != &s.name)
    {
        return Err(Error::format(path, "fields do not match the registry"));
    }
    let grids = index
        .fields
        .iter()
        .map(|(_, file)| read_grid(&sibling(path, file)).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let fields = FieldSet {
        geometry: index.geometry,
        grids,
    };
    fields.validate(registry)?;
    Ok(fields)
}

/// Detections of one scene; positions and sizes in grid cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub format_version: u32,
    /// Scene record the detections belong to.
    pub scene: String,
    pub geometry: GridGeometry,
    pub detections: Vec<Detection>,
}

impl DetectionFile {
    pub fn new(scene: impl Into<String>, geometry: GridGeometry, detections: Vec<Detection>) -> Self {
        DetectionFile {
            format_version: FORMAT_VERSION,
            scene: scene.into(),
            geometry,
            detections,
        }
    }
}

pub fn read_detections(path: &Path) -> Result<DetectionFile> {
    let file: DetectionFile = read_json(path)?;
    check_version(path, file.format_version)?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    /// Scene record, relative to the dataset directory.
    pub scene: String,
    /// Detection file, relative to the index.
    pub detections: String,
}

/// Lists the detection file written for every scene of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionIndex {
    pub format_version: u32,
    /// Fields the detections carry.
    pub registry: TaskRegistry,
    pub entries: Vec<DetectionEntry>,
}

pub const DETECTION_INDEX: &str = "detections.json";

/// Reads the index in `dir` (or the index file itself).
pub fn read_detection_index(path: &Path) -> Result<(PathBuf, DetectionIndex)> {
    let file = if path.is_dir() {
        path.join(DETECTION_INDEX)
    } else {
        path.to_path_buf()
    };
    let index: DetectionIndex = read_json(&file)?;
    check_version(&file, index.format_version)?;
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    /// Scene record relative to the manifest.
    pub file: String,
    /// SHA-256 of the scene record and input data.
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: GenConfig,
    pub config_hash: String,
    pub registry: TaskRegistry,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn scene_hash(record: &Path) -> Result<String> {
    let r: SceneRecord = read_json(record)?;
    let header: GridHeader = read_json(&sibling(record, &r.input))?;
    let mut h = Sha256::new();
    h.update(read_bytes(record)?);
    h.update(read_bytes(&sibling(record, &r.input))?);
    h.update(read_bytes(&sibling(record, &header.data))?);
    Ok(hex::encode(h.finalize()))
}

/// Generates `n` scenes into `dir` with a manifest.
pub fn generate_split(config: &GenConfig, n: usize, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let scene = synth::generate_indexed(config, i)?;
        let record = write_scene(&dir.join(format!("scene_{i:05}")), &scene)?;
        scenes.push(SceneEntry {
            file: file_name(&record),
            hash: scene_hash(&record)?,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        config_hash: config_hash(config)?,
        registry: config.registry()?,
        scenes,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

/// Reads the manifest in `dir` (or the manifest file itself).
pub fn read_manifest(path: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let file = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let manifest: DatasetManifest = read_json(&file)?;
    check_version(&file, manifest.format_version)?;
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, manifest))
}

pub fn load_split(path: &Path) -> Result<(DatasetManifest, Vec<Scene>)> {
    let (dir, manifest) = read_manifest(path)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| read_scene(&dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}
