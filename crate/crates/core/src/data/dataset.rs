use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ply::{read_ply, write_ply};
use super::render::{render_silhouette, CameraModel, SilhouetteImage, View};
use super::shapes::{generate_shape, validate_params, PointCloudShape, ShapeFamily, ShapeSpec, PARAM_MAX, PARAM_MIN};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An explicitly listed shape in a [`DatasetConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntryConfig {
    #[serde(default)]
    pub id: Option<String>,
    pub family: ShapeFamily,
    pub params: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Families cycled through when generating `count` random shapes.
    pub families: Vec<ShapeFamily>,
    pub count: usize,
    /// Explicit shapes; when non-empty, `families`/`count` are ignored.
    pub shapes: Vec<ShapeEntryConfig>,
    pub views_per_shape: usize,
    pub elevation: f64,
    pub camera: CameraModel,
    pub n_points: usize,
    pub resolution: usize,
    /// Fraction of randomly generated shapes assigned to the test split
    /// (taken from the end of the list).
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            count: 8,
            shapes: Vec::new(),
            views_per_shape: 6,
            elevation: 0.5,
            camera: CameraModel::Orthographic,
            n_points: 256,
            resolution: 32,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

/// One line of the manifest index. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub spec: ShapeSpec,
    pub shape: String,
    pub images: Vec<String>,
    pub views: Vec<View>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory holding the manifest; entry paths resolve against it.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A manifest entry with its files loaded.
#[derive(Debug, Clone)]
pub struct LoadedShape {
    pub entry: ManifestEntry,
    pub cloud: PointCloudShape,
    pub images: Vec<SilhouetteImage>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Reads a manifest from its file path or from the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<ManifestEntry>(l)
                    .map_err(|e| Error::Dataset(format!("{} line {}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Unique ids, valid specs, and every referenced file present.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate shape id `{}`", e.id)));
            }
            e.spec.validate()?;
            if e.images.len() != e.views.len() {
                return Err(Error::Dataset(format!("{}: {} images but {} views", e.id, e.images.len(), e.views.len())));
            }
            for rel in std::iter::once(&e.shape).chain(&e.images) {
                if !self.resolve(rel).is_file() {
                    return Err(Error::Dataset(format!("{}: missing file {rel}", e.id)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<LoadedShape> {
        let cloud = read_ply(&self.resolve(&entry.shape))?;
        let images = entry
            .images
            .iter()
            .zip(&entry.views)
            .map(|(rel, view)| SilhouetteImage::read_png(&self.resolve(rel), *view))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedShape { entry: entry.clone(), cloud, images })
    }

    pub fn load_split(&self, split: Option<Split>) -> Result<Vec<LoadedShape>> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| self.load_entry(e))
            .collect()
    }
}

fn planned_shapes(config: &DatasetConfig) -> Result<Vec<(String, ShapeSpec, Split)>> {
    if !config.shapes.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        return config
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                validate_params(s.family, &s.params)?;
                let seed = s.seed.unwrap_or_else(|| rng.next_u64());
                let id = s.id.clone().unwrap_or_else(|| format!("shape{i:04}"));
                Ok((id, ShapeSpec { family: s.family, params: s.params.clone(), seed }, s.split.unwrap_or(Split::Train)))
            })
            .collect();
    }
    if config.families.is_empty() {
        return Err(Error::Config("dataset.families must not be empty".into()));
    }
    if !(0.0..=1.0).contains(&config.test_fraction) {
        return Err(Error::Config(format!("dataset.test_fraction {} outside [0, 1]", config.test_fraction)));
    }
    let n_test = (config.test_fraction * config.count as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok((0..config.count)
        .map(|i| {
            let family = config.families[i % config.families.len()];
            let params = (0..family.arity()).map(|_| rng.random_range(PARAM_MIN..=PARAM_MAX)).collect();
            let spec = ShapeSpec { family, params, seed: rng.next_u64() };
            let split = if i >= config.count - n_test { Split::Test } else { Split::Train };
            (format!("shape{i:04}"), spec, split)
        })
        .collect())
}

/// Generates every shape, renders its views, and writes PLY files, PNG
/// images and the JSON-lines manifest under `out_dir`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.views_per_shape == 0 {
        return Err(Error::Config("dataset.views_per_shape must be positive".into()));
    }
    let planned = planned_shapes(config)?;
    let mut seen = HashSet::new();
    for (id, _, _) in &planned {
        if !seen.insert(id.clone()) {
            return Err(Error::Dataset(format!("duplicate shape id `{id}`")));
        }
    }
    for sub in ["shapes", "images"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let views = View::ring(config.views_per_shape, config.elevation);
    let mut entries = Vec::with_capacity(planned.len());
    for (id, spec, split) in planned {
        let cloud = generate_shape(&spec, config.n_points, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
        let shape_rel = format!("shapes/{id}.ply");
        write_ply(&cloud, &out_dir.join(&shape_rel))?;
        let mut images = Vec::with_capacity(views.len());
        for (k, view) in views.iter().enumerate() {
            let rel = format!("images/{id}_v{k}.png");
            render_silhouette(&cloud, *view, config.resolution)?.write_png(&out_dir.join(&rel))?;
            images.push(rel);
        }
        entries.push(ManifestEntry { id, spec, shape: shape_rel, images, views: views.clone(), split });
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    let path = manifest.path();
    fs::write(&path, manifest.to_jsonl()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
