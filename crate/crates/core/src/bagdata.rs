//! Patch-embedding bags, their on-disk formats, task label schemas, and a
//! seeded synthetic cohort generator.
//!
//! A BAGF file is laid out as
//!
//! ```text
//! "BAGF" | u16 version = 1 | str slide_id | str patient_id | u16 label
//!        | str fine_label (empty = absent) | u32 P | u32 D | P×D f32
//! ```
//!
//! where every `str` is a u16 byte length followed by UTF-8 and every
//! integer and float is little-endian. Features are row-major.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::Matrix;

pub const BAGF_MAGIC: &[u8; 4] = b"BAGF";
pub const BAGF_VERSION: u16 = 1;

/// Class names of the seven-category schema, in label-index order.
pub const SEVEN_CLASS_NAMES: [&str; 7] = [
    "Ependymal tumors",
    "High-grade brain tumors",
    "Non-glial brain tumors",
    "Non-neoplastic brain lesions",
    "Normal brain",
    "Other low-grade glial tumors",
    "Pilocytic astrocytoma",
];

pub const DMG_H3_MUTATED: &str = "DMG H3 mutated";
const MERGED_CONTROL: &str = "Non-neoplastic brain lesions or Normal brain";
const CONTROL_CLASSES: [&str; 2] = ["Non-neoplastic brain lesions", "Normal brain"];

#[derive(Debug, Error)]
pub enum BagError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a BAGF file (bad magic)")]
    BadMagic,
    #[error("unsupported BAGF version {0}")]
    Version(u16),
    #[error("truncated BAGF payload: {0}")]
    Truncated(&'static str),
    #[error("BAGF payload has {actual} bytes of features, header says {expected}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("invalid bag {slide_id}: {reason}")]
    InvalidBag { slide_id: String, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("class name {0:?} is not part of the seven-class schema")]
    UnknownClassName(String),
    #[error("three-class task requested but no slide carries fine_label {DMG_H3_MUTATED:?}")]
    NoFineLabel,
    #[error("synthetic spec field `{field}`: {reason}")]
    SyntheticSpec { field: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, BagError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BagError + '_ {
    move |source| BagError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBag {
    pub slide_id: String,
    pub patient_id: String,
    /// Class index under the seven-class schema (or the manifest's own names).
    pub label: usize,
    pub fine_label: Option<String>,
    n_patches: usize,
    dim: usize,
    features: Vec<f32>,
}

impl EmbeddingBag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: usize,
        fine_label: Option<String>,
        n_patches: usize,
        dim: usize,
        features: Vec<f32>,
    ) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            label,
            fine_label,
            n_patches,
            dim,
            features,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| BagError::InvalidBag {
            slide_id: self.slide_id.clone(),
            reason,
        };
        if self.n_patches == 0 || self.dim == 0 {
            return Err(invalid(format!(
                "empty feature matrix {}x{}",
                self.n_patches, self.dim
            )));
        }
        if self.features.len() != self.n_patches * self.dim {
            return Err(invalid(format!(
                "{} values for a {}x{} matrix",
                self.features.len(),
                self.n_patches,
                self.dim
            )));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite feature at flat index {pos}")));
        }
        if self.label > u16::MAX as usize {
            return Err(invalid(format!("label {} exceeds u16", self.label)));
        }
        for (name, s) in [
            ("slide_id", self.slide_id.as_str()),
            ("patient_id", self.patient_id.as_str()),
            ("fine_label", self.fine_label.as_deref().unwrap_or("")),
        ] {
            if s.len() > u16::MAX as usize {
                return Err(invalid(format!("{name} longer than 65535 bytes")));
            }
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn patch(&self, p: usize) -> &[f32] {
        &self.features[p * self.dim..(p + 1) * self.dim]
    }

    /// Features widened to 64-bit for training.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.n_patches,
            self.dim,
            self.features.iter().map(|&v| v as f64).collect(),
        )
        .expect("bag invariants guarantee the shape")
    }

    /// Column mean of the patch matrix.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for p in 0..self.n_patches {
            for (o, &v) in out.iter_mut().zip(self.patch(p)) {
                *o += v as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.n_patches as f64);
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::with_capacity(32 + self.features.len() * 4);
        buf.extend_from_slice(BAGF_MAGIC);
        buf.extend_from_slice(&BAGF_VERSION.to_le_bytes());
        put_str(&mut buf, &self.slide_id);
        put_str(&mut buf, &self.patient_id);
        buf.extend_from_slice(&(self.label as u16).to_le_bytes());
        put_str(&mut buf, self.fine_label.as_deref().unwrap_or(""));
        buf.extend_from_slice(&(self.n_patches as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != BAGF_MAGIC {
            return Err(BagError::BadMagic);
        }
        let version = cur.u16("version")?;
        if version != BAGF_VERSION {
            return Err(BagError::Version(version));
        }
        let slide_id = cur.string("slide_id")?;
        let patient_id = cur.string("patient_id")?;
        let label = cur.u16("label")? as usize;
        let fine = cur.string("fine_label")?;
        let n_patches = cur.u32("patch count")? as usize;
        let dim = cur.u32("embedding dim")? as usize;
        let expected = n_patches
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(BagError::Truncated("header dimensions overflow"))?;
        let rest = &bytes[cur.pos..];
        if rest.len() != expected {
            return Err(BagError::PayloadSize {
                expected,
                actual: rest.len(),
            });
        }
        let features = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(
            slide_id,
            patient_id,
            label,
            (!fine.is_empty()).then_some(fine),
            n_patches,
            dim,
            features,
        )
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(BagError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| BagError::Truncated(what))
    }
}

pub fn write_bag(bag: &EmbeddingBag, path: &Path) -> Result<()> {
    let bytes = bag.to_bytes()?;
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}

pub fn read_bag(path: &Path) -> Result<EmbeddingBag> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    EmbeddingBag::from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    /// Bag file location, relative to the manifest's directory.
    pub path: PathBuf,
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
    #[serde(default)]
    pub fine_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_patches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub class_names: Vec<String>,
    pub embedding_dim: usize,
    pub slides: Vec<SlideEntry>,
}

impl CohortManifest {
    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(BagError::Manifest("class_names is empty".into()));
        }
        if self.embedding_dim == 0 {
            return Err(BagError::Manifest("embedding_dim must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.slides {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(BagError::Manifest(format!(
                    "duplicate slide_id {:?}",
                    s.slide_id
                )));
            }
            if s.label >= self.class_names.len() {
                return Err(BagError::Manifest(format!(
                    "slide {:?} label {} out of range for {} classes",
                    s.slide_id,
                    s.label,
                    self.class_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }
}

/// A manifest together with every bag it references, loaded and checked.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub bags: Vec<EmbeddingBag>,
}

impl Cohort {
    pub fn new(manifest: CohortManifest, bags: Vec<EmbeddingBag>) -> Result<Self> {
        manifest.validate()?;
        if manifest.slides.len() != bags.len() {
            return Err(BagError::Manifest(format!(
                "{} manifest entries but {} bags",
                manifest.slides.len(),
                bags.len()
            )));
        }
        for (entry, bag) in manifest.slides.iter().zip(&bags) {
            check_entry(entry, bag, manifest.embedding_dim)?;
        }
        Ok(Self { manifest, bags })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = CohortManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let bags = manifest
            .slides
            .iter()
            .map(|entry| read_bag(&base.join(&entry.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, bags)
    }

    /// Writes `manifest.json` and every bag under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (entry, bag) in self.manifest.slides.iter().zip(&self.bags) {
            let path = dir.join(&entry.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            write_bag(bag, &path)?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }
}

fn check_entry(entry: &SlideEntry, bag: &EmbeddingBag, dim: usize) -> Result<()> {
    let mismatch = |what: &str| {
        BagError::Manifest(format!(
            "bag file for slide {:?} disagrees with manifest on {what}",
            entry.slide_id
        ))
    };
    if bag.slide_id != entry.slide_id {
        return Err(mismatch("slide_id"));
    }
    if bag.patient_id != entry.patient_id {
        return Err(mismatch("patient_id"));
    }
    if bag.label != entry.label {
        return Err(mismatch("label"));
    }
    if bag.fine_label != entry.fine_label {
        return Err(mismatch("fine_label"));
    }
    if bag.dim() != dim {
        return Err(mismatch("embedding_dim"));
    }
    if entry.n_patches.is_some_and(|p| p != bag.n_patches()) {
        return Err(mismatch("patch count"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// task schemas

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Task {
    Binary,
    ThreeClass,
    SixClass,
    SevenClass,
}

impl TryFrom<u8> for Task {
    type Error = String;
    fn try_from(n: u8) -> std::result::Result<Self, String> {
        match n {
            2 => Ok(Task::Binary),
            3 => Ok(Task::ThreeClass),
            6 => Ok(Task::SixClass),
            7 => Ok(Task::SevenClass),
            other => Err(format!("task must be one of 2, 3, 6, 7 (got {other})")),
        }
    }
}

impl From<Task> for u8 {
    fn from(t: Task) -> u8 {
        t.n_classes() as u8
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-class", self.n_classes())
    }
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::ThreeClass => 3,
            Task::SixClass => 6,
            Task::SevenClass => 7,
        }
    }
}

/// Maps seven-class labels (plus fine labels) onto one task's classes.
#[derive(Debug, Clone)]
pub struct TaskSchema {
    pub task: Task,
    pub class_names: Vec<String>,
    source_names: Vec<String>,
}

impl TaskSchema {
    /// Builds the schema against a cohort's class names. Every task but
    /// seven-class needs the canonical seven-class names.
    pub fn new(task: Task, source_names: &[String]) -> Result<Self> {
        let class_names: Vec<String> = match task {
            Task::SevenClass => source_names.to_vec(),
            Task::SixClass => [
                SEVEN_CLASS_NAMES[0],
                SEVEN_CLASS_NAMES[1],
                SEVEN_CLASS_NAMES[2],
                MERGED_CONTROL,
                SEVEN_CLASS_NAMES[5],
                SEVEN_CLASS_NAMES[6],
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            Task::Binary => vec!["Non-tumor".into(), "Tumor".into()],
            Task::ThreeClass => vec![
                DMG_H3_MUTATED.into(),
                SEVEN_CLASS_NAMES[6].into(),
                SEVEN_CLASS_NAMES[0].into(),
            ],
        };
        if task != Task::SevenClass {
            for name in source_names {
                if !SEVEN_CLASS_NAMES.contains(&name.as_str()) {
                    return Err(BagError::UnknownClassName(name.clone()));
                }
            }
        }
        Ok(Self {
            task,
            class_names,
            source_names: source_names.to_vec(),
        })
    }

    /// Task class of a slide, or `None` when the task excludes it.
    pub fn map(&self, label: usize, fine_label: Option<&str>) -> Option<usize> {
        if self.task == Task::SevenClass {
            return Some(label);
        }
        let name = self.source_names.get(label)?.as_str();
        match self.task {
            Task::SevenClass => unreachable!(),
            Task::SixClass => {
                let merged = if name == "Normal brain" {
                    "Non-neoplastic brain lesions"
                } else {
                    name
                };
                let idx7 = SEVEN_CLASS_NAMES.iter().position(|n| *n == merged)?;
                Some(match idx7 {
                    0..=3 => idx7,
                    _ => idx7 - 1,
                })
            }
            Task::Binary => Some(usize::from(!CONTROL_CLASSES.contains(&name))),
            Task::ThreeClass => match name {
                "High-grade brain tumors" if fine_label == Some(DMG_H3_MUTATED) => Some(0),
                "Pilocytic astrocytoma" => Some(1),
                "Ependymal tumors" => Some(2),
                _ => None,
            },
        }
    }

    /// Resolves a class name given either as a task class or as a
    /// seven-class name that lands on exactly one task class.
    pub fn resolve_name(&self, name: &str) -> Option<usize> {
        if let Some(i) = self.class_names.iter().position(|n| n == name) {
            return Some(i);
        }
        let label = self.source_names.iter().position(|n| n == name)?;
        match self.task {
            // the 3-class DMG class is a subset of high-grade tumors
            Task::ThreeClass if name == "High-grade brain tumors" => Some(0),
            _ => self.map(label, None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSlide {
    /// Index into the cohort's bag list.
    pub index: usize,
    pub label: usize,
}

/// A cohort under one task: included slides with their task labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskCohort {
    pub task: Task,
    pub class_names: Vec<String>,
    pub slides: Vec<TaskSlide>,
}

impl TaskCohort {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn remap_labels(manifest: &CohortManifest, schema: &TaskSchema) -> Result<TaskCohort> {
    manifest.validate()?;
    let slides: Vec<TaskSlide> = manifest
        .slides
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            schema
                .map(s.label, s.fine_label.as_deref())
                .map(|label| TaskSlide { index, label })
        })
        .collect();
    if schema.task == Task::ThreeClass && !slides.iter().any(|s| s.label == 0) {
        return Err(BagError::NoFineLabel);
    }
    Ok(TaskCohort {
        task: schema.task,
        class_names: schema.class_names.clone(),
        slides,
    })
}

// ---------------------------------------------------------------------------
// synthetic cohorts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    /// Distance between the two class centroids.
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_patients_per_class: usize,
    pub slides_per_patient: usize,
    /// Inclusive range of patches per slide.
    pub patches_per_slide: (usize, usize),
    pub embedding_dim: usize,
    /// Norm of each class centroid; random directions put distinct classes
    /// about `√2 ×` this apart.
    pub class_centroid_separation: f64,
    #[serde(default)]
    pub confusable_pairs: Vec<ConfusablePair>,
    pub background_fraction: f64,
    pub seed: u64,
    /// Patch noise standard deviation.
    #[serde(default = "one")]
    pub patch_std: f64,
    /// Standard deviation of a per-slide shift of its diagnostic patches.
    #[serde(default)]
    pub slide_std: f64,
    /// Defaults to the seven-class names when `n_classes == 7`.
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

fn one() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(BagError::SyntheticSpec { field, reason });
        if self.n_classes == 0 {
            return bad("n_classes", "must be >= 1".into());
        }
        if self.n_patients_per_class == 0 {
            return bad("n_patients_per_class", "must be >= 1".into());
        }
        if self.slides_per_patient == 0 {
            return bad("slides_per_patient", "must be >= 1".into());
        }
        let (lo, hi) = self.patches_per_slide;
        if lo == 0 || lo > hi {
            return bad("patches_per_slide", format!("need 1 <= min <= max, got ({lo}, {hi})"));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim", "must be >= 1".into());
        }
        if !(self.class_centroid_separation.is_finite() && self.class_centroid_separation >= 0.0) {
            return bad("class_centroid_separation", "must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad("background_fraction", "must lie in [0, 1)".into());
        }
        if !(self.patch_std.is_finite() && self.patch_std >= 0.0) {
            return bad("patch_std", "must be finite and >= 0".into());
        }
        if !(self.slide_std.is_finite() && self.slide_std >= 0.0) {
            return bad("slide_std", "must be finite and >= 0".into());
        }
        for p in &self.confusable_pairs {
            if p.a >= self.n_classes || p.b >= self.n_classes || p.a == p.b {
                return bad(
                    "confusable_pairs",
                    format!("pair ({}, {}) must name two distinct valid classes", p.a, p.b),
                );
            }
            if !(p.separation.is_finite() && p.separation >= 0.0) {
                return bad("confusable_pairs", "separation must be finite and >= 0".into());
            }
        }
        match &self.class_names {
            Some(names) if names.len() != self.n_classes => {
                return bad("class_names", format!("expected {} names", self.n_classes));
            }
            _ => {}
        }
        Ok(())
    }

    fn resolved_class_names(&self) -> Vec<String> {
        match &self.class_names {
            Some(names) => names.clone(),
            None if self.n_classes == SEVEN_CLASS_NAMES.len() => {
                SEVEN_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.n_classes).map(|c| format!("class_{c}")).collect(),
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, length: f64) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let n = crate::grad::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x * length / n).collect();
        }
    }
}

/// Class centroids after confusable pairs have been pulled together; also
/// the background centroid.
pub struct SyntheticGeometry {
    pub class_centroids: Vec<Vec<f64>>,
    pub background_centroid: Vec<f64>,
}

fn synthetic_geometry(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticGeometry {
    let dim = spec.embedding_dim;
    let mut class_centroids: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| random_direction(rng, dim, spec.class_centroid_separation))
        .collect();
    let background_centroid = random_direction(rng, dim, spec.class_centroid_separation);
    // Later pairs win when a class is repositioned twice.
    for pair in &spec.confusable_pairs {
        let offset = random_direction(rng, dim, pair.separation);
        class_centroids[pair.b] = class_centroids[pair.a]
            .iter()
            .zip(&offset)
            .map(|(c, o)| c + o)
            .collect();
    }
    SyntheticGeometry {
        class_centroids,
        background_centroid,
    }
}

/// Deterministic cohort from `spec`. Bag paths are `bags/<slide_id>.bagf`.
pub fn generate_synthetic_cohort(spec: &SyntheticSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = synthetic_geometry(spec, &mut rng);
    let class_names = spec.resolved_class_names();
    let dim = spec.embedding_dim;
    let hgg_label = class_names
        .iter()
        .position(|n| n == SEVEN_CLASS_NAMES[1]);

    let mut entries = Vec::new();
    let mut bags = Vec::new();
    for class in 0..spec.n_classes {
        for patient in 0..spec.n_patients_per_class {
            let patient_id = format!("c{class}_p{patient:03}");
            let fine_label = (Some(class) == hgg_label).then(|| {
                if patient % 2 == 0 {
                    DMG_H3_MUTATED.to_string()
                } else {
                    "Other high-grade".to_string()
                }
            });
            for slide in 0..spec.slides_per_patient {
                let slide_id = format!("{patient_id}_s{slide}");
                let n_patches = rng.random_range(spec.patches_per_slide.0..=spec.patches_per_slide.1);
                let n_diag = ((n_patches as f64) * (1.0 - spec.background_fraction))
                    .round()
                    .clamp(1.0, n_patches as f64) as usize;
                let shift: Vec<f64> = gaussian_vec(&mut rng, dim)
                    .into_iter()
                    .map(|v| v * spec.slide_std)
                    .collect();
                let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n_patches);
                for p in 0..n_patches {
                    let noise = gaussian_vec(&mut rng, dim);
                    let row = if p < n_diag {
                        let c = &geometry.class_centroids[class];
                        (0..dim)
                            .map(|j| (c[j] + shift[j] + spec.patch_std * noise[j]) as f32)
                            .collect()
                    } else {
                        let c = &geometry.background_centroid;
                        (0..dim)
                            .map(|j| (c[j] + spec.patch_std * noise[j]) as f32)
                            .collect()
                    };
                    rows.push(row);
                }
                rows.shuffle(&mut rng);
                let features: Vec<f32> = rows.into_iter().flatten().collect();
                entries.push(SlideEntry {
                    path: PathBuf::from("bags").join(format!("{slide_id}.bagf")),
                    slide_id: slide_id.clone(),
                    patient_id: patient_id.clone(),
                    label: class,
                    fine_label: fine_label.clone(),
                    n_patches: Some(n_patches),
                });
                bags.push(EmbeddingBag::new(
                    slide_id,
                    patient_id.clone(),
                    class,
                    fine_label.clone(),
                    n_patches,
                    dim,
                    features,
                )?);
            }
        }
    }
    Cohort::new(
        CohortManifest {
            class_names,
            embedding_dim: dim,
            slides: entries,
        },
        bags,
    )
}

/// Number of slides per task class, in class order.
pub fn class_counts(cohort: &TaskCohort) -> Vec<usize> {
    let mut counts = vec![0; cohort.n_classes()];
    for s in &cohort.slides {
        counts[s.label] += 1;
    }
    counts
}

/// Slides grouped by patient id, sorted by id.
pub fn slides_by_patient<'a>(
    manifest: &'a CohortManifest,
    cohort: &TaskCohort,
) -> BTreeMap<&'a str, Vec<TaskSlide>> {
    let mut out: BTreeMap<&str, Vec<TaskSlide>> = BTreeMap::new();
    for s in &cohort.slides {
        out.entry(manifest.slides[s.index].patient_id.as_str())
            .or_default()
            .push(*s);
    }
    out
}
