//! Labelled corpus handling: directory scanning, manifests, the stratified
//! split, class weights and the procedural toy corpus.

mod split;
mod toy;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{assign_splits, expected_counts, stratified_split, test_count};
pub use toy::{generate_toy_corpus, BoundingBox, ToyTruth, ToyTruthEntry, TOY_TRUTH_FILE};

pub const NUM_CLASSES: usize = 3;

/// Fixed label encoding: 0 = no stroke, 1 = hemorrhagic, 2 = ischemic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum StrokeClass {
    Normal = 0,
    Hemorrhagic = 1,
    Ischemic = 2,
}

impl StrokeClass {
    pub const ALL: [StrokeClass; NUM_CLASSES] = [
        StrokeClass::Normal,
        StrokeClass::Hemorrhagic,
        StrokeClass::Ischemic,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    /// Directory name in the corpus layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            StrokeClass::Normal => "normal",
            StrokeClass::Hemorrhagic => "hemorrhagic",
            StrokeClass::Ischemic => "ischemic",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.dir_name() == name)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            StrokeClass::Normal => "No Stroke",
            StrokeClass::Hemorrhagic => "Hemorrhagic",
            StrokeClass::Ischemic => "Ischemic",
        }
    }
}

impl From<StrokeClass> for u8 {
    fn from(c: StrokeClass) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for StrokeClass {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        StrokeClass::from_id(v as usize).ok_or_else(|| format!("label {v} outside 0..3"))
    }
}

impl fmt::Display for StrokeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: StrokeClass,
    pub origin: Origin,
    pub split: Split,
}

/// A file skipped while scanning a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Immutable labelled corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    records: Vec<ImageRecord>,
    class_counts: [usize; NUM_CLASSES],
    skipped: Vec<SkippedFile>,
}

impl Manifest {
    /// Validates the records (paths exist, synthetic images are train-only)
    /// and tallies class counts.
    pub fn from_records(root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        let mut class_counts = [0; NUM_CLASSES];
        for r in &records {
            if r.origin == Origin::Synthetic && r.split != Split::Train {
                return Err(Error::PolicyViolation(format!(
                    "synthetic image {} assigned to {:?}",
                    r.path.display(),
                    r.split
                )));
            }
            if !r.path.is_file() {
                return Err(Error::io(
                    &r.path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed image does not exist"),
                ));
            }
            class_counts[r.label.id()] += 1;
        }
        Ok(Self {
            root: root.into(),
            records,
            class_counts,
            skipped: Vec::new(),
        })
    }

    /// Records derived from an already-validated manifest; only re-tallies.
    pub(crate) fn derived(root: &Path, records: Vec<ImageRecord>) -> Self {
        let mut class_counts = [0; NUM_CLASSES];
        for r in &records {
            class_counts[r.label.id()] += 1;
        }
        Self {
            root: root.to_path_buf(),
            records,
            class_counts,
            skipped: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        self.class_counts
    }

    pub fn count(&self, class: StrokeClass) -> usize {
        self.class_counts[class.id()]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Files ignored during [`scan_dataset`].
    pub fn skipped(&self) -> &[SkippedFile] {
        &self.skipped
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(CsvRow::from(r))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let records = rdr
            .deserialize::<CsvRow>()
            .map(|row| row.map(ImageRecord::from))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_records(root, records)
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    path: PathBuf,
    label: StrokeClass,
    origin: Origin,
    split: Split,
}

impl From<&ImageRecord> for CsvRow {
    fn from(r: &ImageRecord) -> Self {
        Self {
            path: r.path.clone(),
            label: r.label,
            origin: r.origin,
            split: r.split,
        }
    }
}

impl From<CsvRow> for ImageRecord {
    fn from(r: CsvRow) -> Self {
        Self {
            path: r.path,
            label: r.label,
            origin: r.origin,
            split: r.split,
        }
    }
}

/// Sorted list of regular files in `dir`.
pub(crate) fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn probe_image(path: &Path) -> std::result::Result<(), String> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    if reader.format().is_none() {
        return Err("not a recognised image format".into());
    }
    let (w, h) = reader.into_dimensions().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    Ok(())
}

/// Builds a manifest from `<root>/{normal,hemorrhagic,ischemic}/*`.
///
/// Unreadable or non-image files are skipped with a warning and listed in
/// [`Manifest::skipped`].
pub fn scan_dataset(root: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for class in StrokeClass::ALL {
        let dir = root.join(class.dir_name());
        if !dir.is_dir() {
            return Err(Error::MissingClassDir {
                root: root.to_path_buf(),
                dir: class.dir_name().to_string(),
            });
        }
        let before = records.len();
        for path in list_files(&dir)? {
            match probe_image(&path) {
                Ok(()) => records.push(ImageRecord {
                    path,
                    label: class,
                    origin: Origin::Real,
                    split: Split::Unassigned,
                }),
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", path.display());
                    skipped.push(SkippedFile { path, reason });
                }
            }
        }
        if records.len() == before {
            return Err(Error::EmptyClass {
                class: class.dir_name().to_string(),
            });
        }
    }
    let mut m = Manifest::from_records(root, records)?;
    m.skipped = skipped;
    Ok(m)
}

/// Per-class loss multipliers `w_c = N / (K · n_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self([1.0; NUM_CLASSES])
    }

    pub fn get(&self, class: StrokeClass) -> f64 {
        self.0[class.id()]
    }

    /// Inverse-frequency weights from raw counts.
    pub fn from_counts(counts: [usize; NUM_CLASSES]) -> Result<Self> {
        if let Some(c) = StrokeClass::ALL.into_iter().find(|c| counts[c.id()] == 0) {
            return Err(Error::EmptyClass {
                class: c.dir_name().to_string(),
            });
        }
        let total: usize = counts.iter().sum();
        let k = NUM_CLASSES as f64;
        Ok(Self(counts.map(|n| total as f64 / (k * n as f64))))
    }
}

pub fn class_weights(m: &Manifest) -> Result<ClassWeights> {
    ClassWeights::from_counts(m.class_counts())
}
