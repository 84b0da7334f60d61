//! Dataset manifests: ordered CSV listings binding sample files to class
//! labels, subject identities, and original-vs-augmented provenance.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::VolumeError;

/// Diagnostic classes in their fixed canonical order; class indices used
/// throughout training and evaluation are indices into this array.
pub const CLASS_ORDER: [ClassLabel; 4] = [
    ClassLabel::Cn,
    ClassLabel::Pmci,
    ClassLabel::Smci,
    ClassLabel::Ad,
];

/// Diagnostic class of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    /// Cognitively normal.
    Cn,
    /// Progressive mild cognitive impairment.
    Pmci,
    /// Stable mild cognitive impairment.
    Smci,
    /// Alzheimer's disease.
    Ad,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Cn => "CN",
            ClassLabel::Pmci => "pMCI",
            ClassLabel::Smci => "sMCI",
            ClassLabel::Ad => "AD",
        }
    }

    /// Index in the canonical class order.
    pub fn index(self) -> usize {
        CLASS_ORDER
            .iter()
            .position(|&c| c == self)
            .expect("every label is in CLASS_ORDER")
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CN" => Ok(ClassLabel::Cn),
            "pMCI" => Ok(ClassLabel::Pmci),
            "sMCI" => Ok(ClassLabel::Smci),
            "AD" => Ok(ClassLabel::Ad),
            other => Err(VolumeError::UnknownLabel(other.to_string())),
        }
    }
}

/// Whether a sample is an acquired original or an augmentation replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Augmented,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Augmented => "augmented",
        }
    }
}

impl FromStr for Provenance {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Provenance::Original),
            "augmented" => Ok(Provenance::Augmented),
            other => Err(VolumeError::UnknownLabel(other.to_string())),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path of the sample file, as recorded (usually relative to the manifest).
    pub path: String,
    pub label: ClassLabel,
    /// Subject identity; all samples of one subject must stay in the same
    /// split partition or fold.
    pub subject_id: String,
    pub provenance: Provenance,
    /// Augmentation op chain (e.g. `mirror:h|rotate:7.5`); empty for originals.
    pub ops: String,
}

/// An ordered collection of manifest rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, VolumeError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(VolumeError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a row, rejecting duplicate paths.
    pub fn push(&mut self, entry: ManifestEntry) -> Result<(), VolumeError> {
        if self.entries.iter().any(|e| e.path == entry.path) {
            return Err(VolumeError::DuplicatePath(entry.path));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Number of rows carrying the given label.
    pub fn count_label(&self, label: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            if seen.insert(e.subject_id.as_str()) {
                out.push(e.subject_id.clone());
            }
        }
        out
    }

    /// Reads a manifest CSV. The header must name the four base columns
    /// (`path,label,subject_id,provenance`); an optional fifth `ops`
    /// column carries augmentation chains.
    pub fn read_csv(path: &Path) -> Result<Self, VolumeError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(csv_to_volume_error)?;

        let headers = reader.headers().map_err(csv_to_volume_error)?.clone();
        let base: Vec<&str> = headers.iter().take(4).collect();
        if base != ["path", "label", "subject_id", "provenance"] {
            return Err(VolumeError::MalformedRow {
                line: 1,
                detail: format!("unexpected header {base:?}"),
            });
        }
        let has_ops = match headers.len() {
            4 => false,
            5 if headers.iter().nth(4) == Some("ops") => true,
            _ => {
                return Err(VolumeError::MalformedRow {
                    line: 1,
                    detail: format!("unexpected header with {} columns", headers.len()),
                })
            }
        };

        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2; // header occupies line 1
            let record = record.map_err(|e| VolumeError::MalformedRow {
                line,
                detail: e.to_string(),
            })?;
            let field = |idx: usize| record.get(idx).unwrap_or("").to_string();
            entries.push(ManifestEntry {
                path: field(0),
                label: field(1).parse()?,
                subject_id: field(2),
                provenance: field(3).parse()?,
                ops: if has_ops { field(4) } else { String::new() },
            });
        }
        DatasetManifest::new(entries)
    }

    /// Writes the manifest as CSV. The `ops` column is emitted only when
    /// some row actually carries an op chain, so purely original manifests
    /// keep the four-column shape.
    pub fn write_csv(&self, path: &Path) -> Result<(), VolumeError> {
        let has_ops = self.entries.iter().any(|e| !e.ops.is_empty());
        let mut writer = csv::Writer::from_path(path).map_err(csv_to_volume_error)?;
        let mut header = vec!["path", "label", "subject_id", "provenance"];
        if has_ops {
            header.push("ops");
        }
        writer.write_record(&header).map_err(csv_to_volume_error)?;
        for e in &self.entries {
            let mut row = vec![
                e.path.clone(),
                e.label.as_str().to_string(),
                e.subject_id.clone(),
                e.provenance.as_str().to_string(),
            ];
            if has_ops {
                row.push(e.ops.clone());
            }
            writer.write_record(&row).map_err(csv_to_volume_error)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn csv_to_volume_error(err: csv::Error) -> VolumeError {
    match err.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io_err) = err.into_kind() {
                VolumeError::IoFailure(io_err)
            } else {
                unreachable!()
            }
        }
        _ => VolumeError::MalformedRow {
            line: err
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0),
            detail: err.to_string(),
        },
    }
}
