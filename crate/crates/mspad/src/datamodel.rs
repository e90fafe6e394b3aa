//! Dataset schema: sensing modalities, attack taxonomy, sample records and
//! the line-oriented manifest that ties them together.
//!
//! A manifest file is UTF-8, one JSON object per line. The first line may be
//! a header of the form `{"manifest_schema_version": N}`; when it is absent
//! the file is read as version 1. Every other line is one [`SampleRecord`].
//! Unknown fields are rejected at version 1 and ignored for higher versions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::Dtype;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Sensing modality of one captured tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Front-illuminated visible + near-infrared stack.
    #[serde(rename = "F_M")]
    Fm,
    /// Front-illuminated short-wave-infrared stack.
    #[serde(rename = "F_S")]
    Fs,
    /// Front laser-speckle sequence.
    #[serde(rename = "F_L")]
    Fl,
    /// Back-illuminated near-infrared sequence.
    #[serde(rename = "B_N")]
    Bn,
    /// Conventional grayscale fingerprint image.
    #[serde(rename = "LEGACY")]
    Legacy,
}

impl Modality {
    /// The four cube-forming modalities in their fixed stacking order.
    pub const CUBE_ORDER: [Modality; 4] = [Modality::Fm, Modality::Fs, Modality::Fl, Modality::Bn];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Fm => "F_M",
            Modality::Fs => "F_S",
            Modality::Fl => "F_L",
            Modality::Bn => "B_N",
            Modality::Legacy => "LEGACY",
        }
    }

    /// Sensor frame size, where the hardware fixes one. Legacy sensors vary.
    pub fn native_size(self) -> Option<(usize, usize)> {
        match self {
            Modality::Fm | Modality::Bn => Some((1282, 1026)),
            Modality::Fs | Modality::Fl => Some((320, 256)),
            Modality::Legacy => None,
        }
    }

    pub fn bit_depth(self) -> u8 {
        match self {
            Modality::Fm | Modality::Bn => 12,
            Modality::Fs | Modality::Fl => 16,
            Modality::Legacy => 8,
        }
    }

    pub fn storage_dtype(self) -> Dtype {
        match self {
            Modality::Legacy => Dtype::U8,
            _ => Dtype::U16,
        }
    }

    /// Number of illuminated frames in a raw stack.
    pub fn illuminated_frames(self) -> usize {
        match self {
            Modality::Fm => 7,
            Modality::Fs => 4,
            Modality::Fl => 100,
            Modality::Bn => 20,
            Modality::Legacy => 1,
        }
    }

    /// Number of non-illuminated reference frames in a raw stack.
    pub fn dark_frames(self) -> usize {
        match self {
            Modality::Fm => 7,
            Modality::Fs => 4,
            Modality::Fl | Modality::Bn | Modality::Legacy => 0,
        }
    }

    /// Total frames in a raw stack (illuminated then dark).
    pub fn raw_frames(self) -> usize {
        self.illuminated_frames() + self.dark_frames()
    }

    /// Channels this modality contributes to a data cube after frame
    /// selection.
    pub fn cube_channels(self) -> usize {
        match self {
            Modality::Fm => 7,
            Modality::Fs => 4,
            Modality::Fl => 10,
            Modality::Bn => 3,
            Modality::Legacy => 1,
        }
    }

    /// Labels of the illuminated frames, in stack order.
    pub fn frame_labels(self) -> Vec<String> {
        match self {
            Modality::Fm => ["white", "465nm", "591nm", "720nm", "780nm", "870nm", "940nm"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Modality::Fs => ["1200nm", "1300nm", "1450nm", "1550nm"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Modality::Fl => (0..100).map(|i| format!("1310nm_f{i:03}")).collect(),
            Modality::Bn => (0..20).map(|i| format!("940nm_f{i:02}")).collect(),
            Modality::Legacy => vec!["gray".to_string()],
        }
    }

    /// Labels of the channels that survive frame selection, in cube order.
    pub fn cube_channel_labels(self) -> Vec<String> {
        let labels = self.frame_labels();
        match self {
            Modality::Fl => labels[10..20].to_vec(),
            Modality::Bn => labels[10..13].to_vec(),
            _ => labels,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Visual transparency class of an attack instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Transparency {
    #[serde(rename = "transparent")]
    Transparent,
    #[serde(rename = "opaque")]
    Opaque,
    #[serde(rename = "semi")]
    Semi,
    /// Sentinel used by bona-fide samples.
    #[serde(rename = "bona-fide")]
    BonaFide,
}

pub const BONA_FIDE_SENTINEL: &str = "bona-fide";

/// Attack-instrument taxonomy attached to every sample. Bona-fide samples
/// carry the explicit sentinel in every field so downstream grouping stays
/// total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaiAttributes {
    pub pai_code: String,
    pub material: String,
    pub species: String,
    pub transparency: Transparency,
    pub attack_type: String,
    /// Grouping key used by the leave-one-attack-out protocol.
    pub category_for_loo: String,
}

impl PaiAttributes {
    pub fn bona_fide() -> Self {
        PaiAttributes {
            pai_code: BONA_FIDE_SENTINEL.into(),
            material: BONA_FIDE_SENTINEL.into(),
            species: BONA_FIDE_SENTINEL.into(),
            transparency: Transparency::BonaFide,
            attack_type: BONA_FIDE_SENTINEL.into(),
            category_for_loo: BONA_FIDE_SENTINEL.into(),
        }
    }

    pub fn is_bona_fide(&self) -> bool {
        self == &Self::bona_fide()
    }
}

/// Which PAI attribute the leave-one-attack-out protocol groups by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKey {
    PaiCode,
    Material,
    Species,
    Transparency,
    AttackType,
    CategoryForLoo,
}

impl CategoryKey {
    pub fn of(self, pai: &PaiAttributes) -> String {
        match self {
            CategoryKey::PaiCode => pai.pai_code.clone(),
            CategoryKey::Material => pai.material.clone(),
            CategoryKey::Species => pai.species.clone(),
            CategoryKey::Transparency => match pai.transparency {
                Transparency::Transparent => "transparent".into(),
                Transparency::Opaque => "opaque".into(),
                Transparency::Semi => "semi".into(),
                Transparency::BonaFide => BONA_FIDE_SENTINEL.into(),
            },
            CategoryKey::AttackType => pai.attack_type.clone(),
            CategoryKey::CategoryForLoo => pai.category_for_loo.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CollectionSite {
    #[serde(rename = "USC1")]
    Usc1,
    #[serde(rename = "USC2")]
    Usc2,
    #[serde(rename = "APL")]
    Apl,
    #[serde(rename = "SYNTH")]
    Synth,
}

/// One capture: identity, ground truth, taxonomy, and tensor file references.
///
/// `tensor_refs` paths are relative to the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub participant_id: String,
    pub finger_id: String,
    pub collection_site: CollectionSite,
    /// 0 = bona-fide, 1 = attack.
    pub ground_truth: u8,
    pub pai: PaiAttributes,
    pub tensor_refs: BTreeMap<Modality, String>,
    /// Opaque extension strings (e.g. demographics); never analyzed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extensions: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn is_attack(&self) -> bool {
        self.ground_truth == 1
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown field `{field}` (schema version {version})")]
    UnknownField {
        line: usize,
        field: String,
        version: u32,
    },
    #[error("duplicate sample_id `{0}`")]
    DuplicateId(String),
    #[error("sample `{sample_id}`: ground_truth must be 0 or 1, found {value}")]
    BadLabel { sample_id: String, value: u8 },
    #[error(
        "sample `{sample_id}`: ground_truth {ground_truth} inconsistent with PAI attributes \
         (bona-fide sentinel: {is_sentinel})"
    )]
    LabelPaiMismatch {
        sample_id: String,
        ground_truth: u8,
        is_sentinel: bool,
    },
    #[error("sample `{sample_id}`: attack sample has empty `{field}`")]
    EmptyPaiField { sample_id: String, field: String },
    #[error("sample `{sample_id}`: referenced tensor file missing: {path}")]
    MissingTensorFile { sample_id: String, path: String },
}

/// An immutable, validated collection of sample records.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    schema_version: u32,
    /// Directory tensor_refs are resolved against.
    base_dir: PathBuf,
}

impl DatasetManifest {
    /// Builds a manifest from in-memory records, checking record-level
    /// invariants (uniqueness, label/PAI consistency). File existence is
    /// only checked by [`load_manifest`].
    pub fn from_records(
        records: Vec<SampleRecord>,
        base_dir: PathBuf,
    ) -> Result<Self, ManifestError> {
        let manifest = DatasetManifest {
            records,
            schema_version: MANIFEST_SCHEMA_VERSION,
            base_dir,
        };
        manifest.validate_records()?;
        Ok(manifest)
    }

    fn validate_records(&self) -> Result<(), ManifestError> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.sample_id.clone()));
            }
            if r.ground_truth > 1 {
                return Err(ManifestError::BadLabel {
                    sample_id: r.sample_id.clone(),
                    value: r.ground_truth,
                });
            }
            let is_sentinel = r.pai.is_bona_fide();
            if (r.ground_truth == 1) == is_sentinel {
                return Err(ManifestError::LabelPaiMismatch {
                    sample_id: r.sample_id.clone(),
                    ground_truth: r.ground_truth,
                    is_sentinel,
                });
            }
            if r.is_attack() {
                if r.pai.pai_code.is_empty() {
                    return Err(ManifestError::EmptyPaiField {
                        sample_id: r.sample_id.clone(),
                        field: "pai_code".into(),
                    });
                }
                if r.pai.category_for_loo.is_empty() {
                    return Err(ManifestError::EmptyPaiField {
                        sample_id: r.sample_id.clone(),
                        field: "category_for_loo".into(),
                    });
                }
            }
        }
        Ok(())
    }

    fn validate_files(&self) -> Result<(), ManifestError> {
        for r in &self.records {
            for rel in r.tensor_refs.values() {
                let path = self.base_dir.join(rel);
                if !path.is_file() {
                    return Err(ManifestError::MissingTensorFile {
                        sample_id: r.sample_id.clone(),
                        path: path.display().to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Absolute path of one record's tensor for `modality`.
    pub fn tensor_path(&self, record: &SampleRecord, modality: Modality) -> Option<PathBuf> {
        record
            .tensor_refs
            .get(&modality)
            .map(|rel| self.base_dir.join(rel))
    }

    pub fn participants(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .map(|r| r.participant_id.as_str())
            .collect()
    }
}

/// Counts reported by [`summarize`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub participants: usize,
    pub unique_fingers: usize,
    pub total_samples: usize,
    pub bona_fide_samples: usize,
    pub attack_samples: usize,
    pub pai_species: usize,
    pub samples_per_category: BTreeMap<String, usize>,
}

/// Tallies a manifest the way a datasheet table would.
pub fn summarize(manifest: &DatasetManifest) -> ManifestSummary {
    let mut fingers = BTreeSet::new();
    let mut species = BTreeSet::new();
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    let mut bona_fide = 0usize;
    let mut attack = 0usize;
    for r in manifest.records() {
        fingers.insert((r.participant_id.as_str(), r.finger_id.as_str()));
        if r.is_attack() {
            attack += 1;
            species.insert(r.pai.species.as_str());
            *per_category
                .entry(r.pai.category_for_loo.clone())
                .or_default() += 1;
        } else {
            bona_fide += 1;
        }
    }
    ManifestSummary {
        participants: manifest.participants().len(),
        unique_fingers: fingers.len(),
        total_samples: manifest.len(),
        bona_fide_samples: bona_fide,
        attack_samples: attack,
        pai_species: species.len(),
        samples_per_category: per_category,
    }
}

const RECORD_FIELDS: &[&str] = &[
    "sample_id",
    "participant_id",
    "finger_id",
    "collection_site",
    "ground_truth",
    "pai",
    "tensor_refs",
    "extensions",
];
const PAI_FIELDS: &[&str] = &[
    "pai_code",
    "material",
    "species",
    "transparency",
    "attack_type",
    "category_for_loo",
];

fn check_known_fields(value: &serde_json::Value, line: usize) -> Result<(), ManifestError> {
    let obj = match value.as_object() {
        Some(o) => o,
        None => {
            return Err(ManifestError::Parse {
                line,
                message: "expected a JSON object".into(),
            })
        }
    };
    for key in obj.keys() {
        if !RECORD_FIELDS.contains(&key.as_str()) {
            return Err(ManifestError::UnknownField {
                line,
                field: key.clone(),
                version: MANIFEST_SCHEMA_VERSION,
            });
        }
    }
    if let Some(pai) = obj.get("pai").and_then(|v| v.as_object()) {
        for key in pai.keys() {
            if !PAI_FIELDS.contains(&key.as_str()) {
                return Err(ManifestError::UnknownField {
                    line,
                    field: format!("pai.{key}"),
                    version: MANIFEST_SCHEMA_VERSION,
                });
            }
        }
    }
    Ok(())
}

fn strip_unknown_fields(value: &mut serde_json::Value) {
    if let Some(obj) = value.as_object_mut() {
        obj.retain(|k, _| RECORD_FIELDS.contains(&k.as_str()));
        if let Some(pai) = obj.get_mut("pai").and_then(|v| v.as_object_mut()) {
            pai.retain(|k, _| PAI_FIELDS.contains(&k.as_str()));
        }
    }
}

#[derive(Deserialize)]
struct ManifestHeader {
    manifest_schema_version: u32,
}

/// Loads and fully validates a manifest file, including the existence of
/// every referenced tensor file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let reader = io::BufReader::new(file);
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let mut schema_version = MANIFEST_SCHEMA_VERSION;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(io_err)?;
        if text.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        if line_no == 1 && records.is_empty() {
            if let Ok(header) = serde_json::from_value::<ManifestHeader>(value.clone()) {
                schema_version = header.manifest_schema_version;
                continue;
            }
        }
        if schema_version <= MANIFEST_SCHEMA_VERSION {
            check_known_fields(&value, line_no)?;
        } else {
            strip_unknown_fields(&mut value);
        }
        let record: SampleRecord =
            serde_json::from_value(value).map_err(|e| ManifestError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        records.push(record);
    }

    let manifest = DatasetManifest {
        records,
        schema_version,
        base_dir,
    };
    manifest.validate_records()?;
    manifest.validate_files()?;
    Ok(manifest)
}

/// Writes a manifest as header line + one record per line.
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), ManifestError> {
    let mut out = String::new();
    out.push_str(&format!(
        "{{\"manifest_schema_version\": {}}}\n",
        manifest.schema_version
    ));
    for r in manifest.records() {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A nonempty subset of the four cube-forming modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySelection {
    fm: bool,
    fs: bool,
    fl: bool,
    bn: bool,
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("modality selection is empty")]
    Empty,
    #[error("unknown modality tag `{0}` (expected F_M, F_S, F_L or B_N)")]
    UnknownTag(String),
}

impl ModalitySelection {
    pub fn new(modalities: &[Modality]) -> Result<Self, SelectionError> {
        let mut sel = ModalitySelection {
            fm: false,
            fs: false,
            fl: false,
            bn: false,
        };
        for m in modalities {
            match m {
                Modality::Fm => sel.fm = true,
                Modality::Fs => sel.fs = true,
                Modality::Fl => sel.fl = true,
                Modality::Bn => sel.bn = true,
                Modality::Legacy => return Err(SelectionError::UnknownTag("LEGACY".into())),
            }
        }
        if sel.modalities().is_empty() {
            return Err(SelectionError::Empty);
        }
        Ok(sel)
    }

    pub fn all() -> Self {
        ModalitySelection {
            fm: true,
            fs: true,
            fl: true,
            bn: true,
        }
    }

    /// Parses a `+` or `,` separated tag list, e.g. `F_M+F_S` or `fm,fs`.
    pub fn parse(text: &str) -> Result<Self, SelectionError> {
        let mut modalities = Vec::new();
        for raw in text.split(|c| c == '+' || c == ',') {
            let tag = raw.trim().to_ascii_uppercase().replace('_', "");
            let m = match tag.as_str() {
                "FM" => Modality::Fm,
                "FS" => Modality::Fs,
                "FL" => Modality::Fl,
                "BN" => Modality::Bn,
                "" => continue,
                _ => return Err(SelectionError::UnknownTag(raw.trim().to_string())),
            };
            modalities.push(m);
        }
        Self::new(&modalities)
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Fm => self.fm,
            Modality::Fs => self.fs,
            Modality::Fl => self.fl,
            Modality::Bn => self.bn,
            Modality::Legacy => false,
        }
    }

    /// Included modalities in the fixed cube stacking order, independent of
    /// declaration order.
    pub fn modalities(&self) -> Vec<Modality> {
        Modality::CUBE_ORDER
            .iter()
            .copied()
            .filter(|&m| self.contains(m))
            .collect()
    }

    /// Cube channel count: 7, 4, 10 and 3 summed over included modalities.
    pub fn channel_count(&self) -> usize {
        self.modalities().iter().map(|m| m.cube_channels()).sum()
    }

    /// All 15 nonempty subsets, ordered by size then stacking order.
    pub fn all_subsets() -> Vec<ModalitySelection> {
        let mut subsets: Vec<ModalitySelection> = (1u8..16)
            .map(|bits| ModalitySelection {
                fm: bits & 1 != 0,
                fs: bits & 2 != 0,
                fl: bits & 4 != 0,
                bn: bits & 8 != 0,
            })
            .collect();
        subsets.sort_by_key(|s| (s.modalities().len(), 15 - s.bits()));
        subsets
    }

    fn bits(&self) -> u8 {
        (self.fm as u8) << 3 | (self.fs as u8) << 2 | (self.fl as u8) << 1 | self.bn as u8
    }
}

impl fmt::Display for ModalitySelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<&str> = self.modalities().iter().map(|m| m.tag()).collect();
        f.write_str(&tags.join("+"))
    }
}
