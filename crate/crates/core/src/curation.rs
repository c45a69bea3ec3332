//! Cohort curation: keyword classifiers for sequence and body location,
//! frequency tables, Test-A / Test-B split construction and pairing
//! alignment checks.
//!
//! Both classifiers work on lower-cased alphanumeric tokens, never on raw
//! substrings, so "cor" does not look like a contrast marker and "fs" is
//! only fat saturation when it stands alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{spacing_close, value_range, ScalarVolume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("duplicate series id '{0}'")]
    DuplicateSeriesId(String),
    #[error("cohort has no eligible series")]
    EmptyCohort,
    #[error("invalid metadata for series '{series_id}': {reason}")]
    InvalidMetadata { series_id: String, reason: String },
    #[error("manual selection references unknown series '{0}'")]
    UnknownSeries(String),
    #[error("series '{0}' selected for both test sets")]
    SplitConflict(String),
    #[error("cannot parse cohort: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", try_from = "String")]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
    Unknown,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Axial => "axial",
            Self::Coronal => "coronal",
            Self::Sagittal => "sagittal",
            Self::Unknown => "unknown",
        }
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" | "ax" | "tra" | "transverse" => Ok(Self::Axial),
            "coronal" | "cor" => Ok(Self::Coronal),
            "sagittal" | "sag" => Ok(Self::Sagittal),
            "unknown" | "" | "na" | "n/a" => Ok(Self::Unknown),
            other => Err(format!("unknown view '{other}'")),
        }
    }
}

impl TryFrom<String> for View {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", try_from = "String")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Female => "female",
            Self::Male => "male",
            Self::Unknown => "unknown",
        }
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Self::Female),
            "male" | "m" => Ok(Self::Male),
            "unknown" | "" | "na" | "n/a" | "u" => Ok(Self::Unknown),
            other => Err(format!("unknown sex '{other}'")),
        }
    }
}

impl TryFrom<String> for Sex {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

/// Ages above this are recorded as this value.
pub const AGE_CAP: f64 = 90.0;
const HEIGHT_RANGE_M: (f64, f64) = (0.3, 2.6);

/// One row of the cohort input (CSV or JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetadata {
    pub patient_id: String,
    pub exam_id: String,
    pub series_id: String,
    pub series_description: String,
    pub protocol_description: String,
    pub view: View,
    pub age: f64,
    pub sex: Sex,
    pub race: String,
    #[serde(default)]
    pub height_m: Option<f64>,
    #[serde(default)]
    pub year: Option<i32>,
}

impl SeriesMetadata {
    /// Clamps the age to [`AGE_CAP`] and checks the remaining ranges.
    pub fn validated(mut self) -> Result<Self, CurationError> {
        let invalid = |reason: String| CurationError::InvalidMetadata { series_id: self.series_id.clone(), reason };
        if !(self.age.is_finite() && self.age >= 0.0) {
            return Err(invalid(format!("age {} is not a non-negative number", self.age)));
        }
        if let Some(h) = self.height_m {
            if !(h > HEIGHT_RANGE_M.0 && h < HEIGHT_RANGE_M.1) {
                return Err(invalid(format!("height {h} m outside (0.3, 2.6)")));
            }
        }
        self.age = self.age.min(AGE_CAP);
        Ok(self)
    }
}

pub fn parse_cohort_csv(text: &str) -> Result<Vec<SeriesMetadata>, CurationError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    reader
        .deserialize::<SeriesMetadata>()
        .map(|row| row.map_err(|e| CurationError::Parse(e.to_string())).and_then(SeriesMetadata::validated))
        .collect()
}

pub fn parse_cohort_json(text: &str) -> Result<Vec<SeriesMetadata>, CurationError> {
    let rows: Vec<SeriesMetadata> = serde_json::from_str(text).map_err(|e| CurationError::Parse(e.to_string()))?;
    rows.into_iter().map(SeriesMetadata::validated).collect()
}

pub fn write_cohort_csv(rows: &[SeriesMetadata]) -> Result<String, CurationError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| CurationError::Parse(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| CurationError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CurationError::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Tokenisation
// ---------------------------------------------------------------------------

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

struct Tokens(Vec<String>);

impl Tokens {
    fn has(&self, word: &str) -> bool {
        self.0.iter().any(|t| t == word)
    }

    fn has_any(&self, words: &[&str]) -> bool {
        words.iter().any(|w| self.has(w))
    }

    fn has_phrase(&self, phrase: &[&str]) -> bool {
        self.0.windows(phrase.len()).any(|w| w.iter().zip(phrase).all(|(a, b)| a == b))
    }
}

// ---------------------------------------------------------------------------
// Sequence classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SequenceBase {
    #[serde(rename = "t1")]
    T1,
    #[serde(rename = "t2")]
    T2,
    #[serde(rename = "pd")]
    Pd,
    #[serde(rename = "stir")]
    Stir,
    #[serde(rename = "tirm")]
    Tirm,
    #[serde(rename = "dixon-t1")]
    DixonT1,
    #[serde(rename = "dixon")]
    Dixon,
    #[serde(rename = "vibe-group")]
    VibeGroup,
    #[serde(rename = "se-group")]
    SeGroup,
    #[serde(rename = "mra")]
    Mra,
    #[serde(rename = "unknown")]
    Unknown,
}

impl SequenceBase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T2 => "t2",
            Self::Pd => "pd",
            Self::Stir => "stir",
            Self::Tirm => "tirm",
            Self::DixonT1 => "dixon-t1",
            Self::Dixon => "dixon",
            Self::VibeGroup => "vibe-group",
            Self::SeGroup => "se-group",
            Self::Mra => "mra",
            Self::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    None,
    Water,
    Fat,
    InPhase,
    OutPhase,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Water => "water",
            Self::Fat => "fat",
            Self::InPhase => "in-phase",
            Self::OutPhase => "out-phase",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLabel {
    pub base: SequenceBase,
    pub fat_sat: bool,
    pub phase: Phase,
    pub contrast: bool,
    pub excluded: bool,
    pub exclusion_reason: Option<String>,
}

impl SequenceLabel {
    /// Canonical reporting name: base, phase, ` fs`, then `+c`, e.g.
    /// `dixon-t1 water`, `t2 fs`, `se-group fs+c`.
    pub fn name(&self) -> String {
        let mut s = self.base.as_str().to_string();
        if self.phase != Phase::None {
            s.push(' ');
            s.push_str(self.phase.as_str());
        }
        if self.fat_sat {
            s.push_str(" fs");
        }
        if self.contrast {
            s.push_str("+c");
        }
        s
    }
}

/// Sequences that do not show muscle adequately.
const SEQUENCE_EXCLUSIONS: &[&str] = &["diffusion", "dwi", "adc", "localizer", "loc", "scout", "mpr", "mrcp", "twist"];
const VIBE_GROUP: &[&str] = &["vibe", "lava", "grasp", "thrive"];
const SINGLE_SHOT_SE: &[&str] = &["haste", "ssfse"];
const SE_GROUP: &[&str] = &["se", "fse", "tse"];

/// Classifies a DICOM SeriesDescription. Total: unmatched text yields an
/// `unknown` base.
pub fn classify_sequence(series_description: &str) -> SequenceLabel {
    let tokens = Tokens(tokenize(series_description));
    let t1 = tokens.has_any(&["t1", "t1w"]);

    let base = if tokens.has("dixon") {
        if t1 {
            SequenceBase::DixonT1
        } else {
            SequenceBase::Dixon
        }
    } else if tokens.has("mra") {
        SequenceBase::Mra
    } else if tokens.has("stir") {
        SequenceBase::Stir
    } else if tokens.has("tirm") {
        SequenceBase::Tirm
    } else if tokens.has_any(VIBE_GROUP) {
        SequenceBase::VibeGroup
    } else if tokens.has_any(SINGLE_SHOT_SE) {
        SequenceBase::SeGroup
    } else if t1 {
        SequenceBase::T1
    } else if tokens.has_any(&["t2", "t2w"]) {
        SequenceBase::T2
    } else if tokens.has_any(&["pd", "pdw"]) {
        SequenceBase::Pd
    } else if tokens.has_any(SE_GROUP) {
        SequenceBase::SeGroup
    } else {
        SequenceBase::Unknown
    };

    let fat_sat_phrase = tokens.has_phrase(&["fat", "sat"]);
    let fat_sat = tokens.has_any(&["fs", "fatsat"]) || fat_sat_phrase;

    let phase = if tokens.has_phrase(&["in", "phase"]) || tokens.has("inphase") {
        Phase::InPhase
    } else if tokens.has_phrase(&["out", "phase"])
        || tokens.has_phrase(&["out", "of", "phase"])
        || tokens.has("outphase")
        || tokens.has("opp")
    {
        Phase::OutPhase
    } else if tokens.has("water") {
        Phase::Water
    } else if tokens.0.iter().enumerate().any(|(i, t)| t == "fat" && tokens.0.get(i + 1).is_none_or(|n| n != "sat")) {
        Phase::Fat
    } else {
        Phase::None
    };

    let contrast = tokens.has("c");
    let exclusion_reason = SEQUENCE_EXCLUSIONS.iter().find(|kw| tokens.has(kw)).map(|kw| kw.to_string());

    SequenceLabel { base, fat_sat, phase, contrast, excluded: exclusion_reason.is_some(), exclusion_reason }
}

// ---------------------------------------------------------------------------
// Body location classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationCategory {
    Chest,
    Abdomen,
    ThoracicSpine,
    LumbarSpine,
    Shoulder,
    Humerus,
    Hip,
    Thigh,
    Knee,
    LowerLeg,
    Misc,
}

impl LocationCategory {
    pub const ALL: [LocationCategory; 11] = [
        Self::Chest,
        Self::Abdomen,
        Self::ThoracicSpine,
        Self::LumbarSpine,
        Self::Shoulder,
        Self::Humerus,
        Self::Hip,
        Self::Thigh,
        Self::Knee,
        Self::LowerLeg,
        Self::Misc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Chest => "chest",
            Self::Abdomen => "abdomen",
            Self::ThoracicSpine => "thoracic-spine",
            Self::LumbarSpine => "lumbar-spine",
            Self::Shoulder => "shoulder",
            Self::Humerus => "humerus",
            Self::Hip => "hip",
            Self::Thigh => "thigh",
            Self::Knee => "knee",
            Self::LowerLeg => "lower-leg",
            Self::Misc => "misc",
        }
    }
}

impl FromStr for LocationCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown body location '{s}'"))
    }
}

impl fmt::Display for LocationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationExclusion {
    HeadFace,
    MultiArea,
    Unrecognized,
}

impl LocationExclusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::HeadFace => "head-face",
            Self::MultiArea => "multi-area",
            Self::Unrecognized => "unrecognized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyLocation {
    Category(LocationCategory),
    Excluded(LocationExclusion),
}

const HEAD_FACE: &[&str] = &["brain", "cervical", "neck", "face", "facial", "orbit", "orbits", "cspine"];

const LOCATION_WORDS: &[(LocationCategory, &[&str])] = &[
    (LocationCategory::Chest, &["chest", "thorax", "sternum", "breast", "ribs"]),
    (
        LocationCategory::Abdomen,
        &[
            "abdomen",
            "abdominal",
            "abd",
            "liver",
            "pancreas",
            "kidney",
            "kidneys",
            "renal",
            "adrenal",
            "spleen",
            "enterography",
        ],
    ),
    (LocationCategory::ThoracicSpine, &["thoracic", "tspine"]),
    (LocationCategory::LumbarSpine, &["lumbar", "lspine", "lumbosacral", "sacrum"]),
    (LocationCategory::Shoulder, &["shoulder", "shoulders", "scapula", "clavicle"]),
    (LocationCategory::Humerus, &["humerus", "humeral", "arm"]),
    (LocationCategory::Hip, &["hip", "hips"]),
    (LocationCategory::Thigh, &["thigh", "thighs", "femur"]),
    (LocationCategory::Knee, &["knee", "knees", "patella"]),
    (LocationCategory::LowerLeg, &["tibia", "fibula", "tibfib", "calf"]),
    (
        LocationCategory::Misc,
        &[
            "hand", "hands", "wrist", "wrists", "finger", "fingers", "thumb", "foot", "feet", "ankle", "ankles", "toe",
            "toes", "heel", "forearm", "elbow",
        ],
    ),
];

const LOCATION_PHRASES: &[(LocationCategory, &[&str])] = &[
    (LocationCategory::ThoracicSpine, &["t", "spine"]),
    (LocationCategory::LumbarSpine, &["l", "spine"]),
    (LocationCategory::LowerLeg, &["lower", "leg"]),
];

/// Pelvis words only count as hip when nothing more specific matched
/// ("abdomen pelvis" stays abdomen).
const WEAK_HIP: &[&str] = &["pelvis", "pelvic"];

/// Maps a protocol description onto one of the eleven body-location
/// categories, or an exclusion.
pub fn classify_body_location(protocol_description: &str) -> BodyLocation {
    let tokens = Tokens(tokenize(protocol_description));
    if tokens.has_any(HEAD_FACE) || tokens.has_phrase(&["c", "spine"]) {
        return BodyLocation::Excluded(LocationExclusion::HeadFace);
    }
    if tokens.has("entire")
        || tokens.has("wholebody")
        || tokens.has_phrase(&["whole", "body"])
        || tokens.has_phrase(&["total", "spine"])
    {
        return BodyLocation::Excluded(LocationExclusion::MultiArea);
    }
    let mut matched = BTreeSet::new();
    for (category, words) in LOCATION_WORDS {
        if tokens.has_any(words) {
            matched.insert(*category);
        }
    }
    for (category, phrase) in LOCATION_PHRASES {
        if tokens.has_phrase(phrase) {
            matched.insert(*category);
        }
    }
    match matched.len() {
        1 => BodyLocation::Category(*matched.iter().next().unwrap()),
        0 if tokens.has_any(WEAK_HIP) => BodyLocation::Category(LocationCategory::Hip),
        0 => BodyLocation::Excluded(LocationExclusion::Unrecognized),
        _ => BodyLocation::Excluded(LocationExclusion::MultiArea),
    }
}

// ---------------------------------------------------------------------------
// Cohort table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortRow {
    pub meta: SeriesMetadata,
    pub sequence: SequenceLabel,
    pub location: LocationCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedSeries {
    pub series_id: String,
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct FrequencyKey {
    pub location: LocationCategory,
    pub sequence: String,
    pub view: View,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortTable {
    rows: Vec<CohortRow>,
    excluded: Vec<ExcludedSeries>,
    frequency: BTreeMap<FrequencyKey, usize>,
}

impl CohortTable {
    /// Included rows, sorted by series id.
    pub fn rows(&self) -> &[CohortRow] {
        &self.rows
    }

    pub fn excluded(&self) -> &[ExcludedSeries] {
        &self.excluded
    }

    pub fn frequency(&self) -> &BTreeMap<FrequencyKey, usize> {
        &self.frequency
    }

    pub fn count(&self, location: LocationCategory, sequence: &str, view: View) -> usize {
        let key = FrequencyKey { location, sequence: sequence.to_string(), view };
        self.frequency.get(&key).copied().unwrap_or(0)
    }

    /// Series count for a sequence at a location, summed over views.
    pub fn count_any_view(&self, location: LocationCategory, sequence: &str) -> usize {
        self.frequency.iter().filter(|(k, _)| k.location == location && k.sequence == sequence).map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// JSON-friendly view of the table: frequencies and exclusions.
    pub fn summary(&self) -> CohortSummary {
        CohortSummary {
            included: self.rows.len(),
            frequencies: self
                .frequency
                .iter()
                .map(|(k, &count)| FrequencyRow {
                    location: k.location,
                    sequence: k.sequence.clone(),
                    view: k.view,
                    count,
                })
                .collect(),
            excluded: self.excluded.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub location: LocationCategory,
    pub sequence: String,
    pub view: View,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSummary {
    pub included: usize,
    pub frequencies: Vec<FrequencyRow>,
    pub excluded: Vec<ExcludedSeries>,
}

pub fn build_cohort(rows: Vec<SeriesMetadata>) -> Result<CohortTable, CurationError> {
    let mut seen = BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.series_id.as_str()) {
            return Err(CurationError::DuplicateSeriesId(row.series_id.clone()));
        }
    }
    let classified: Vec<(SeriesMetadata, SequenceLabel, BodyLocation)> = rows
        .into_par_iter()
        .map(|meta| {
            let sequence = classify_sequence(&meta.series_description);
            let location = classify_body_location(&meta.protocol_description);
            (meta, sequence, location)
        })
        .collect();

    let mut table = CohortTable::default();
    for (meta, sequence, location) in classified {
        let reason = match (&sequence.exclusion_reason, location) {
            (_, BodyLocation::Excluded(why)) => Some(format!("location:{}", why.as_str())),
            (Some(kw), _) => Some(format!("sequence:{kw}")),
            _ => None,
        };
        match (reason, location) {
            (None, BodyLocation::Category(location)) => {
                let key = FrequencyKey { location, sequence: sequence.name(), view: meta.view };
                *table.frequency.entry(key).or_insert(0) += 1;
                table.rows.push(CohortRow { meta, sequence, location });
            }
            (reason, _) => table.excluded.push(ExcludedSeries {
                series_id: meta.series_id,
                patient_id: meta.patient_id,
                reason: reason.unwrap_or_default(),
            }),
        }
    }
    table.rows.sort_by(|a, b| a.meta.series_id.cmp(&b.meta.series_id));
    table.excluded.sort_by(|a, b| a.series_id.cmp(&b.series_id));
    Ok(table)
}

// ---------------------------------------------------------------------------
// Test splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestSet {
    #[serde(rename = "test_a", alias = "a", alias = "A")]
    A,
    #[serde(rename = "test_b", alias = "b", alias = "B")]
    B,
}

/// Judgment-driven additions (disease, hardware, noise cases).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualSelection {
    pub series_id: String,
    pub set: TestSet,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Test-A series per location; abdomen splits this between its
    /// axial and coronal sequences.
    pub test_a_per_location: usize,
    /// Keep one Test-B series per sequence across the whole cohort,
    /// assigned to the location with the most patients for it.
    pub dedupe_test_b: bool,
    pub manual: Vec<ManualSelection>,
    /// Series never eligible for automatic selection.
    pub exclude: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_a_per_location: 4, dedupe_test_b: false, manual: Vec::new(), exclude: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub series_id: String,
    pub patient_id: String,
    pub location: LocationCategory,
    pub sequence: String,
    pub view: View,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_a: Vec<SplitEntry>,
    pub test_b: Vec<SplitEntry>,
}

impl SplitPlan {
    pub fn set_of(&self, series_id: &str) -> Option<TestSet> {
        if self.test_a.iter().any(|e| e.series_id == series_id) {
            Some(TestSet::A)
        } else if self.test_b.iter().any(|e| e.series_id == series_id) {
            Some(TestSet::B)
        } else {
            None
        }
    }
}

/// Sequences at one location ranked by descending count, then name.
pub fn rank_sequences<'a>(rows: impl IntoIterator<Item = &'a CohortRow>) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for row in rows {
        if row.sequence.base != SequenceBase::Unknown {
            *counts.entry(row.sequence.name()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

fn entry(row: &CohortRow, note: String) -> SplitEntry {
    SplitEntry {
        series_id: row.meta.series_id.clone(),
        patient_id: row.meta.patient_id.clone(),
        location: row.location,
        sequence: row.sequence.name(),
        view: row.meta.view,
        note,
    }
}

/// Picks up to `quota` rows (already sorted by series id), one per patient.
fn pick_distinct_patients<'a>(rows: impl Iterator<Item = &'a CohortRow>, quota: usize) -> Vec<&'a CohortRow> {
    let mut patients = BTreeSet::new();
    rows.filter(|r| patients.insert(r.meta.patient_id.as_str())).take(quota).collect()
}

/// Most frequent view among rows, ties to the earlier view.
fn dominant_view<'a>(rows: impl Iterator<Item = &'a CohortRow>) -> Option<View> {
    let mut counts: BTreeMap<View, usize> = BTreeMap::new();
    for r in rows {
        *counts.entry(r.meta.view).or_insert(0) += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))).map(|(v, _)| v)
}

/// Frequency-driven Test-A / Test-B construction.
///
/// Test A takes the most frequent sequence per location (for the abdomen,
/// the most frequent axial and the most frequent coronal sequence). Test B
/// takes one series for each of the 2nd- to 4th-ranked sequences per
/// location, from that sequence's most frequent view. Ties go to the
/// lexicographically smaller sequence name, then the smaller series id.
pub fn construct_test_splits(cohort: &CohortTable, config: &SplitConfig) -> Result<SplitPlan, CurationError> {
    let excluded: BTreeSet<&str> = config.exclude.iter().map(String::as_str).collect();
    let manual: BTreeSet<&str> = config.manual.iter().map(|m| m.series_id.as_str()).collect();
    let eligible: Vec<&CohortRow> = cohort
        .rows()
        .iter()
        .filter(|r| !excluded.contains(r.meta.series_id.as_str()) && !manual.contains(r.meta.series_id.as_str()))
        .filter(|r| r.sequence.base != SequenceBase::Unknown)
        .collect();
    if eligible.is_empty() && config.manual.is_empty() {
        return Err(CurationError::EmptyCohort);
    }
    let mut by_location: BTreeMap<LocationCategory, Vec<&CohortRow>> = BTreeMap::new();
    for row in &eligible {
        by_location.entry(row.location).or_default().push(row);
    }

    let mut plan = SplitPlan::default();
    let mut taken: BTreeSet<String> = BTreeSet::new();

    for (&location, rows) in &by_location {
        let ranked = rank_sequences(rows.iter().copied());
        if location == LocationCategory::Abdomen {
            let quotas = [
                (View::Axial, config.test_a_per_location.div_ceil(2)),
                (View::Coronal, config.test_a_per_location / 2),
            ];
            for (view, quota) in quotas {
                let in_view = rank_sequences(rows.iter().copied().filter(|r| r.meta.view == view));
                let Some((sequence, count)) = in_view.first() else { continue };
                let picks = pick_distinct_patients(
                    rows.iter().copied().filter(|r| r.meta.view == view && &r.sequence.name() == sequence),
                    quota,
                );
                for row in picks {
                    let note = format!("most frequent {view} sequence for {location} ({count} series)");
                    taken.insert(row.meta.series_id.clone());
                    plan.test_a.push(entry(row, note));
                }
            }
        } else if let Some((sequence, count)) = ranked.first() {
            let picks = pick_distinct_patients(
                rows.iter().copied().filter(|r| &r.sequence.name() == sequence),
                config.test_a_per_location,
            );
            for row in picks {
                let note = format!("most frequent sequence for {location} ({count} series)");
                taken.insert(row.meta.series_id.clone());
                plan.test_a.push(entry(row, note));
            }
        }
    }

    // (location, rank, sequence, count) for every 2nd..4th ranked sequence.
    let mut candidates: Vec<(LocationCategory, usize, String, usize)> = Vec::new();
    for (&location, rows) in &by_location {
        for (rank, (sequence, count)) in rank_sequences(rows.iter().copied()).into_iter().enumerate().skip(1).take(3) {
            candidates.push((location, rank + 1, sequence, count));
        }
    }
    if config.dedupe_test_b {
        let patients_at = |location: LocationCategory, sequence: Option<&str>| {
            by_location[&location]
                .iter()
                .filter(|r| sequence.is_none_or(|s| r.sequence.name() == s))
                .map(|r| r.meta.patient_id.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        };
        let mut best: BTreeMap<String, (LocationCategory, usize, usize)> = BTreeMap::new();
        for (location, rank, sequence, _) in &candidates {
            let key = (patients_at(*location, Some(sequence)), patients_at(*location, None));
            let better = match best.get(sequence) {
                None => true,
                Some((prev, _, _)) => {
                    let prev_key = (patients_at(*prev, Some(sequence)), patients_at(*prev, None));
                    key > prev_key
                }
            };
            if better {
                best.insert(sequence.clone(), (*location, *rank, 0));
            }
        }
        candidates.retain(|(location, _, sequence, _)| best[sequence].0 == *location);
    }

    for (location, rank, sequence, count) in candidates {
        let pool: Vec<&CohortRow> = by_location[&location]
            .iter()
            .copied()
            .filter(|r| r.sequence.name() == sequence && !taken.contains(&r.meta.series_id))
            .collect();
        let Some(view) = dominant_view(pool.iter().copied()) else { continue };
        if let Some(row) = pool.iter().find(|r| r.meta.view == view) {
            let note = format!("rank {rank} sequence for {location} ({count} series), {view} view");
            taken.insert(row.meta.series_id.clone());
            plan.test_b.push(entry(row, note));
        }
    }

    for selection in &config.manual {
        let row = cohort
            .rows()
            .iter()
            .find(|r| r.meta.series_id == selection.series_id)
            .ok_or_else(|| CurationError::UnknownSeries(selection.series_id.clone()))?;
        if !taken.insert(row.meta.series_id.clone()) {
            return Err(CurationError::SplitConflict(row.meta.series_id.clone()));
        }
        let note = if selection.note.is_empty() { "manual selection".to_string() } else { selection.note.clone() };
        match selection.set {
            TestSet::A => plan.test_a.push(entry(row, note)),
            TestSet::B => plan.test_b.push(entry(row, note)),
        }
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTolerances {
    pub spacing_rel: f64,
    pub affine_abs: f64,
    pub ncc_min: f64,
}

impl Default for AlignmentTolerances {
    fn default() -> Self {
        Self { spacing_rel: 1e-3, affine_abs: 1e-2, ncc_min: 0.30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionReason {
    Dims,
    Spacing,
    Affine,
    Ncc(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    Aligned { ncc: f64 },
    Rejected(RejectionReason),
}

/// Pearson correlation of the two voxel arrays after each is min-max
/// scaled to `[0, 1]`. Two constant volumes correlate perfectly; one
/// constant volume against a varying one gives 0.
pub fn normalized_cross_correlation(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "NCC needs equal-length inputs");
    let scaled = |v: &[f32]| -> Option<Vec<f64>> {
        let (lo, hi) = value_range(v);
        (hi > lo).then(|| v.iter().map(|&x| (x as f64 - lo as f64) / (hi as f64 - lo as f64)).collect())
    };
    match (scaled(a), scaled(b)) {
        (None, None) => 1.0,
        (None, _) | (_, None) => 0.0,
        (Some(a), Some(b)) => {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(&b) {
                let (dx, dy) = (x - ma, y - mb);
                sab += dx * dy;
                saa += dx * dx;
                sbb += dy * dy;
            }
            (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
        }
    }
}

/// Decides whether a reference annotation can be reused verbatim on a
/// candidate series.
pub fn verify_pair_alignment(
    reference: &ScalarVolume,
    candidate: &ScalarVolume,
    tolerances: &AlignmentTolerances,
) -> Alignment {
    let (rg, cg) = (reference.geometry(), candidate.geometry());
    if rg.dims() != cg.dims() {
        return Alignment::Rejected(RejectionReason::Dims);
    }
    let spacing_ok = rg.spacing().iter().zip(cg.spacing()).all(|(a, b)| {
        if tolerances.spacing_rel == crate::volume::SPACING_REL_TOL {
            spacing_close(*a, b)
        } else {
            (a - b).abs() <= tolerances.spacing_rel * a.abs().max(b.abs())
        }
    });
    if !spacing_ok {
        return Alignment::Rejected(RejectionReason::Spacing);
    }
    let affine_ok = rg
        .affine()
        .iter()
        .flatten()
        .zip(cg.affine().iter().flatten())
        .all(|(a, b)| (a - b).abs() <= tolerances.affine_abs);
    if !affine_ok {
        return Alignment::Rejected(RejectionReason::Affine);
    }
    let ncc = normalized_cross_correlation(reference.voxels(), candidate.voxels());
    if ncc >= tolerances.ncc_min {
        Alignment::Aligned { ncc }
    } else {
        Alignment::Rejected(RejectionReason::Ncc(ncc))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct PairCandidate {
    pub reference: String,
    pub candidate: String,
}

/// Unannotated series sharing patient and view with an annotated one.
pub fn pairing_candidates(cohort: &CohortTable, annotated: &[String]) -> Vec<PairCandidate> {
    let annotated: BTreeSet<&str> = annotated.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for reference in cohort.rows().iter().filter(|r| annotated.contains(r.meta.series_id.as_str())) {
        for candidate in cohort.rows() {
            if candidate.meta.patient_id == reference.meta.patient_id
                && candidate.meta.view == reference.meta.view
                && !annotated.contains(candidate.meta.series_id.as_str())
            {
                out.push(PairCandidate {
                    reference: reference.meta.series_id.clone(),
                    candidate: candidate.meta.series_id.clone(),
                });
            }
        }
    }
    out.sort();
    out
}
