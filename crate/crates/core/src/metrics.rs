//! Voxel-level confusion counts, overlap metrics and subgroup summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, check_threshold, compute_smv, AnalysisError, SkeletalMuscleVolume};
use crate::preprocess::SliceAxis;
use crate::report::{fixed6, fixed6_or_na};
use crate::volume::{BinaryMask, ProbabilityVolume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground truth have different geometry")]
    GeometryMismatch,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("no records to summarise")]
    EmptyInput,
    #[error("cannot parse case table: {0}")]
    Parse(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

fn tally(pred: &[u8], gt: &[u8]) -> ConfusionCounts {
    // Index by (pred, gt) bit pair: 0 = tn, 1 = fn, 2 = fp, 3 = tp.
    let mut bins = [0u64; 4];
    for (&p, &g) in pred.iter().zip(gt) {
        bins[((p << 1) | g) as usize] += 1;
    }
    ConfusionCounts { tp: bins[3], fp: bins[2], fn_: bins[1], tn: bins[0] }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if !pred.geometry().matches(gt.geometry()) {
        return Err(MetricsError::GeometryMismatch);
    }
    Ok(tally(pred.labels(), gt.labels()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub hss: Option<f64>,
    pub gt_empty: bool,
    pub pred_empty: bool,
}

pub fn harmonic_mean(se: f64, sp: f64) -> f64 {
    if se + sp == 0.0 {
        0.0
    } else {
        2.0 * se * sp / (se + sp)
    }
}

pub fn compute_metrics(c: ConfusionCounts) -> CaseMetrics {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let dsc_den = 2 * c.tp + c.fp + c.fn_;
    let dsc = if dsc_den == 0 { 1.0 } else { (2 * c.tp) as f64 / dsc_den as f64 };
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let hss = sensitivity.zip(specificity).map(|(se, sp)| harmonic_mean(se, sp));
    CaseMetrics { dsc, sensitivity, specificity, hss, gt_empty: c.tp + c.fn_ == 0, pred_empty: c.tp + c.fp == 0 }
}

/// Scores of one case: counts summed over the whole 3D volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaseScore {
    pub counts: ConfusionCounts,
    pub metrics: CaseMetrics,
    pub smv: SkeletalMuscleVolume,
}

pub fn evaluate_case(pred: &ProbabilityVolume, gt: &BinaryMask, threshold: f64) -> Result<CaseScore, MetricsError> {
    check_threshold(threshold).map_err(|_| MetricsError::InvalidThreshold(threshold))?;
    if !pred.geometry().matches(gt.geometry()) {
        return Err(MetricsError::GeometryMismatch);
    }
    let mask = analysis::binarize(pred, threshold)?;
    let counts = tally(mask.labels(), gt.labels());
    Ok(CaseScore { counts, metrics: compute_metrics(counts), smv: compute_smv(&mask) })
}

/// Mean of per-slice DSC along `axis`, skipping slices where both masks
/// are empty. Returns 1 when every slice is empty.
pub fn per_slice_mean_dsc(pred: &BinaryMask, gt: &BinaryMask, axis: SliceAxis) -> Result<f64, MetricsError> {
    if !pred.geometry().matches(gt.geometry()) {
        return Err(MetricsError::GeometryMismatch);
    }
    let dims = gt.geometry().dims();
    let a = axis.index();
    let mut per_slice = vec![ConfusionCounts::default(); dims[a]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = gt.geometry().index(x, y, z);
                let s = [x, y, z][a];
                per_slice[s] = per_slice[s] + tally(&pred.labels()[i..=i], &gt.labels()[i..=i]);
            }
        }
    }
    let scored: Vec<f64> =
        per_slice.into_iter().filter(|c| c.tp + c.fp + c.fn_ > 0).map(|c| compute_metrics(c).dsc).collect();
    Ok(if scored.is_empty() { 1.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 })
}

// ---------------------------------------------------------------------------
// Records and subgroup summaries
// ---------------------------------------------------------------------------

/// Identifying and demographic fields carried alongside a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub case_id: String,
    pub location: String,
    pub sequence: String,
    pub view: String,
    pub sex: String,
    pub age: f64,
    pub race: String,
    pub height_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRecord {
    pub info: CaseInfo,
    pub counts: ConfusionCounts,
    pub metrics: CaseMetrics,
    pub smv_ml: f64,
    pub smi: Option<f64>,
}

impl EvaluationRecord {
    pub fn new(info: CaseInfo, score: &CaseScore, height_squared: bool) -> Result<Self, MetricsError> {
        let smv_ml = score.smv.ml();
        let smi = match info.height_m {
            None => None,
            Some(h) if height_squared => Some(analysis::compute_smi_height_squared(smv_ml, h)?),
            Some(h) => Some(analysis::compute_smi(smv_ml, h)?),
        };
        Ok(Self { info, counts: score.counts, metrics: score.metrics, smv_ml, smi })
    }
}

pub const CSV_HEADER: [&str; 17] = [
    "case_id",
    "location",
    "sequence",
    "view",
    "sex",
    "age",
    "race",
    "tp",
    "fp",
    "fn",
    "tn",
    "dsc",
    "sensitivity",
    "specificity",
    "hss",
    "smv_ml",
    "smi",
];

/// Per-case CSV, rows sorted by case id, reals at six decimals.
pub fn records_to_csv(records: &[EvaluationRecord]) -> String {
    let mut sorted: Vec<&EvaluationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.info.case_id.cmp(&b.info.case_id));
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER).expect("in-memory write");
    for r in sorted {
        let (i, c, m) = (&r.info, &r.counts, &r.metrics);
        writer
            .write_record([
                i.case_id.clone(),
                i.location.clone(),
                i.sequence.clone(),
                i.view.clone(),
                i.sex.clone(),
                fixed6(i.age),
                i.race.clone(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                fixed6(m.dsc),
                fixed6_or_na(m.sensitivity),
                fixed6_or_na(m.specificity),
                fixed6_or_na(m.hss),
                fixed6(r.smv_ml),
                fixed6_or_na(r.smi),
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Reads a table written by [`records_to_csv`]. Metrics are recomputed
/// from the counts rather than trusted from the file.
pub fn records_from_csv(text: &str) -> Result<Vec<EvaluationRecord>, MetricsError> {
    let parse_err = |e: &dyn fmt::Display| MetricsError::Parse(e.to_string());
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(&e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(MetricsError::Parse(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| parse_err(&e))?;
        let field = |i: usize| row.get(i).unwrap_or_default().to_string();
        let real = |i: usize| -> Result<f64, MetricsError> {
            row[i]
                .parse()
                .map_err(|_| MetricsError::Parse(format!("row {}: bad {} '{}'", line + 1, CSV_HEADER[i], &row[i])))
        };
        let count = |i: usize| -> Result<u64, MetricsError> {
            row[i]
                .parse()
                .map_err(|_| MetricsError::Parse(format!("row {}: bad {} '{}'", line + 1, CSV_HEADER[i], &row[i])))
        };
        let counts = ConfusionCounts { tp: count(7)?, fp: count(8)?, fn_: count(9)?, tn: count(10)? };
        out.push(EvaluationRecord {
            info: CaseInfo {
                case_id: field(0),
                location: field(1),
                sequence: field(2),
                view: field(3),
                sex: field(4),
                age: real(5)?,
                race: field(6),
                height_m: None,
            },
            counts,
            metrics: compute_metrics(counts),
            smv_ml: real(15)?,
            smi: if &row[16] == crate::report::NA { None } else { Some(real(16)?) },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubgroupKey {
    Location,
    Sequence,
    Sex,
    AgeBin,
    Race,
}

impl SubgroupKey {
    pub const ALL: [SubgroupKey; 5] = [Self::Location, Self::Sequence, Self::Sex, Self::AgeBin, Self::Race];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Location => "location",
            Self::Sequence => "sequence",
            Self::Sex => "sex",
            Self::AgeBin => "age-bin",
            Self::Race => "race",
        }
    }

    fn group_of(self, info: &CaseInfo) -> String {
        match self {
            Self::Location => info.location.clone(),
            Self::Sequence => info.sequence.clone(),
            Self::Sex => info.sex.clone(),
            Self::AgeBin => age_bin(info.age).to_string(),
            Self::Race => info.race.clone(),
        }
    }
}

impl FromStr for SubgroupKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown subgroup key '{s}' (expected location, sequence, sex, age-bin or race)"))
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn age_bin(age: f64) -> &'static str {
    match age {
        a if a < 18.0 => "<18",
        a if a < 40.0 => "18-39",
        a if a < 60.0 => "40-59",
        _ => "60+",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub mean_dsc: Option<f64>,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub mean_hss: Option<f64>,
    /// Cases left out of the DSC mean because both masks were empty.
    pub dsc_excluded: usize,
    pub sensitivity_excluded: usize,
    pub specificity_excluded: usize,
    pub hss_excluded: usize,
}

/// Mean over defined values, summed in sorted order so the result does not
/// depend on record order. Returns the mean and the number left out.
fn defined_mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let mut defined = Vec::new();
    let mut excluded = 0;
    for v in values {
        match v {
            Some(x) => defined.push(x),
            None => excluded += 1,
        }
    }
    defined.sort_by(f64::total_cmp);
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (mean, excluded)
}

fn summarize(group: String, rs: &[&EvaluationRecord]) -> GroupSummary {
    let both_empty = |r: &EvaluationRecord| r.metrics.gt_empty && r.metrics.pred_empty;
    let (mean_dsc, dsc_excluded) = defined_mean(rs.iter().map(|r| (!both_empty(r)).then_some(r.metrics.dsc)));
    let (mean_sensitivity, sensitivity_excluded) = defined_mean(rs.iter().map(|r| r.metrics.sensitivity));
    let (mean_specificity, specificity_excluded) = defined_mean(rs.iter().map(|r| r.metrics.specificity));
    let (mean_hss, hss_excluded) = defined_mean(rs.iter().map(|r| r.metrics.hss));
    GroupSummary {
        group,
        n: rs.len(),
        mean_dsc,
        mean_sensitivity,
        mean_specificity,
        mean_hss,
        dsc_excluded,
        sensitivity_excluded,
        specificity_excluded,
        hss_excluded,
    }
}

pub fn subgroup_summary(records: &[EvaluationRecord], key: SubgroupKey) -> Result<Vec<GroupSummary>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut groups: BTreeMap<String, Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key.group_of(&r.info)).or_default().push(r);
    }
    Ok(groups.into_iter().map(|(group, rs)| summarize(group, &rs)).collect())
}

/// All records as a single group named `all`.
pub fn overall_summary(records: &[EvaluationRecord]) -> Result<GroupSummary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(summarize("all".to_string(), &records.iter().collect::<Vec<_>>()))
}
