//! The `evaluate` pipeline: load every case, optionally ensemble, score,
//! and assemble the report bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::config::{render, RunConfig, ENSEMBLE};
use super::{load_cohort_rows, read_volume, CliError};
use crate::analysis::{compute_smv, ensemble_mean, pearson, wilcoxon_signed_rank, Alternative};
use crate::curation::{build_cohort, classify_body_location, construct_test_splits, BodyLocation, SplitPlan};
use crate::metrics::{evaluate_case, overall_summary, records_to_csv, subgroup_summary, CaseInfo, EvaluationRecord};
use crate::report::{object, to_stable_json, to_stable_value};
use crate::volume::{BinaryMask, ProbabilityVolume};

/// Report files keyed by file name, ready to be written.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReportBundle {
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for (name, body) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct CaseResult {
    /// Model name → record.
    records: BTreeMap<String, EvaluationRecord>,
    gt_smv_ml: f64,
}

fn load_mask(path: &Path) -> Result<BinaryMask, String> {
    let v = read_volume(path)?;
    BinaryMask::from_scalar(&v).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_probability(path: &Path) -> Result<ProbabilityVolume, String> {
    let v = read_volume(path)?;
    ProbabilityVolume::from_scalar(v).map_err(|e| format!("{}: {e}", path.display()))
}

fn case_info(meta: &crate::curation::SeriesMetadata) -> CaseInfo {
    let sequence = crate::curation::classify_sequence(&meta.series_description);
    let location = match classify_body_location(&meta.protocol_description) {
        BodyLocation::Category(c) => c.as_str().to_string(),
        BodyLocation::Excluded(e) => e.as_str().to_string(),
    };
    CaseInfo {
        case_id: meta.series_id.clone(),
        location,
        sequence: sequence.name(),
        view: meta.view.as_str().to_string(),
        sex: meta.sex.as_str().to_string(),
        age: meta.age,
        race: meta.race.clone(),
        height_m: meta.height_m,
    }
}

fn evaluate_one(config: &RunConfig, meta: &crate::curation::SeriesMetadata) -> Result<CaseResult, String> {
    if let Some(image) = &config.image {
        let p = render(image, meta);
        if !p.is_file() {
            return Err(format!("image {} does not exist", p.display()));
        }
    }
    let gt = load_mask(&render(&config.mask, meta))?;
    let mut maps: BTreeMap<String, ProbabilityVolume> = BTreeMap::new();
    for (name, template) in &config.predictions {
        maps.insert(name.clone(), load_probability(&render(template, meta))?);
    }
    if !config.ensemble.is_empty() {
        let inputs: Vec<ProbabilityVolume> = config.ensemble.iter().map(|n| maps[n].clone()).collect();
        let mean = ensemble_mean(&inputs).map_err(|e| format!("ensemble: {e}"))?;
        maps.insert(ENSEMBLE.to_string(), mean);
    }
    let info = case_info(meta);
    let mut records = BTreeMap::new();
    for (name, map) in &maps {
        let score = evaluate_case(map, &gt, config.threshold).map_err(|e| format!("{name}: {e}"))?;
        let record = EvaluationRecord::new(info.clone(), &score, config.smi_height_squared)
            .map_err(|e| format!("{name}: {e}"))?;
        records.insert(name.clone(), record);
    }
    Ok(CaseResult { records, gt_smv_ml: compute_smv(&gt).ml() })
}

fn selected_series(
    config: &RunConfig,
    rows: &[crate::curation::SeriesMetadata],
) -> Result<Option<BTreeSet<String>>, CliError> {
    let Some(split) = &config.split else { return Ok(None) };
    let plan: SplitPlan = match (&split.plan, &split.construct) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read split plan {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("malformed split plan {}: {e}", path.display())))?
        }
        (None, Some(split_config)) => {
            let cohort = build_cohort(rows.to_vec()).map_err(|e| CliError::Config(e.to_string()))?;
            construct_test_splits(&cohort, split_config).map_err(|e| CliError::Config(e.to_string()))?
        }
        (None, None) => unreachable!("validated"),
    };
    let entries = match split.test_set {
        crate::curation::TestSet::A => plan.test_a,
        crate::curation::TestSet::B => plan.test_b,
    };
    Ok(Some(entries.into_iter().map(|e| e.series_id).collect()))
}

#[derive(Serialize)]
struct WilcoxonEntry {
    alternative: Alternative,
    mean_difference: f64,
    n_cases: usize,
    statistic: Option<f64>,
    p_value: Option<f64>,
    method: Option<crate::analysis::TestMethod>,
    n_effective: Option<usize>,
    error: Option<String>,
}

#[derive(Serialize)]
struct PearsonEntry {
    n: usize,
    r: Option<f64>,
    p_two_sided: Option<f64>,
    error: Option<String>,
}

/// Runs the whole evaluation and returns the report files without writing
/// them. Per-case failures abort the run: exit 3, or 4 when none succeeded.
pub fn run_evaluate(config: &RunConfig) -> Result<ReportBundle, CliError> {
    let rows = load_cohort_rows(&config.cohort).map_err(CliError::Config)?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = rows.iter().find(|r| !seen.insert(r.series_id.clone())) {
        return Err(CliError::Config(format!("duplicate series id '{}' in cohort", dup.series_id)));
    }
    let selection = selected_series(config, &rows)?;
    let mut cases: Vec<&crate::curation::SeriesMetadata> =
        rows.iter().filter(|r| selection.as_ref().is_none_or(|s| s.contains(&r.series_id))).collect();
    cases.sort_by(|a, b| a.series_id.cmp(&b.series_id));
    if cases.is_empty() {
        return Err(CliError::Config("no cases to evaluate".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    let results: Vec<Result<CaseResult, String>> =
        pool.install(|| cases.par_iter().map(|m| evaluate_one(config, m)).collect());

    let failures: Vec<(String, String)> = cases
        .iter()
        .zip(&results)
        .filter_map(|(m, r)| r.as_ref().err().map(|e| (m.series_id.clone(), e.clone())))
        .collect();
    if !failures.is_empty() {
        return Err(CliError::CaseFailures { failures, total: cases.len() });
    }
    let results: Vec<CaseResult> = results.into_iter().map(Result::unwrap).collect();

    let primary = config.primary();
    let models: Vec<String> = results[0].records.keys().cloned().collect();
    let per_model: BTreeMap<String, Vec<EvaluationRecord>> =
        models.iter().map(|m| (m.clone(), results.iter().map(|r| r.records[m].clone()).collect())).collect();

    let mut bundle = ReportBundle::default();
    for (model, records) in &per_model {
        let name = if *model == primary { "cases.csv".to_string() } else { format!("cases_{model}.csv") };
        bundle.files.insert(name, records_to_csv(records));
    }

    let json = |e: serde_json::Error| CliError::Io(format!("serialising report: {e}"));
    let mut model_summaries = Vec::new();
    for (model, records) in &per_model {
        let mut subgroups = Vec::new();
        for key in &config.subgroup_keys {
            let groups = subgroup_summary(records, *key).map_err(|e| CliError::Io(e.to_string()))?;
            subgroups.push((key.as_str().to_string(), to_stable_value(&groups).map_err(json)?));
        }
        let overall = overall_summary(records).map_err(|e| CliError::Io(e.to_string()))?;
        model_summaries.push((
            model.clone(),
            object([("overall", to_stable_value(&overall).map_err(json)?), ("subgroups", object(subgroups))]),
        ));
    }
    let summary = object([
        (
            "run",
            object([
                ("cases", Value::from(results.len())),
                ("models", to_stable_value(&models).map_err(json)?),
                ("primary", Value::from(primary.clone())),
                ("seed", Value::from(config.seed)),
                ("threshold", crate::report::number(config.threshold)),
            ]),
        ),
        ("models", object(model_summaries)),
    ]);
    bundle.files.insert("summary.json".into(), to_stable_json(&summary).map_err(json)?);

    let dsc = |model: &str| -> Vec<f64> { per_model[model].iter().map(|r| r.metrics.dsc).collect() };
    let mut wilcoxon = Vec::new();
    if per_model.contains_key(ENSEMBLE) {
        let ens = dsc(ENSEMBLE);
        for input in &config.ensemble {
            let diffs: Vec<f64> = ens.iter().zip(dsc(input)).map(|(e, i)| e - i).collect();
            let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let entry = match wilcoxon_signed_rank(&diffs, Alternative::Greater) {
                Ok(t) => WilcoxonEntry {
                    alternative: Alternative::Greater,
                    mean_difference,
                    n_cases: diffs.len(),
                    statistic: Some(t.statistic),
                    p_value: Some(t.p_value),
                    method: Some(t.method),
                    n_effective: Some(t.n_effective),
                    error: None,
                },
                Err(e) => WilcoxonEntry {
                    alternative: Alternative::Greater,
                    mean_difference,
                    n_cases: diffs.len(),
                    statistic: None,
                    p_value: None,
                    method: None,
                    n_effective: None,
                    error: Some(e.to_string()),
                },
            };
            wilcoxon.push((format!("{ENSEMBLE}_vs_{input}"), to_stable_value(&entry).map_err(json)?));
        }
    }
    let gt_smv: Vec<f64> = results.iter().map(|r| r.gt_smv_ml).collect();
    let mut pearson_smv = Vec::new();
    let mut means = Vec::new();
    for (model, records) in &per_model {
        let predicted: Vec<f64> = records.iter().map(|r| r.smv_ml).collect();
        let entry = match pearson(&predicted, &gt_smv) {
            Ok(p) => PearsonEntry { n: p.n, r: Some(p.r), p_two_sided: Some(p.p_two_sided), error: None },
            Err(e) => PearsonEntry { n: predicted.len(), r: None, p_two_sided: None, error: Some(e.to_string()) },
        };
        pearson_smv.push((model.clone(), to_stable_value(&entry).map_err(json)?));
        let overall = overall_summary(records).map_err(|e| CliError::Io(e.to_string()))?;
        means.push((
            model.clone(),
            object([
                ("dsc", crate::report::optional_number(overall.mean_dsc)),
                ("hss", crate::report::optional_number(overall.mean_hss)),
            ]),
        ));
    }
    let statistics =
        object([("means", object(means)), ("pearson_smv", object(pearson_smv)), ("wilcoxon_dsc", object(wilcoxon))]);
    bundle.files.insert("statistics.json".into(), to_stable_json(&statistics).map_err(json)?);
    Ok(bundle)
}
