//! `muscle-eval` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
//! invalid case data (some cases failed), 4 every case failed, 1 for
//! output I/O errors.

pub mod config;
pub mod evaluate;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::{binarize, biomarkers, ensemble_mean, DEFAULT_THRESHOLD};
use crate::curation::{
    build_cohort, classify_body_location, classify_sequence, construct_test_splits, parse_cohort_csv,
    parse_cohort_json, write_cohort_csv, SeriesMetadata, SplitConfig,
};
use crate::metrics::{records_from_csv, subgroup_summary, SubgroupKey};
use crate::nifti::{read_nifti_any, write_nifti};
use crate::phantom::{
    cohort_case_config, generate_phantom, model_seed, reference_segment, simulate_probability_map, ContrastProfile,
    PhantomConfig,
};
use crate::preprocess::{to_model_space_sized, SliceAxis, MODEL_SIZE};
use crate::report::{object, to_stable_json};
use crate::volume::{BinaryMask, ProbabilityVolume, ScalarVolume, VolumeGeometry};

pub use config::{Overrides, RunConfig};
pub use evaluate::{run_evaluate, ReportBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{} of {total} cases failed", failures.len())]
    CaseFailures { failures: Vec<(String, String)>, total: usize },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Input(_) => 3,
            Self::CaseFailures { failures, total } if failures.len() == *total => 4,
            Self::CaseFailures { .. } => 3,
            Self::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "muscle-eval", version, about = "Evaluate MRI muscle segmentations", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify a series description and/or protocol description.
    Classify(ClassifyArgs),
    /// Build the cohort frequency table and exclusion list.
    Cohort(CohortArgs),
    /// Construct Test-A / Test-B split plans.
    Split(SplitArgs),
    /// Convert a volume into model-space slices.
    Preprocess(PreprocessArgs),
    /// Run a configured evaluation and write the reports.
    Evaluate(EvaluateArgs),
    /// Average probability maps voxelwise.
    Ensemble(EnsembleArgs),
    /// Skeletal muscle volume and index of a mask or probability map.
    Quantify(QuantifyArgs),
    /// Synthetic phantom cohorts.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Subgroup summaries from a per-case CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
#[command(arg_required_else_help = true)]
struct ClassifyArgs {
    #[arg(long)]
    series_description: Option<String>,
    #[arg(long)]
    protocol_description: Option<String>,
}

#[derive(Debug, Args)]
struct CohortArgs {
    /// Cohort CSV or JSON.
    #[arg(long)]
    input: PathBuf,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Split configuration JSON (quota, dedupe, manual lists).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    test_a_per_location: Option<usize>,
    #[arg(long)]
    dedupe_test_b: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output NIFTI holding the model-space stack (size × size × slices).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "third")]
    axis: SliceAxis,
    #[arg(long, default_value_t = MODEL_SIZE)]
    size: usize,
    /// Store rounded uint8 intensities instead of float32.
    #[arg(long)]
    quantize_u8: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 2.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Also write the binarised mask here.
    #[arg(long)]
    mask_output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct QuantifyArgs {
    /// Binary mask or probability map.
    #[arg(long)]
    input: PathBuf,
    /// Binarise a probability map at this threshold first.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    height_m: Option<f64>,
    /// Divide by height squared instead of height.
    #[arg(long)]
    height_squared: bool,
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// Write phantom cases, a cohort CSV and a ready-to-run config.
    Generate(PhantomArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    count: u64,
    #[arg(long)]
    out: PathBuf,
    /// Edge length of the cubic grid.
    #[arg(long, default_value_t = 48)]
    dims: usize,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value = "t1-like")]
    profile: ContrastProfile,
    /// Box-blur passes for the simulated model maps.
    #[arg(long, default_value_t = 1)]
    blur: usize,
    /// Noise of the simulated model maps.
    #[arg(long, default_value_t = 0.15)]
    model_sigma: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A `cases.csv` written by `evaluate`.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "location,sequence,sex,age-bin,race")]
    keys: Vec<SubgroupKey>,
}

pub(crate) fn read_volume(path: &Path) -> Result<ScalarVolume, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    read_nifti_any(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

pub(crate) fn load_cohort_rows(path: &Path) -> Result<Vec<SeriesMetadata>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read cohort {}: {e}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_cohort_json(&text)
    } else {
        parse_cohort_csv(&text)
    };
    parsed.map_err(|e| format!("{}: {e}", path.display()))
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn json_error(e: serde_json::Error) -> CliError {
    CliError::Io(format!("serialising output: {e}"))
}

fn nifti_error(e: crate::nifti::NiftiError) -> CliError {
    CliError::Input(e.to_string())
}

fn classify(args: ClassifyArgs) -> Result<(), CliError> {
    let sequence = args.series_description.as_deref().map(|d| {
        let label = classify_sequence(d);
        let mut v = serde_json::to_value(&label).expect("label serialises");
        v["name"] = Value::from(label.name());
        v
    });
    let location = args
        .protocol_description
        .as_deref()
        .map(|d| serde_json::to_value(classify_body_location(d)).expect("location serialises"));
    let out = match (sequence, location) {
        (Some(s), None) => s,
        (None, Some(l)) => l,
        (Some(s), Some(l)) => object([("location", l), ("sequence", s)]),
        (None, None) => return Err(CliError::Usage("give --series-description and/or --protocol-description".into())),
    };
    emit(None, &to_stable_json(&out).map_err(json_error)?)
}

fn cohort(args: CohortArgs) -> Result<(), CliError> {
    let rows = load_cohort_rows(&args.input).map_err(CliError::Config)?;
    let table = build_cohort(rows).map_err(|e| CliError::Input(e.to_string()))?;
    emit(args.output.as_deref(), &to_stable_json(&table.summary()).map_err(json_error)?)
}

fn split(args: SplitArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SplitConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SplitConfig::default(),
    };
    if let Some(n) = args.test_a_per_location {
        config.test_a_per_location = n;
    }
    config.dedupe_test_b |= args.dedupe_test_b;
    let rows = load_cohort_rows(&args.input).map_err(CliError::Config)?;
    let table = build_cohort(rows).map_err(|e| CliError::Input(e.to_string()))?;
    let plan = construct_test_splits(&table, &config).map_err(|e| CliError::Input(e.to_string()))?;
    emit(args.output.as_deref(), &to_stable_json(&plan).map_err(json_error)?)
}

fn preprocess(args: PreprocessArgs) -> Result<(), CliError> {
    let volume = read_volume(&args.input).map_err(CliError::Input)?;
    let id = args.input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let slices =
        to_model_space_sized(&volume, args.axis, &id, args.size).map_err(|e| CliError::Usage(e.to_string()))?;
    let depth = slices.len();
    // Model-space pixels have no physical size; unit spacing is recorded.
    let geometry = VolumeGeometry::from_spacing([args.size, args.size, depth], [1.0; 3])
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut voxels = Vec::with_capacity(args.size * args.size * depth);
    for s in &slices {
        voxels.extend_from_slice(s.values());
    }
    let dtype = if args.quantize_u8 {
        voxels.iter_mut().for_each(|v| *v = v.round());
        2
    } else {
        16
    };
    let stack = ScalarVolume::new(geometry, voxels).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&args.output, &write_nifti(&stack, dtype).map_err(nifti_error)?)
}

fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let overrides = Overrides { output_dir: args.out_dir, jobs: args.jobs, threshold: args.threshold, seed: args.seed };
    let config = RunConfig::load(&args.config, &overrides, |k| std::env::var(k).ok())?;
    let bundle = run_evaluate(&config)?;
    bundle.write_to(&config.output_dir)?;
    eprintln!("wrote {} report files to {}", bundle.files.len(), config.output_dir.display());
    Ok(())
}

fn load_probability(path: &Path) -> Result<ProbabilityVolume, CliError> {
    let v = read_volume(path).map_err(CliError::Input)?;
    ProbabilityVolume::from_scalar(v).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn ensemble(args: EnsembleArgs) -> Result<(), CliError> {
    let maps = args.inputs.iter().map(|p| load_probability(p)).collect::<Result<Vec<_>, _>>()?;
    let mean = ensemble_mean(&maps).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&args.output, &write_nifti(&mean, 16).map_err(nifti_error)?)?;
    if let Some(mask_path) = &args.mask_output {
        let mask = binarize(&mean, args.threshold).map_err(|e| CliError::Usage(e.to_string()))?;
        write_file(mask_path, &write_nifti(&mask, 2).map_err(nifti_error)?)?;
    }
    Ok(())
}

fn quantify(args: QuantifyArgs) -> Result<(), CliError> {
    let volume = read_volume(&args.input).map_err(CliError::Input)?;
    let mask = match args.threshold {
        Some(t) => {
            let map = ProbabilityVolume::from_scalar(volume).map_err(|e| CliError::Input(e.to_string()))?;
            binarize(&map, t).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => BinaryMask::from_scalar(&volume).map_err(|e| CliError::Input(e.to_string()))?,
    };
    let result = biomarkers(&mask, args.height_m, args.height_squared).map_err(|e| CliError::Usage(e.to_string()))?;
    emit(None, &to_stable_json(&result).map_err(json_error)?)
}

/// Writes `count` phantom cases under `out/cases/<series_id>/`, the cohort
/// CSV and an evaluation config referencing them.
pub fn phantom_generate_to(
    out: &Path,
    seed: u64,
    count: u64,
    base: &PhantomConfig,
    blur: usize,
    model_sigma: f64,
) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for case_seed in seed..seed + count {
        let config = cohort_case_config(base, case_seed);
        let phantom = generate_phantom(&config).map_err(|e| CliError::Usage(e.to_string()))?;
        let dir = out.join("cases").join(&phantom.metadata.series_id);
        write_file(&dir.join("image.nii"), &write_nifti(&phantom.image, 16).map_err(nifti_error)?)?;
        write_file(&dir.join("mask.nii"), &write_nifti(&phantom.mask, 2).map_err(nifti_error)?)?;
        for (k, name) in ["model_a", "model_b"].iter().enumerate() {
            let map = simulate_probability_map(&phantom.mask, blur, model_sigma, model_seed(case_seed, k as u64));
            write_file(&dir.join(format!("{name}.nii")), &write_nifti(&map, 16).map_err(nifti_error)?)?;
        }
        let reference = reference_segment(&phantom.image, config.contrast_profile);
        write_file(&dir.join("reference.nii"), &write_nifti(&reference, 16).map_err(nifti_error)?)?;
        rows.push(phantom.metadata);
    }
    let csv = write_cohort_csv(&rows).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&out.join("cohort.csv"), csv.as_bytes())?;
    let config = object([
        ("cohort", Value::from("cohort.csv")),
        ("image", Value::from("cases/{case_id}/image.nii")),
        ("mask", Value::from("cases/{case_id}/mask.nii")),
        (
            "predictions",
            object([
                ("model_a", Value::from("cases/{case_id}/model_a.nii")),
                ("model_b", Value::from("cases/{case_id}/model_b.nii")),
                ("reference", Value::from("cases/{case_id}/reference.nii")),
            ]),
        ),
        ("ensemble", Value::from(vec!["model_a", "model_b"])),
        ("threshold", crate::report::number(DEFAULT_THRESHOLD)),
        ("output_dir", Value::from("report")),
        ("seed", Value::from(seed)),
    ]);
    write_file(&out.join("config.json"), to_stable_json(&config).map_err(json_error)?.as_bytes())
}

fn phantom(command: PhantomCommand) -> Result<(), CliError> {
    let PhantomCommand::Generate(args) = command;
    let base = PhantomConfig {
        dims: [args.dims; 3],
        noise_sigma: args.noise_sigma,
        contrast_profile: args.profile,
        ..PhantomConfig::default()
    };
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    phantom_generate_to(&args.out, args.seed, args.count, &base, args.blur, args.model_sigma)
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let text =
        std::fs::read_to_string(&args.cases).map_err(|e| CliError::Config(format!("{}: {e}", args.cases.display())))?;
    let records = records_from_csv(&text).map_err(|e| CliError::Input(e.to_string()))?;
    let mut groups = Vec::new();
    for key in &args.keys {
        let summary = subgroup_summary(&records, *key).map_err(|e| CliError::Input(e.to_string()))?;
        groups.push((key.as_str().to_string(), serde_json::to_value(summary).map_err(json_error)?));
    }
    emit(None, &to_stable_json(&object(groups)).map_err(json_error)?)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Classify(a) => classify(a),
        Command::Cohort(a) => cohort(a),
        Command::Split(a) => split(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Quantify(a) => quantify(a),
        Command::Phantom(c) => phantom(c),
        Command::Report(a) => report(a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            if let CliError::CaseFailures { failures, .. } = &err {
                for (case, why) in failures {
                    eprintln!("case {case}: {why}");
                }
            }
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
