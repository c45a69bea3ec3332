//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails. Runs with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use muscle_eval::analysis::{
    self, compute_smi, compute_smv, ensemble_mean, pearson, wilcoxon_signed_rank, wilcoxon_signed_rank_with,
    Alternative, Method, TestMethod,
};
use muscle_eval::cli::config::{Overrides, RunConfig};
use muscle_eval::cli::evaluate::run_evaluate;
use muscle_eval::cli::phantom_generate_to;
use muscle_eval::curation::{
    build_cohort, classify_sequence, construct_test_splits, parse_cohort_csv, rank_sequences, LocationCategory,
    SplitConfig, View,
};
use muscle_eval::metrics::{compute_metrics, confusion_counts, evaluate_case, harmonic_mean, ConfusionCounts};
use muscle_eval::nifti::{read_nifti, write_nifti};
use muscle_eval::phantom::{cohort_case_config, generate_phantom, model_seed, simulate_probability_map, PhantomConfig};
use muscle_eval::preprocess::{
    extract_slices, from_model_space, minmax_normalize, resize, ResizeMode, Slice2D, SliceAxis, SliceProvenance,
    MODEL_SIZE,
};
use muscle_eval::rng::CounterRng;
use muscle_eval::{BinaryMask, ScalarVolume, VolumeGeometry};

use common::{brute_score, enumerate_wilcoxon_greater, fixture, random_mask_pair, random_volume};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn opt_close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b, tol),
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracle() -> Check {
    let rng = CounterRng::new(2024, 11);
    for k in 0..200 {
        let (pred, gt) = random_mask_pair(&rng, k);
        let c = confusion_counts(&pred, &gt).map_err(|e| e.to_string())?;
        let o = brute_score(pred.labels(), gt.labels());
        ensure((c.tp, c.fp, c.fn_, c.tn) == (o.tp, o.fp, o.fn_, o.tn), || format!("pair {k}: counts {c:?} vs {o:?}"))?;
        let m = compute_metrics(c);
        ensure(
            close(m.dsc, o.dsc, 1e-12)
                && opt_close(m.sensitivity, o.se, 1e-12)
                && opt_close(m.specificity, o.sp, 1e-12)
                && opt_close(m.hss, o.hss, 1e-12),
            || format!("pair {k}: metrics {m:?} vs {o:?}"),
        )?;
    }
    Ok(())
}

fn formula_spot_checks() -> Check {
    let m = compute_metrics(ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 10 });
    ensure(close(m.dsc, 0.666_667, 1e-6) && close(m.dsc, 2.0 / 3.0, 1e-9), || format!("dsc {}", m.dsc))?;
    let h = harmonic_mean(0.8, 1.0);
    ensure(close(h, 0.888_889, 1e-6) && close(h, 16.0 / 18.0, 1e-9), || format!("hss {h}"))
}

fn nifti_roundtrip() -> Check {
    let rng = CounterRng::new(7, 3);
    for k in 0..50u64 {
        let dtype = [2i16, 4, 16][(k % 3) as usize];
        let v = random_volume(&rng, k, dtype);
        let bytes = write_nifti(&v, dtype).map_err(|e| e.to_string())?;
        let back = read_nifti(&bytes).map_err(|e| e.to_string())?;
        ensure(back.geometry().dims() == v.geometry().dims(), || format!("volume {k}: dims differ"))?;
        let exact = back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(exact, || format!("volume {k} (dtype {dtype}): voxels differ"))?;
        let spacing_ok =
            back.geometry().spacing().iter().zip(v.geometry().spacing()).all(|(a, b)| close(*a, b, 1e-5 * b));
        ensure(spacing_ok, || format!("volume {k}: spacing differs"))?;
    }
    let read = |name: &str| -> Result<ScalarVolume, String> {
        let bytes = std::fs::read(fixture(name)).map_err(|e| e.to_string())?;
        read_nifti(&bytes).map_err(|e| format!("{name}: {e}"))
    };
    let (be, le) = (read("be_int16.nii")?, read("le_int16.nii")?);
    ensure(be == le, || "big-endian fixture decodes differently from its twin".into())?;
    // Stored values are (i*37)%200-60 with slope 2, intercept 1.
    let expected: Vec<f32> = (0..24).map(|i| ((i * 37) % 200 - 60) as f32 * 2.0 + 1.0).collect();
    ensure(le.voxels() == expected.as_slice(), || format!("fixture voxels {:?}", le.voxels()))?;
    ensure(le.geometry().dims() == [4, 3, 2], || "fixture dims".into())
}

fn slice(h: usize, w: usize, values: Vec<f32>) -> Slice2D {
    let provenance = SliceProvenance { volume_id: "t".into(), axis: SliceAxis::Third, index: 0 };
    Slice2D::new(h, w, values, provenance).unwrap()
}

fn dice(a: &[u8], b: &[u8]) -> f64 {
    let o = brute_score(a, b);
    o.dsc
}

fn preprocessing_contracts() -> Check {
    let rng = CounterRng::new(99, 1);
    for k in 0..20u64 {
        let values: Vec<f32> = (0..48).map(|i| rng.index_at(k * 100 + i, 1000) as f32).collect();
        let s = slice(6, 8, values.clone());
        let base = minmax_normalize(&s);
        for (a, b) in [(2.0f32, 0.0f32), (4.0, -512.0), (0.5, 17.0), (1.0, 1024.0)] {
            let mapped = slice(6, 8, values.iter().map(|v| a * v + b).collect());
            ensure(minmax_normalize(&mapped).values() == base.values(), || format!("slice {k}: not affine invariant"))?;
        }
        let same = resize(&s, 6, 8, ResizeMode::Bilinear).map_err(|e| e.to_string())?;
        let bits = |x: &Slice2D| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&same) == bits(&s), || "equal-size resize changed values".into())?;
    }
    let up =
        resize(&slice(2, 2, vec![0.0, 10.0, 20.0, 30.0]), 4, 4, ResizeMode::Bilinear).map_err(|e| e.to_string())?;
    ensure(close(up.get(1, 2) as f64, 12.5, 1e-9), || format!("bilinear (1,2) = {}", up.get(1, 2)))?;

    let mut worst = f64::INFINITY;
    for seed in 0..3 {
        let config = PhantomConfig { dims: [128, 128, 16], seed, ..PhantomConfig::default() };
        let p = generate_phantom(&config).map_err(|e| e.to_string())?;
        let mask = p.mask.to_scalar();
        let model: Vec<Slice2D> = extract_slices(&mask, SliceAxis::Third, "mask")
            .iter()
            .map(|s| resize(s, MODEL_SIZE, MODEL_SIZE, ResizeMode::Bilinear))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let back = from_model_space(&model, mask.geometry(), SliceAxis::Third).map_err(|e| e.to_string())?;
        let back = analysis::binarize(&back, 0.5).map_err(|e| e.to_string())?;
        worst = worst.min(dice(back.labels(), p.mask.labels()));
    }
    println!("    worst model-space roundtrip Dice {worst:.4}");
    ensure(worst >= 0.95, || format!("model-space roundtrip Dice {worst:.4}"))
}

fn wilcoxon_exactness() -> Check {
    let rng = CounterRng::new(5, 5);
    let mut c = 0u64;
    let mut next = || {
        c += 1;
        c
    };
    for k in 0..100 {
        let n = 1 + k % 10;
        // Coarse values so ties and zeros occur.
        let diffs: Vec<f64> = (0..n).map(|_| rng.index_at(next(), 13) as f64 - 6.0).collect();
        if diffs.iter().all(|&d| d == 0.0) {
            continue;
        }
        let t = wilcoxon_signed_rank(&diffs, Alternative::Greater).map_err(|e| e.to_string())?;
        let oracle = enumerate_wilcoxon_greater(&diffs);
        ensure(t.method == TestMethod::Exact && close(t.p_value, oracle, 1e-12), || {
            format!("{diffs:?}: p {} vs enumeration {oracle}", t.p_value)
        })?;
    }
    let t = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], Alternative::Greater).map_err(|e| e.to_string())?;
    ensure(close(t.p_value, 0.03125, 1e-15), || format!("all-positive n=5: p {}", t.p_value))?;

    let mut worst = 0.0f64;
    for m in 15..=20usize {
        for k in 0..20 {
            let diffs: Vec<f64> = (0..m).map(|_| rng.normal_at(next()) + 0.1 * k as f64).collect();
            let exact =
                wilcoxon_signed_rank_with(&diffs, Alternative::Greater, Method::Exact).map_err(|e| e.to_string())?;
            let normal =
                wilcoxon_signed_rank_with(&diffs, Alternative::Greater, Method::Normal).map_err(|e| e.to_string())?;
            worst = worst.max((exact.p_value - normal.p_value).abs());
        }
    }
    println!("    max |exact - normal| for m in 15..=20: {worst:.5}");
    ensure(worst <= 0.01, || format!("exact vs normal differ by {worst:.4}"))
}

/// Per-case outcome of the simulated two-model cohort.
struct CohortCase {
    dsc: [f64; 3],
    smv_pred: [f64; 3],
    smv_gt: f64,
}

fn phantom_cohort() -> &'static Result<Vec<CohortCase>, String> {
    static CELL: OnceLock<Result<Vec<CohortCase>, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = PhantomConfig::default();
        (0..50u64)
            .map(|seed| {
                let p = generate_phantom(&cohort_case_config(&base, seed)).map_err(|e| e.to_string())?;
                let a = simulate_probability_map(&p.mask, 1, 0.15, model_seed(seed, 0));
                let b = simulate_probability_map(&p.mask, 1, 0.15, model_seed(seed, 1));
                let e = ensemble_mean(&[a.clone(), b.clone()]).map_err(|e| e.to_string())?;
                let mut dsc = [0.0; 3];
                let mut smv_pred = [0.0; 3];
                for (i, map) in [&a, &b, &e].into_iter().enumerate() {
                    let s = evaluate_case(map, &p.mask, 0.5).map_err(|e| e.to_string())?;
                    dsc[i] = s.metrics.dsc;
                    smv_pred[i] = s.smv.ml();
                }
                Ok(CohortCase { dsc, smv_pred, smv_gt: compute_smv(&p.mask).ml() })
            })
            .collect()
    })
}

fn ensemble_improvement() -> Check {
    let cases = phantom_cohort().as_ref().map_err(Clone::clone)?;
    let mean = |i: usize| cases.iter().map(|c| c.dsc[i]).sum::<f64>() / cases.len() as f64;
    let (ma, mb, me) = (mean(0), mean(1), mean(2));
    ensure(me >= ma && me >= mb, || format!("mean DSC ensemble {me:.4} vs inputs {ma:.4}, {mb:.4}"))?;
    for i in 0..2 {
        let diffs: Vec<f64> = cases.iter().map(|c| c.dsc[2] - c.dsc[i]).collect();
        let t = wilcoxon_signed_rank(&diffs, Alternative::Greater).map_err(|e| e.to_string())?;
        ensure(t.p_value < 0.05, || format!("ensemble vs input {i}: p {}", t.p_value))?;
    }
    println!("    mean DSC a={ma:.4} b={mb:.4} ensemble={me:.4}");
    Ok(())
}

fn smv_smi_correctness() -> Check {
    let g = VolumeGeometry::from_spacing([10, 10, 2], [1.0, 1.0, 5.0]).map_err(|e| e.to_string())?;
    let labels: Vec<u8> = (0..200).map(|i| (i < 100) as u8).collect();
    let m = BinaryMask::new(g.clone(), labels.clone()).map_err(|e| e.to_string())?;
    let smv = compute_smv(&m);
    ensure(smv.ml() == 0.5, || format!("100 voxels at 5 mm³: {} mL", smv.ml()))?;

    let rng = CounterRng::new(3, 3);
    for k in 0..20u64 {
        let owner: Vec<u8> = (0..200).map(|i| rng.index_at(k * 1000 + i, 3) as u8).collect();
        let part = |which: u8| BinaryMask::new(g.clone(), owner.iter().map(|&o| (o == which) as u8).collect()).unwrap();
        let union = BinaryMask::new(g.clone(), owner.iter().map(|&o| (o != 0) as u8).collect()).unwrap();
        let sum = compute_smv(&part(1)).try_add(compute_smv(&part(2))).map_err(|e| e.to_string())?;
        ensure(sum == compute_smv(&union) && sum.ml() == compute_smv(&union).ml(), || "SMV not additive".into())?;
    }

    let config = PhantomConfig { n_muscle_lobes: 1, ..PhantomConfig::default() };
    let p = generate_phantom(&config).map_err(|e| e.to_string())?;
    let analytic = p.lobes[0].volume_mm3() / 1000.0;
    let measured = compute_smv(&p.mask).ml();
    let rel = (measured - analytic).abs() / analytic;
    ensure(rel <= 0.03, || format!("ellipsoid SMV {measured:.4} mL vs analytic {analytic:.4} mL ({rel:.4})"))?;

    for (smv, h) in [(0.5, 1.7), (1234.5, 1.52), (88.0, 2.01)] {
        let smi = compute_smi(smv, h).map_err(|e| e.to_string())?;
        ensure(close(smi, smv / h, 1e-9), || format!("SMI {smi} for {smv}/{h}"))?;
    }
    Ok(())
}

fn pearson_analog() -> Check {
    let cases = phantom_cohort().as_ref().map_err(Clone::clone)?;
    let gt: Vec<f64> = cases.iter().map(|c| c.smv_gt).collect();
    for i in 0..3 {
        let pred: Vec<f64> = cases.iter().map(|c| c.smv_pred[i]).collect();
        let r = pearson(&pred, &gt).map_err(|e| e.to_string())?;
        ensure(r.r >= 0.99, || format!("map {i}: r = {:.5}", r.r))?;
    }
    let xs: Vec<f64> = (0..30).map(|i| i as f64 * 1.5 + 2.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 7.0).collect();
    let r = pearson(&xs, &ys).map_err(|e| e.to_string())?;
    ensure(r.r == 1.0 && r.p_two_sided == 0.0, || format!("linear input: r = {}, p = {}", r.r, r.p_two_sided))
}

fn curation_fixtures() -> Check {
    let text = std::fs::read_to_string(fixture("sequence_descriptions.csv")).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut n = 0;
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let label = classify_sequence(&row[0]);
        let got = [
            label.base.as_str().to_string(),
            label.phase.as_str().to_string(),
            label.fat_sat.to_string(),
            label.contrast.to_string(),
            label.exclusion_reason.clone().unwrap_or_default(),
            label.name(),
        ];
        let want: Vec<&str> = (1..7).map(|i| &row[i]).collect();
        ensure(got.iter().map(String::as_str).eq(want.iter().copied()), || {
            format!("'{}': got {got:?}, want {want:?}", &row[0])
        })?;
        ensure(label.excluded == !row[5].is_empty(), || format!("'{}': excluded flag", &row[0]))?;
        n += 1;
    }
    ensure(n == 25, || format!("{n} fixture rows"))?;

    let text = std::fs::read_to_string(fixture("split_cohort.csv")).map_err(|e| e.to_string())?;
    let cohort = build_cohort(parse_cohort_csv(&text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let plan = construct_test_splits(&cohort, &SplitConfig::default()).map_err(|e| e.to_string())?;

    let abdomen_a: Vec<(String, View)> = plan
        .test_a
        .iter()
        .filter(|e| e.location == LocationCategory::Abdomen)
        .map(|e| (e.sequence.clone(), e.view))
        .collect();
    let want_a = vec![
        ("dixon-t1 water".to_string(), View::Axial),
        ("dixon-t1 water".to_string(), View::Axial),
        ("se-group".to_string(), View::Coronal),
        ("se-group".to_string(), View::Coronal),
    ];
    ensure(abdomen_a == want_a, || format!("abdomen Test A {abdomen_a:?}"))?;

    let mut by_location: BTreeMap<LocationCategory, Vec<String>> = BTreeMap::new();
    for e in &plan.test_b {
        by_location.entry(e.location).or_default().push(e.sequence.clone());
    }
    let want_b: BTreeMap<LocationCategory, Vec<&str>> = [
        (LocationCategory::Abdomen, vec!["se-group", "vibe-group+c", "se-group+c"]),
        (LocationCategory::Hip, vec!["stir", "t2 fs", "vibe-group"]),
        (LocationCategory::Shoulder, vec!["pd fs", "t1 fs", "t2 fs"]),
        (LocationCategory::Thigh, vec!["dixon-t1 in-phase", "stir"]),
        (LocationCategory::Knee, vec!["pd", "pd fs", "t2 fs"]),
        (LocationCategory::LumbarSpine, vec!["t2", "stir"]),
        (LocationCategory::Misc, vec!["t1+c", "t2 fs", "pd fs"]),
    ]
    .into_iter()
    .collect();
    let got_b: BTreeMap<LocationCategory, Vec<&str>> =
        by_location.iter().map(|(l, v)| (*l, v.iter().map(String::as_str).collect())).collect();
    ensure(got_b == want_b, || format!("Test B {got_b:?}"))?;

    // The expectations above must also be what ranking says.
    for (location, sequences) in &want_b {
        let rows = cohort.rows().iter().filter(|r| r.location == *location);
        let ranked: Vec<String> = rank_sequences(rows).into_iter().skip(1).take(3).map(|(s, _)| s).collect();
        ensure(ranked == *sequences, || format!("{location}: ranks 2-4 are {ranked:?}"))?;
    }
    Ok(())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = PhantomConfig { dims: [32, 32, 32], noise_sigma: 0.02, ..PhantomConfig::default() };
    phantom_generate_to(dir.path(), 0, 6, &base, 1, 0.15).map_err(|e| e.to_string())?;
    let config_path = dir.path().join("config.json");
    let run = |jobs: usize| -> Result<_, String> {
        let overrides = Overrides { jobs: Some(jobs), seed: Some(17), ..Overrides::default() };
        let config = RunConfig::load(&config_path, &overrides, |_| None).map_err(|e| e.to_string())?;
        run_evaluate(&config).map_err(|e| e.to_string())
    };
    let first = run(1)?;
    let again = run(1)?;
    let parallel = run(4)?;
    ensure(first == again, || "repeat run differs".into())?;
    ensure(first == parallel, || "--jobs 4 differs from --jobs 1".into())?;
    ensure(first.files.contains_key("cases.csv") && first.files.contains_key("statistics.json"), || {
        format!("missing report files: {:?}", first.files.keys().collect::<Vec<_>>())
    })
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("metric oracle equivalence", metric_oracle, Some(Duration::from_secs(5))),
        ("formula spot checks", formula_spot_checks, None),
        ("NIFTI roundtrip", nifti_roundtrip, None),
        ("preprocessing contracts", preprocessing_contracts, None),
        ("Wilcoxon exactness", wilcoxon_exactness, Some(Duration::from_secs(30))),
        ("ensemble improvement", ensemble_improvement, Some(Duration::from_secs(60))),
        ("SMV/SMI correctness", smv_smi_correctness, None),
        ("Pearson analog", pearson_analog, None),
        ("curation fixtures", curation_fixtures, None),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(()), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(()) => println!("PASS {:>2} {name} ({elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({elapsed:.2?}): {why}", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
