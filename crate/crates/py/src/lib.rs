//! Python bindings. Volumes cross the boundary as flat lists in x-fastest
//! order together with their dims and spacing; everything else is plain
//! dicts, tuples and floats.

use pyo3::pymodule;

#[pymodule]
mod muscle_eval_py {
    use pyo3::exceptions::PyValueError;
    use pyo3::prelude::*;
    use pyo3::types::PyDict;

    use muscle_eval::analysis::{self, Alternative};
    use muscle_eval::curation::{self, BodyLocation};
    use muscle_eval::metrics::{self, ConfusionCounts};
    use muscle_eval::phantom::{self, ContrastProfile, PhantomConfig};
    use muscle_eval::{BinaryMask, ProbabilityVolume, ScalarVolume, VolumeGeometry};

    fn value_error(e: impl std::fmt::Display) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    /// An intensity volume: `dims`, `spacing` (mm) and flat `voxels`.
    #[pyclass(name = "Volume", module = "muscle_eval_py", skip_from_py_object)]
    #[derive(Clone)]
    pub struct PyVolume {
        inner: ScalarVolume,
    }

    #[pymethods]
    impl PyVolume {
        #[new]
        fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> PyResult<Self> {
            let geometry = VolumeGeometry::from_spacing(dims, spacing).map_err(value_error)?;
            Ok(Self { inner: ScalarVolume::new(geometry, voxels).map_err(value_error)? })
        }

        /// Reads a `.nii` or `.nii.gz` file.
        #[staticmethod]
        fn read(path: &str) -> PyResult<Self> {
            let bytes = std::fs::read(path).map_err(value_error)?;
            Ok(Self { inner: muscle_eval::nifti::read_nifti_any(&bytes).map_err(value_error)? })
        }

        /// Writes a `.nii` file with datatype code 2, 4 or 16.
        #[pyo3(signature = (path, dtype = 16))]
        fn write(&self, path: &str, dtype: i16) -> PyResult<()> {
            let bytes = muscle_eval::write_nifti(&self.inner, dtype).map_err(value_error)?;
            std::fs::write(path, bytes).map_err(value_error)
        }

        #[getter]
        fn dims(&self) -> [usize; 3] {
            self.inner.geometry().dims()
        }

        #[getter]
        fn spacing(&self) -> [f64; 3] {
            self.inner.geometry().spacing()
        }

        #[getter]
        fn voxels(&self) -> Vec<f32> {
            self.inner.voxels().to_vec()
        }

        fn __len__(&self) -> usize {
            self.inner.voxels().len()
        }

        fn __repr__(&self) -> String {
            let [x, y, z] = self.dims();
            format!("Volume(dims=({x}, {y}, {z}), spacing={:?})", self.spacing())
        }
    }

    fn mask_of(v: &PyVolume) -> PyResult<BinaryMask> {
        BinaryMask::from_scalar(&v.inner).map_err(value_error)
    }

    fn probability_of(v: &PyVolume) -> PyResult<ProbabilityVolume> {
        ProbabilityVolume::from_scalar(v.inner.clone()).map_err(value_error)
    }

    #[pyfunction]
    fn classify_sequence<'py>(py: Python<'py>, series_description: &str) -> PyResult<Bound<'py, PyDict>> {
        let label = curation::classify_sequence(series_description);
        let d = PyDict::new(py);
        d.set_item("name", label.name())?;
        d.set_item("base", label.base.as_str())?;
        d.set_item("fat_sat", label.fat_sat)?;
        d.set_item("phase", label.phase.as_str())?;
        d.set_item("contrast", label.contrast)?;
        d.set_item("excluded", label.excluded)?;
        d.set_item("exclusion_reason", label.exclusion_reason)?;
        Ok(d)
    }

    /// Returns `(category, None)` or `(None, exclusion_reason)`.
    #[pyfunction]
    fn classify_body_location(protocol_description: &str) -> (Option<&'static str>, Option<&'static str>) {
        match curation::classify_body_location(protocol_description) {
            BodyLocation::Category(c) => (Some(c.as_str()), None),
            BodyLocation::Excluded(e) => (None, Some(e.as_str())),
        }
    }

    fn metrics_dict<'py>(py: Python<'py>, c: ConfusionCounts) -> PyResult<Bound<'py, PyDict>> {
        let m = metrics::compute_metrics(c);
        let d = PyDict::new(py);
        d.set_item("tp", c.tp)?;
        d.set_item("fp", c.fp)?;
        d.set_item("fn", c.fn_)?;
        d.set_item("tn", c.tn)?;
        d.set_item("dsc", m.dsc)?;
        d.set_item("sensitivity", m.sensitivity)?;
        d.set_item("specificity", m.specificity)?;
        d.set_item("hss", m.hss)?;
        d.set_item("gt_empty", m.gt_empty)?;
        d.set_item("pred_empty", m.pred_empty)?;
        Ok(d)
    }

    #[pyfunction]
    #[pyo3(name = "compute_metrics")]
    fn compute_metrics_py<'py>(py: Python<'py>, tp: u64, fp: u64, r#fn: u64, tn: u64) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, ConfusionCounts { tp, fp, fn_: r#fn, tn })
    }

    /// Counts and metrics of a binary prediction against a binary mask.
    #[pyfunction]
    fn score_masks<'py>(py: Python<'py>, pred: &PyVolume, gt: &PyVolume) -> PyResult<Bound<'py, PyDict>> {
        let counts = metrics::confusion_counts(&mask_of(pred)?, &mask_of(gt)?).map_err(value_error)?;
        metrics_dict(py, counts)
    }

    /// Binarises a probability map and scores it; adds `smv_ml`.
    #[pyfunction]
    #[pyo3(signature = (pred, gt, threshold = 0.5))]
    fn evaluate_case<'py>(
        py: Python<'py>,
        pred: &PyVolume,
        gt: &PyVolume,
        threshold: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let score = metrics::evaluate_case(&probability_of(pred)?, &mask_of(gt)?, threshold).map_err(value_error)?;
        let d = metrics_dict(py, score.counts)?;
        d.set_item("smv_ml", score.smv.ml())?;
        Ok(d)
    }

    #[pyfunction]
    fn ensemble_mean(maps: Vec<PyRef<'_, PyVolume>>) -> PyResult<PyVolume> {
        let maps = maps.iter().map(|m| probability_of(m)).collect::<PyResult<Vec<_>>>()?;
        let mean = analysis::ensemble_mean(&maps).map_err(value_error)?;
        let inner = ScalarVolume::new(mean.geometry().clone(), mean.probabilities().to_vec()).map_err(value_error)?;
        Ok(PyVolume { inner })
    }

    #[pyfunction]
    fn compute_smv(mask: &PyVolume) -> PyResult<f64> {
        Ok(analysis::compute_smv(&mask_of(mask)?).ml())
    }

    #[pyfunction]
    fn compute_smi(smv_ml: f64, height_m: f64) -> PyResult<f64> {
        analysis::compute_smi(smv_ml, height_m).map_err(value_error)
    }

    /// Returns `(r, p_two_sided)`.
    #[pyfunction]
    fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
        let r = analysis::pearson(&xs, &ys).map_err(value_error)?;
        Ok((r.r, r.p_two_sided))
    }

    #[pyfunction]
    #[pyo3(signature = (diffs, alternative = "greater"))]
    fn wilcoxon_signed_rank<'py>(py: Python<'py>, diffs: Vec<f64>, alternative: &str) -> PyResult<Bound<'py, PyDict>> {
        let alternative: Alternative = alternative.parse().map_err(PyValueError::new_err)?;
        let t = analysis::wilcoxon_signed_rank(&diffs, alternative).map_err(value_error)?;
        let d = PyDict::new(py);
        d.set_item("statistic", t.statistic)?;
        d.set_item("p_value", t.p_value)?;
        d.set_item(
            "method",
            match t.method {
                analysis::TestMethod::Exact => "exact",
                analysis::TestMethod::NormalApproximation => "normal-approximation",
            },
        )?;
        d.set_item("n_effective", t.n_effective)?;
        Ok(d)
    }

    /// Returns `(image, mask, metadata)`.
    #[pyfunction]
    #[pyo3(signature = (seed, dims = 64, n_muscle_lobes = 4, noise_sigma = 0.0, profile = "t1-like"))]
    fn generate_phantom<'py>(
        py: Python<'py>,
        seed: u64,
        dims: usize,
        n_muscle_lobes: usize,
        noise_sigma: f64,
        profile: &str,
    ) -> PyResult<(PyVolume, PyVolume, Bound<'py, PyDict>)> {
        let contrast_profile: ContrastProfile = profile.parse().map_err(PyValueError::new_err)?;
        let config = PhantomConfig {
            dims: [dims; 3],
            n_muscle_lobes,
            noise_sigma,
            contrast_profile,
            seed,
            ..PhantomConfig::default()
        };
        let p = phantom::generate_phantom(&config).map_err(value_error)?;
        let m = &p.metadata;
        let meta = PyDict::new(py);
        meta.set_item("patient_id", &m.patient_id)?;
        meta.set_item("series_id", &m.series_id)?;
        meta.set_item("series_description", &m.series_description)?;
        meta.set_item("protocol_description", &m.protocol_description)?;
        meta.set_item("age", m.age)?;
        meta.set_item("sex", m.sex.as_str())?;
        meta.set_item("race", &m.race)?;
        meta.set_item("height_m", m.height_m)?;
        Ok((PyVolume { inner: p.image }, PyVolume { inner: p.mask.to_scalar() }, meta))
    }

    #[pyfunction]
    #[pyo3(signature = (mask, blur_iters, noise_sigma, seed))]
    fn simulate_probability_map(mask: &PyVolume, blur_iters: usize, noise_sigma: f64, seed: u64) -> PyResult<PyVolume> {
        let map = phantom::simulate_probability_map(&mask_of(mask)?, blur_iters, noise_sigma, seed);
        let inner = ScalarVolume::new(map.geometry().clone(), map.probabilities().to_vec()).map_err(value_error)?;
        Ok(PyVolume { inner })
    }

    /// Runs the command-line interface in-process; returns the exit code.
    #[pyfunction]
    fn run_command(argv: Vec<String>) -> i32 {
        muscle_eval::cli::run_command(std::iter::once("muscle-eval".to_string()).chain(argv))
    }
}
