//! Python bindings: screening, features, the three classifiers and
//! evaluation helpers. Import as `coughgate_py`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use coughgate::audio::{downmix_mono, read_wav, resample, write_wav, CANONICAL_RATE};
use coughgate::cnn::CnnModel as CoreCnn;
use coughgate::eval::ScoredSet;
use coughgate::features::{svm_feature_names, SonographBuilder, SvmFeaturizer};
use coughgate::pipeline::{screen_clip, LabeledClip};
use coughgate::quality::{GateThresholds, QualityCheck, QualityReport as CoreReport, Screener as CoreScreener};
use coughgate::ssl::SslModel as CoreSsl;
use coughgate::svm::{train_calibrated, train_svm_clips, SvmModel as CoreSvm, SvmParams};
use coughgate::synth::{synth_corpus, SynthConfig};

create_exception!(coughgate_py, CoughgateError, PyValueError, "Raised for any coughgate failure; `kind` is args[1].");

fn err(e: coughgate::Error) -> PyErr {
    CoughgateError::new_err((e.to_string(), e.kind()))
}

#[pyclass(module = "coughgate_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct AudioBuffer(coughgate::audio::AudioBuffer);

#[pymethods]
impl AudioBuffer {
    #[new]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        coughgate::audio::AudioBuffer::new(samples, sample_rate).map(Self).map_err(err)
    }

    /// Decode a WAV file and downmix it to mono at its native rate.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_wav(&path).and_then(|c| downmix_mono(&c)).map(Self).map_err(err)
    }

    /// Write 16-bit PCM.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_wav(path, &self.0).map_err(err)
    }

    fn resample(&self, sample_rate: u32) -> PyResult<Self> {
        resample(&self.0, sample_rate).map(Self).map_err(err)
    }

    #[getter]
    fn samples(&self) -> Vec<f64> {
        self.0.samples().to_vec()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.0.sample_rate()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration_secs()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("AudioBuffer({} samples at {} Hz)", self.0.len(), self.0.sample_rate())
    }
}

#[pyclass(module = "coughgate_py", frozen)]
struct QualityReport(CoreReport);

#[pymethods]
impl QualityReport {
    #[getter]
    fn passed(&self) -> bool {
        self.0.passed()
    }

    #[getter]
    fn max_amplitude(&self) -> f64 {
        self.0.max_amplitude
    }

    #[getter]
    fn clipping_ratio(&self) -> f64 {
        self.0.clipping_ratio
    }

    #[getter]
    fn cough_probability(&self) -> f64 {
        self.0.cough_probability
    }

    #[getter]
    fn background_power_ratio(&self) -> f64 {
        self.0.background_power_ratio
    }

    /// `(start, end)` sample indices at the screened rate.
    #[getter]
    fn segments(&self) -> Vec<(usize, usize)> {
        self.0.segments.iter().map(|s| (s.start, s.end)).collect()
    }

    #[getter]
    fn failed_checks(&self) -> Vec<String> {
        self.0
            .failed_checks
            .iter()
            .map(|c| {
                match c {
                    QualityCheck::Volume => "volume",
                    QualityCheck::Clipping => "clipping",
                    QualityCheck::CoughDetection => "cough_detection",
                    QualityCheck::Segmentation => "segmentation",
                    QualityCheck::BackgroundNoise => "background_noise",
                }
                .to_string()
            })
            .collect()
    }

    #[getter]
    fn notes(&self) -> Vec<String> {
        self.0.notes.clone()
    }

    #[pyo3(signature = (id = "clip"))]
    fn to_json(&self, id: &str) -> String {
        self.0.to_json(id).to_string()
    }

    fn __repr__(&self) -> String {
        format!("QualityReport(passed={}, failed={:?})", self.0.passed(), self.failed_checks())
    }
}

/// 16 kHz audio that passed the gate, with its cough segments.
#[pyclass(module = "coughgate_py", frozen, from_py_object)]
#[derive(Clone)]
struct Clip(LabeledClip);

#[pymethods]
impl Clip {
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn label(&self) -> Option<bool> {
        self.0.label
    }

    #[getter]
    fn audio(&self) -> AudioBuffer {
        AudioBuffer(self.0.audio.clone())
    }

    #[getter]
    fn segments(&self) -> Vec<(usize, usize)> {
        self.0.segments.iter().map(|s| (s.start, s.end)).collect()
    }

    /// The 172 handcrafted SVM features, unnormalised.
    fn svm_features(&self) -> PyResult<Vec<f64>> {
        let f = SvmFeaturizer::new().map_err(err)?;
        f.compute(&self.0.audio, &self.0.segments).map(|v| v.values).map_err(err)
    }

    /// 64 × 256 MFCC sonograph as nested lists, coefficients first.
    fn sonograph(&self) -> PyResult<Vec<Vec<f64>>> {
        let image = SonographBuilder::new()
            .and_then(|b| b.build(&self.0.audio, &self.0.segments, None))
            .map_err(err)?;
        Ok(image.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Clip({:?}, label={:?}, {} segments)", self.0.id, self.0.label, self.0.segments.len())
    }
}

#[pyclass(module = "coughgate_py", frozen)]
struct Screener(CoreScreener);

#[pymethods]
impl Screener {
    #[new]
    #[pyo3(signature = (min_max_amplitude = None, max_clipping_ratio = None, min_cough_probability = None, min_background_power_ratio = None))]
    fn new(
        min_max_amplitude: Option<f64>,
        max_clipping_ratio: Option<f64>,
        min_cough_probability: Option<f64>,
        min_background_power_ratio: Option<f64>,
    ) -> PyResult<Self> {
        let d = GateThresholds::default();
        let t = GateThresholds {
            min_max_amplitude: min_max_amplitude.unwrap_or(d.min_max_amplitude),
            max_clipping_ratio: max_clipping_ratio.unwrap_or(d.max_clipping_ratio),
            min_cough_probability: min_cough_probability.unwrap_or(d.min_cough_probability),
            min_background_power_ratio: min_background_power_ratio.unwrap_or(d.min_background_power_ratio),
        };
        t.validate().map_err(err)?;
        Ok(Self(CoreScreener::new(t)))
    }

    fn screen(&self, audio: &AudioBuffer) -> QualityReport {
        QualityReport(self.0.screen(&audio.0))
    }

    /// Screen and, if the file passes, return it as a 16 kHz clip.
    #[pyo3(signature = (audio, id = "clip", label = None))]
    fn prepare(&self, audio: &AudioBuffer, id: &str, label: Option<bool>) -> PyResult<(Option<Clip>, QualityReport)> {
        let (clip, report) = screen_clip(id, label, &audio.0, &self.0).map_err(err)?;
        Ok((clip.map(Clip), QualityReport(report)))
    }
}

#[pyclass(module = "coughgate_py", frozen)]
struct SvmModel(CoreSvm);

#[pymethods]
impl SvmModel {
    /// Train a Platt-calibrated RBF SVM on already normalised features.
    #[staticmethod]
    #[pyo3(signature = (features, labels, c = 1.0, gamma = None, seed = 0))]
    fn train(features: Vec<Vec<f64>>, labels: Vec<bool>, c: f64, gamma: Option<f64>, seed: u64) -> PyResult<Self> {
        let params = SvmParams { c, gamma, ..SvmParams::default() };
        train_calibrated(&features, &labels, &params, seed).map(Self).map_err(err)
    }

    /// Featurise, standardise and train on labeled clips.
    #[staticmethod]
    #[pyo3(signature = (clips, c = 1.0, seed = 0))]
    fn train_clips(clips: Vec<Clip>, c: f64, seed: u64) -> PyResult<Self> {
        let clips: Vec<LabeledClip> = clips.into_iter().map(|c| c.0).collect();
        let params = SvmParams { c, ..SvmParams::default() };
        train_svm_clips(&clips, &params, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreSvm::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreSvm::from_json(text).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    fn decision_value(&self, features: Vec<f64>) -> PyResult<f64> {
        self.0.decision_value(&features).map_err(err)
    }

    /// Calibrated probability for raw features; embedded statistics are
    /// applied first when the model carries them.
    fn probability(&self, features: Vec<f64>) -> PyResult<f64> {
        self.0.probability_raw(&features).map_err(err)
    }

    fn predict_clip(&self, clip: &Clip) -> PyResult<f64> {
        let f = SvmFeaturizer::new().map_err(err)?;
        self.0.predict_audio(&f, &clip.0.audio, &clip.0.segments).map_err(err)
    }

    #[getter]
    fn n_support(&self) -> usize {
        self.0.support_vectors.len()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }
}

#[pyclass(module = "coughgate_py", unsendable)]
struct CnnModel(CoreCnn);

#[pymethods]
impl CnnModel {
    /// Load weights saved by `train-cnn`; the JSON sidecar must sit beside them.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreCnn::load(&path).map(|(m, _)| Self(m)).map_err(err)
    }

    fn predict_clip(&mut self, clip: &Clip) -> PyResult<f64> {
        let image = SonographBuilder::new()
            .and_then(|b| b.build(&clip.0.audio, &clip.0.segments, None))
            .map_err(err)?;
        self.0.predict_image(&image).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.arch.param_counts().iter().sum()
    }
}

#[pyclass(module = "coughgate_py", unsendable)]
struct SslModel(CoreSsl);

#[pymethods]
impl SslModel {
    /// Load an encoder plus classifier head saved by `train-ssl-head`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreSsl::load(&path).map(|(m, _)| Self(m)).map_err(err)
    }

    fn predict_clip(&mut self, clip: &Clip) -> PyResult<f64> {
        self.0.predict(&clip.0.audio, &clip.0.segments).map_err(err)
    }
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    coughgate::eval::auc(&scores, &labels).map_err(err)
}

/// AUC with accuracy, sensitivity and specificity at `threshold`, plus the
/// ROC curve as `(fpr, tpr)` pairs.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = coughgate::eval::DEFAULT_THRESHOLD))]
fn evaluate<'py>(py: Python<'py>, scores: Vec<f64>, labels: Vec<bool>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let set = ScoredSet::unnamed(scores, labels).map_err(err)?;
    let r = coughgate::eval::evaluate(&set, threshold).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("auc", r.auc)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("sensitivity", r.sensitivity)?;
    d.set_item("specificity", r.specificity)?;
    d.set_item("threshold", r.threshold)?;
    let counts = PyDict::new(py);
    counts.set_item("tp", r.counts.tp)?;
    counts.set_item("fp", r.counts.fp)?;
    counts.set_item("tn", r.counts.tn)?;
    counts.set_item("fn", r.counts.fn_)?;
    d.set_item("counts", counts)?;
    d.set_item("roc", r.roc.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyfunction]
fn feature_names() -> Vec<String> {
    svm_feature_names()
}

/// One synthetic 16 kHz cough recording.
#[pyfunction]
#[pyo3(signature = (positive, index = 0, seed = 0))]
fn synth_cough(positive: bool, index: u64, seed: u64) -> AudioBuffer {
    AudioBuffer(coughgate::synth::synth_cough(positive, index, seed))
}

/// Write a synthetic corpus with `manifest.csv`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_class = 100, validation_per_class = 20, seed = 0))]
fn synth_corpus_dir(out_dir: PathBuf, n_per_class: usize, validation_per_class: usize, seed: u64) -> PyResult<PathBuf> {
    let cfg = SynthConfig {
        n_per_class,
        validation_per_class,
        seed,
        ..SynthConfig::default()
    };
    synth_corpus(&out_dir, &cfg).map_err(err)?;
    Ok(out_dir.join("manifest.csv"))
}

#[pymodule]
pub fn coughgate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CoughgateError", m.py().get_type::<CoughgateError>())?;
    m.add("CANONICAL_RATE", CANONICAL_RATE)?;
    m.add_class::<AudioBuffer>()?;
    m.add_class::<QualityReport>()?;
    m.add_class::<Clip>()?;
    m.add_class::<Screener>()?;
    m.add_class::<SvmModel>()?;
    m.add_class::<CnnModel>()?;
    m.add_class::<SslModel>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(synth_cough, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus_dir, m)?)?;
    Ok(())
}
