//! RBF-kernel SVM trained by sequential minimal optimisation, with Platt
//! scaling to probabilities.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::{FeatureStats, SvmFeaturizer};
use crate::pipeline::{labels, LabeledClip};
use crate::quality::CoughSegment;
use crate::rng;

pub const SVM_MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmParams {
    pub c: f64,
    /// RBF width; `None` means `1 / (d · var(X))`.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    /// Outer sweeps over the training set before giving up.
    pub max_passes: usize,
    /// Multiplier on `c` for positive examples.
    pub positive_weight: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tolerance: 1e-3,
            max_passes: 1000,
            positive_weight: 1.0,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.tolerance > 0.0 && self.positive_weight > 0.0) {
            return Err(Error::InvalidArgument(
                "C, tolerance and positive weight must be positive".into(),
            ));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return Err(Error::InvalidArgument("gamma must be positive".into()));
            }
        }
        if self.max_passes == 0 {
            return Err(Error::InvalidArgument("max_passes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PlattParams {
    /// `1 / (1 + exp(A·f + B))`, computed without overflow.
    pub fn probability(&self, score: f64) -> f64 {
        let z = self.a * score + self.b;
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub version: u32,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i · y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub params: SvmParams,
    pub platt: Option<PlattParams>,
    pub feature_stats: Option<FeatureStats>,
    /// Outer sweeps performed and whether the KKT loop finished.
    pub passes: usize,
    pub converged: bool,
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// `1 / (d · var)` over every entry of `x`.
pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map_or(1, Vec::len).max(1);
    let n = (x.len() * d) as f64;
    let mean = x.iter().flatten().sum::<f64>() / n;
    let var = x.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0 / d as f64
    }
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if d != 0 && x.len() != d {
            return Err(Error::Shape(format!("expected {d} features, got {}", x.len())));
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, c)| c * rbf(self.gamma, sv, x))
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict_proba(&self, platt: &PlattParams, x: &[f64]) -> Result<f64> {
        Ok(platt.probability(self.decision_value(x)?))
    }

    /// Probability for raw (unnormalised) features, applying the embedded
    /// feature statistics when present.
    pub fn probability_raw(&self, raw: &[f64]) -> Result<f64> {
        match &self.feature_stats {
            Some(stats) => self.probability(&stats.apply(raw)?),
            None => self.probability(raw),
        }
    }

    /// Probability for 16 kHz audio and its cough segments.
    pub fn predict_audio(&self, featurizer: &SvmFeaturizer, audio: &AudioBuffer, segments: &[CoughSegment]) -> Result<f64> {
        self.probability_raw(&featurizer.compute(audio, segments)?.values)
    }

    pub fn predict_clips(&self, clips: &[LabeledClip]) -> Result<Vec<f64>> {
        let f = SvmFeaturizer::new()?;
        clips.iter().map(|c| self.predict_audio(&f, &c.audio, &c.segments)).collect()
    }

    /// Probability with the embedded Platt parameters.
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        let platt = self
            .platt
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no Platt calibration".into()))?;
        self.predict_proba(platt, x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != SVM_MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported SVM model version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Kernel values, cached as a full Gram matrix for moderate `n`.
enum Kernel<'a> {
    Gram { n: usize, k: Vec<f64> },
    Lazy { x: &'a [Vec<f64>], gamma: f64 },
}

const GRAM_LIMIT: usize = 5000;

impl<'a> Kernel<'a> {
    fn new(x: &'a [Vec<f64>], gamma: f64) -> Self {
        let n = x.len();
        if n > GRAM_LIMIT {
            return Kernel::Lazy { x, gamma };
        }
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in 0..i {
                let v = rbf(gamma, &x[i], &x[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Kernel::Gram { n, k }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Kernel::Gram { n, k } => k[i * n + j],
            Kernel::Lazy { x, gamma } => rbf(*gamma, &x[i], &x[j]),
        }
    }
}

struct Smo<'a> {
    kernel: Kernel<'a>,
    y: Vec<f64>,
    cap: Vec<f64>,
    alpha: Vec<f64>,
    /// `f(x_i) - y_i` for every example.
    err: Vec<f64>,
    bias: f64,
    tol: f64,
    rng: rng::Rng,
}

const ALPHA_EPS: f64 = 1e-12;

impl Smo<'_> {
    fn bound(&self, i: usize) -> bool {
        self.alpha[i] <= 0.0 || self.alpha[i] >= self.cap[i]
    }

    fn take_step(&mut self, i1: usize, i2: usize) -> bool {
        if i1 == i2 {
            return false;
        }
        let (a1, a2) = (self.alpha[i1], self.alpha[i2]);
        let (y1, y2) = (self.y[i1], self.y[i2]);
        let (c1, c2) = (self.cap[i1], self.cap[i2]);
        let (e1, e2) = (self.err[i1], self.err[i2]);
        let s = y1 * y2;
        let (lo, hi) = if s < 0.0 {
            ((a2 - a1).max(0.0), c2.min(c1 + a2 - a1))
        } else {
            ((a1 + a2 - c1).max(0.0), c2.min(a1 + a2))
        };
        if hi - lo <= ALPHA_EPS {
            return false;
        }
        let k11 = self.kernel.get(i1, i1);
        let k12 = self.kernel.get(i1, i2);
        let k22 = self.kernel.get(i2, i2);
        let eta = k11 + k22 - 2.0 * k12;
        let mut new2 = if eta > 0.0 {
            (a2 + y2 * (e1 - e2) / eta).clamp(lo, hi)
        } else {
            // Objective is linear along the constraint line; take the
            // better end point.
            let f1 = y1 * e1 - a1 * k11 - s * a2 * k12;
            let f2 = y2 * e2 - s * a1 * k12 - a2 * k22;
            let l1 = a1 + s * (a2 - lo);
            let h1 = a1 + s * (a2 - hi);
            let obj_lo = l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11 + 0.5 * lo * lo * k22 + s * lo * l1 * k12;
            let obj_hi = h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11 + 0.5 * hi * hi * k22 + s * hi * h1 * k12;
            if obj_lo < obj_hi - 1e-12 {
                lo
            } else if obj_hi < obj_lo - 1e-12 {
                hi
            } else {
                a2
            }
        };
        if new2 < ALPHA_EPS {
            new2 = 0.0;
        } else if new2 > c2 - ALPHA_EPS {
            new2 = c2;
        }
        if (new2 - a2).abs() < ALPHA_EPS * (new2 + a2 + ALPHA_EPS) {
            return false;
        }
        let mut new1 = a1 + s * (a2 - new2);
        if new1 < ALPHA_EPS {
            new1 = 0.0;
        } else if new1 > c1 - ALPHA_EPS {
            new1 = c1;
        }

        let (d1, d2) = (y1 * (new1 - a1), y2 * (new2 - a2));
        let b1 = self.bias - e1 - d1 * k11 - d2 * k12;
        let b2 = self.bias - e2 - d1 * k12 - d2 * k22;
        let free1 = new1 > 0.0 && new1 < c1;
        let free2 = new2 > 0.0 && new2 < c2;
        let new_bias = if free1 {
            b1
        } else if free2 {
            b2
        } else {
            0.5 * (b1 + b2)
        };
        let db = new_bias - self.bias;
        for i in 0..self.err.len() {
            self.err[i] += d1 * self.kernel.get(i1, i) + d2 * self.kernel.get(i2, i) + db;
        }
        self.alpha[i1] = new1;
        self.alpha[i2] = new2;
        self.bias = new_bias;
        true
    }

    fn violates(&self, i: usize) -> bool {
        let r = self.err[i] * self.y[i];
        (r < -self.tol && self.alpha[i] < self.cap[i]) || (r > self.tol && self.alpha[i] > 0.0)
    }

    fn examine(&mut self, i2: usize) -> bool {
        if !self.violates(i2) {
            return false;
        }
        let n = self.alpha.len();
        let e2 = self.err[i2];
        let free: Vec<usize> = (0..n).filter(|&i| !self.bound(i)).collect();
        if free.len() > 1 {
            let i1 = *free
                .iter()
                .max_by(|&&a, &&b| (self.err[a] - e2).abs().total_cmp(&(self.err[b] - e2).abs()))
                .unwrap();
            if self.take_step(i1, i2) {
                return true;
            }
        }
        if !free.is_empty() {
            let start = self.rng.random_range(0..free.len());
            for k in 0..free.len() {
                if self.take_step(free[(start + k) % free.len()], i2) {
                    return true;
                }
            }
        }
        let start = self.rng.random_range(0..n);
        for k in 0..n {
            let i1 = (start + k) % n;
            if self.bound(i1) && self.take_step(i1, i2) {
                return true;
            }
        }
        false
    }
}

/// Train on already normalised vectors; `labels[i]` is true for the
/// positive class.
pub fn train_svm(x: &[Vec<f64>], labels: &[bool], params: &SvmParams, seed: u64) -> Result<SvmModel> {
    params.validate()?;
    if x.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} vectors but {} labels",
            x.len(),
            labels.len()
        )));
    }
    if x.is_empty() || labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClassTraining);
    }
    let d = x[0].len();
    if let Some(i) = x.iter().position(|v| v.len() != d) {
        return Err(Error::Shape(format!("vector {i} has length {}, expected {d}", x[i].len())));
    }
    let gamma = params.gamma.unwrap_or_else(|| scale_gamma(x));
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let cap = labels
        .iter()
        .map(|&l| if l { params.c * params.positive_weight } else { params.c })
        .collect();
    let n = x.len();
    let mut smo = Smo {
        kernel: Kernel::new(x, gamma),
        err: y.iter().map(|v| -v).collect(),
        y,
        cap,
        alpha: vec![0.0; n],
        bias: 0.0,
        tol: params.tolerance,
        rng: rng::seeded(seed, &[0x5f]),
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut examine_all = true;
    let mut passes = 0;
    let mut converged = false;
    while passes < params.max_passes {
        order.shuffle(&mut smo.rng);
        let mut changed = 0;
        for &i in &order {
            if (examine_all || !smo.bound(i)) && smo.examine(i) {
                changed += 1;
            }
        }
        passes += 1;
        if examine_all {
            if changed == 0 {
                converged = true;
                break;
            }
            examine_all = false;
        } else if changed == 0 {
            examine_all = true;
        }
    }
    if !converged {
        log::warn!("SMO stopped after {passes} passes without meeting the KKT tolerance");
    }

    let keep: Vec<usize> = (0..n).filter(|&i| smo.alpha[i] > 0.0).collect();
    Ok(SvmModel {
        version: SVM_MODEL_VERSION,
        support_vectors: keep.iter().map(|&i| x[i].clone()).collect(),
        dual_coef: keep.iter().map(|&i| smo.alpha[i] * smo.y[i]).collect(),
        bias: smo.bias,
        gamma,
        params: *params,
        platt: None,
        feature_stats: None,
        passes,
        converged,
    })
}

/// Cross-entropy of Platt's sigmoid against smoothed targets.
pub fn platt_objective(scores: &[f64], targets: &[f64], a: f64, b: f64) -> f64 {
    scores
        .iter()
        .zip(targets)
        .map(|(f, t)| {
            let z = f * a + b;
            if z >= 0.0 {
                t * z + (-z).exp().ln_1p()
            } else {
                (t - 1.0) * z + z.exp().ln_1p()
            }
        })
        .sum()
}

/// Platt's smoothed targets `(N+ + 1)/(N+ + 2)` and `1/(N- + 2)`.
pub fn platt_targets(labels: &[bool]) -> Vec<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let hi = (pos + 1.0) / (pos + 2.0);
    let lo = 1.0 / (neg + 2.0);
    labels.iter().map(|&l| if l { hi } else { lo }).collect()
}

/// Newton's method with backtracking on the Platt objective.
pub fn fit_platt(scores: &[f64], labels: &[bool], max_iter: usize, tol: f64) -> Result<PlattParams> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::SingleClassTraining);
    }
    let t = platt_targets(labels);
    let (mut a, mut b) = (0.0, ((neg + 1.0) / (pos + 1.0)).ln());
    let mut fval = platt_objective(scores, &t, a, b);
    const SIGMA: f64 = 1e-12;
    const MIN_STEP: f64 = 1e-10;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (f, ti) in scores.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < tol && g2.abs() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = platt_objective(scores, &t, na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < MIN_STEP {
            log::warn!("Platt line search failed after {iterations} iterations");
            break;
        }
    }
    Ok(PlattParams {
        a,
        b,
        converged,
        iterations,
    })
}

/// Train the SVM, then calibrate it on its own training decision values.
pub fn train_calibrated(
    x: &[Vec<f64>],
    labels: &[bool],
    params: &SvmParams,
    seed: u64,
) -> Result<SvmModel> {
    let mut model = train_svm(x, labels, params, seed)?;
    let scores = x
        .iter()
        .map(|v| model.decision_value(v))
        .collect::<Result<Vec<_>>>()?;
    model.platt = Some(fit_platt(&scores, labels, 100, 1e-5)?);
    Ok(model)
}

/// Featurise clips, standardise with training statistics (kept in the
/// model) and train a calibrated SVM.
pub fn train_svm_clips(clips: &[LabeledClip], params: &SvmParams, seed: u64) -> Result<SvmModel> {
    let ys = labels(clips)?;
    let f = SvmFeaturizer::new()?;
    let raw = clips
        .iter()
        .map(|c| Ok(f.compute(&c.audio, &c.segments)?.values))
        .collect::<Result<Vec<_>>>()?;
    let stats = FeatureStats::fit(&raw)?;
    let x = raw.iter().map(|v| stats.apply(v)).collect::<Result<Vec<_>>>()?;
    let mut model = train_calibrated(&x, &ys, params, seed)?;
    model.feature_stats = Some(stats);
    Ok(model)
}
