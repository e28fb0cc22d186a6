//! ROC/AUC, thresholded metrics, training-size ablation and report files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const ABLATION_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Probabilities with their labels and record ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, ids: Vec<String>) -> Result<Self> {
        if scores.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores, {} labels, {} ids",
                scores.len(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, labels, ids })
    }

    /// Ids default to the index.
    pub fn unnamed(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(scores, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

/// ROC curve from a descending sweep with tied scores stepped together, and
/// the trapezoidal area under it. Works for any real-valued scores.
pub fn roc_and_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    // Twice the area in units of one (positive, negative) pair.
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gtp, mut gfp) = (0, 0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gtp += 1;
            } else {
                gfp += 1;
            }
            i += 1;
        }
        area2 += gfp as u128 * (2 * tp + gtp) as u128;
        tp += gtp;
        fp += gfp;
        roc.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok((roc, area2 as f64 / (2 * p * n) as f64))
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_and_auc(scores, labels)?.1)
}

/// `P(s+ > s-) + P(s+ = s-)/2` by counting every pair.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    let mut twice: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            twice += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    /// `None` without positives.
    pub sensitivity: Option<f64>,
    /// `None` without negatives.
    pub specificity: Option<f64>,
    pub counts: Counts,
}

/// A score at or above `threshold` is called positive.
pub fn metrics_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    if scores.is_empty() {
        return Err(Error::Empty("scored set"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut c = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(ThresholdMetrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity: ratio(c.tp, c.fn_),
        specificity: ratio(c.tn, c.fp),
        counts: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub counts: Counts,
    pub roc: Vec<RocPoint>,
}

pub fn evaluate(set: &ScoredSet, threshold: f64) -> Result<EvalReport> {
    let (roc, auc) = roc_and_auc(&set.scores, &set.labels)?;
    let m = metrics_at_threshold(&set.scores, &set.labels, threshold)?;
    Ok(EvalReport {
        auc,
        accuracy: m.accuracy,
        sensitivity: m.sensitivity.expect("both classes present"),
        specificity: m.specificity.expect("both classes present"),
        threshold,
        counts: m.counts,
        roc,
    })
}

/// Indices of a label-stratified subsample, in original order. Each class
/// keeps `round(fraction · count)` members.
pub fn stratified_subsample(labels: &[bool], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut keep = Vec::new();
    for (class, tag) in [(true, 1u64), (false, 0)] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let k = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng::seeded(seed, &[0xab1a7e, fraction.to_bits(), tag]));
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_positive: usize,
    pub report: Option<EvalReport>,
    /// Why the row was not trained, if it was not.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean AUC per fraction over the rows that ran.
    pub fn mean_auc(&self) -> Vec<(f64, f64)> {
        let mut fractions: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
        fractions.dedup();
        fractions
            .into_iter()
            .filter_map(|f| {
                let aucs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.fraction == f)
                    .filter_map(|r| r.report.as_ref().map(|rep| rep.auc))
                    .collect();
                (!aucs.is_empty()).then(|| (f, aucs.iter().sum::<f64>() / aucs.len() as f64))
            })
            .collect()
    }
}

/// Retrain on stratified subsamples of `train` for every (fraction, seed).
/// `trainer` receives the subsample and seed and returns its report on the
/// fixed evaluation split. Subsamples without positives are recorded as
/// skipped.
pub fn ablate<F>(train: &[DatasetRecord], fractions: &[f64], seeds: &[u64], mut trainer: F) -> Result<AblationTable>
where
    F: FnMut(&[DatasetRecord], u64) -> Result<EvalReport>,
{
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let labels = train
        .iter()
        .map(|r| {
            r.label
                .as_binary()
                .ok_or_else(|| Error::InvalidArgument(format!("record {:?} is unlabeled", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &fraction in &fractions {
        for &seed in seeds {
            let idx = stratified_subsample(&labels, fraction, seed)?;
            let subset: Vec<DatasetRecord> = idx.iter().map(|&i| train[i].clone()).collect();
            let n_positive = idx.iter().filter(|&&i| labels[i]).count();
            let (report, skipped) = if n_positive == 0 {
                (None, Some("subsample has no positive records".to_string()))
            } else if n_positive == subset.len() {
                (None, Some("subsample has no negative records".to_string()))
            } else {
                log::info!("ablation: fraction {fraction}, seed {seed}, {} records", subset.len());
                (Some(trainer(&subset, seed)?), None)
            };
            rows.push(AblationRow {
                fraction,
                seed,
                n_train: subset.len(),
                n_positive,
                report,
                skipped,
            });
        }
    }
    Ok(AblationTable { rows })
}

/// Compact JSON writing every float with 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(v))
    }
}

pub fn to_json_full_precision<S: Serialize>(value: &S) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

fn num(v: f64) -> String {
    format!("{v:.17}")
        .trim_end_matches('0')
        .trim_end_matches('.')
        .to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// ROC points as `fpr,tpr` rows under a header.
pub fn roc_csv(report: &EvalReport) -> String {
    let mut s = String::from("fpr,tpr\n");
    for p in &report.roc {
        let _ = writeln!(s, "{},{}", num(p.fpr), num(p.tpr));
    }
    s
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let mut s = String::from("fraction,seed,n_train,n_positive,auc,accuracy,sensitivity,specificity,skipped\n");
    for r in &table.rows {
        let rep = r.report.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            num(r.fraction),
            r.seed,
            r.n_train,
            r.n_positive,
            opt(rep.map(|x| x.auc)),
            opt(rep.map(|x| x.accuracy)),
            opt(rep.map(|x| x.sensitivity)),
            opt(rep.map(|x| x.specificity)),
            r.skipped.as_deref().unwrap_or("").replace(',', ";"),
        );
    }
    s
}

/// Square ROC plot: frame, chance diagonal and the curve as one polyline.
pub fn roc_svg(report: &EvalReport) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let span = SIZE - 2.0 * PAD;
    let pts: Vec<String> = report
        .roc
        .iter()
        .map(|p| format!("{:.3},{:.3}", PAD + p.fpr * span, SIZE - PAD - p.tpr * span))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{span}" height="{span}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        s,
        r##"<line x1="{PAD}" y1="{}" x2="{}" y2="{PAD}" stroke="#aaa" stroke-dasharray="4 4"/>"##,
        SIZE - PAD,
        SIZE - PAD
    );
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#c0392b" stroke-width="2" points="{}"/>"##,
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">False positive rate</text>"#,
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 14 {})">True positive rate</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="14">AUC {:.4}</text>"#,
        SIZE - PAD - 6.0,
        SIZE - PAD - 8.0,
        report.auc
    );
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, body: &str) -> Result<PathBuf> {
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `{stem}.json`, `{stem}.csv` and `{stem}.svg` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(vec![
        write(dir.join(format!("{stem}.json")), &to_json_full_precision(report)?)?,
        write(dir.join(format!("{stem}.csv")), &roc_csv(report))?,
        write(dir.join(format!("{stem}.svg")), &roc_svg(report))?,
    ])
}

/// Writes `{stem}.json` and `{stem}.csv` into `dir`.
pub fn emit_ablation(table: &AblationTable, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(vec![
        write(dir.join(format!("{stem}.json")), &to_json_full_precision(table)?)?,
        write(dir.join(format!("{stem}.csv")), &ablation_csv(table))?,
    ])
}
