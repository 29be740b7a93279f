//! Pixel-level F1, risk-category agreement rates and cohort evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, shape_err, Error, Result};
use crate::par::{self, Execution};
use crate::scoring::{binarize, score_pipeline, RiskCategory, ScoringParams};
use crate::volume::{read_mask, read_prediction, read_volume, MaskRole, MaskVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn from_masks(pred: &MaskVolume, gt: &MaskVolume) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(shape_err!("prediction dims {} differ from ground truth {}", pred.dims(), gt.dims()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, zero when both are zero.
    pub fn f1(&self) -> F1Scores {
        let (p, r) = (self.precision(), self.recall());
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        F1Scores { precision: p, recall: r, f1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(pred: &MaskVolume, gt: &MaskVolume) -> Result<F1Scores> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.f1())
}

/// Fraction of `(predicted, true)` pairs that agree.
pub fn cac_rate(pairs: &[(RiskCategory, RiskCategory)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid!("cannot rate an empty cohort"));
    }
    let correct = pairs.iter().filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Rounds to two decimals, the precision rates are reported at.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientResult {
    pub id: String,
    pub f1: F1Scores,
    pub true_risk: RiskCategory,
    pub total_raw: f64,
    pub total_filtered: f64,
    pub pred_risk_raw: RiskCategory,
    pub pred_risk_filtered: RiskCategory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CohortResult {
    pub n_patients: usize,
    pub n_correct_raw: usize,
    pub n_correct_filtered: usize,
}

impl CohortResult {
    pub fn from_patients(patients: &[PatientResult]) -> Self {
        CohortResult {
            n_patients: patients.len(),
            n_correct_raw: patients.iter().filter(|p| p.pred_risk_raw == p.true_risk).count(),
            n_correct_filtered: patients.iter().filter(|p| p.pred_risk_filtered == p.true_risk).count(),
        }
    }

    /// Agreement without the lesion-size filter.
    pub fn cac_rate(&self) -> f64 {
        ratio(self.n_correct_raw as u64, self.n_patients as u64)
    }

    /// Agreement with the full post-processing.
    pub fn cac_filter_rate(&self) -> f64 {
        ratio(self.n_correct_filtered as u64, self.n_patients as u64)
    }
}

/// One manifest line: `id  volume  gt_mask  prediction  true_risk`,
/// tab-separated. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    pub gt_mask: PathBuf,
    pub prediction: PathBuf,
    pub true_risk: RiskCategory,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 || f.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Format(format!("manifest line {}: expected 5 tab-separated fields", n + 1)));
        }
        let path = |s: &str| base.join(s.trim());
        out.push(ManifestEntry {
            id: f[0].trim().to_string(),
            volume: path(f[1]),
            gt_mask: path(f[2]),
            prediction: path(f[3]),
            true_risk: f[4].trim().parse()?,
        });
    }
    if out.is_empty() {
        return Err(invalid!("manifest lists no patients"));
    }
    Ok(out)
}

pub fn evaluate_patient(entry: &ManifestEntry, params: &ScoringParams) -> Result<PatientResult> {
    let vol = read_volume(&entry.volume)?;
    let gt = read_mask(&entry.gt_mask, MaskRole::GroundTruth)?;
    let probs = read_prediction(&entry.prediction)?;
    if gt.dims() != vol.dims() {
        return Err(shape_err!("{}: mask dims {} differ from volume dims {}", entry.id, gt.dims(), vol.dims()));
    }
    let scores = f1(&binarize(&probs, params.prob_threshold), &gt)?;
    let raw = score_pipeline(&probs, &vol, &params.raw())?;
    let filtered = score_pipeline(&probs, &vol, params)?;
    Ok(PatientResult {
        id: entry.id.clone(),
        f1: scores,
        true_risk: entry.true_risk,
        total_raw: raw.total,
        total_filtered: filtered.total,
        pred_risk_raw: raw.risk,
        pred_risk_filtered: filtered.risk,
    })
}

/// Evaluates patients concurrently; results keep manifest order.
pub fn evaluate_cohort(
    entries: &[ManifestEntry],
    params: &ScoringParams,
    exec: Execution,
) -> Result<(Vec<PatientResult>, CohortResult)> {
    let patients = par::map(exec, entries, |e| evaluate_patient(e, params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let cohort = CohortResult::from_patients(&patients);
    Ok((patients, cohort))
}

/// ```text
/// # id, true_risk, pred_risk_raw, pred_risk_filtered, f1
/// p01, mild, mild, mild, 1.0000
/// n_patients 1
/// cac_rate 1.00
/// cac_filter_rate 1.00
/// ```
pub fn render_cohort(patients: &[PatientResult], cohort: &CohortResult) -> String {
    let mut out = String::from("# id, true_risk, pred_risk_raw, pred_risk_filtered, f1\n");
    for p in patients {
        let _ = writeln!(
            out,
            "{}, {}, {}, {}, {:.4}",
            p.id, p.true_risk, p.pred_risk_raw, p.pred_risk_filtered, p.f1.f1
        );
    }
    let _ = writeln!(out, "n_patients {}", cohort.n_patients);
    let _ = writeln!(out, "cac_rate {:.2}", cohort.cac_rate());
    let _ = writeln!(out, "cac_filter_rate {:.2}", cohort.cac_filter_rate());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn f1_cases() {
        assert_eq!(counts(3, 1, 1).f1(), F1Scores { precision: 0.75, recall: 0.75, f1: 0.75 });
        assert_eq!(counts(5, 0, 0).f1().f1, 1.0);
        assert_eq!(counts(0, 0, 4).f1(), F1Scores { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(counts(0, 0, 0).f1().f1, 0.0);
    }

    #[test]
    fn rate_rounding() {
        use RiskCategory::*;
        let mut pairs = vec![(Mild, Mild); 113];
        pairs.extend(vec![(Zero, Mild); 31]);
        assert_eq!(round2(cac_rate(&pairs).unwrap()), 0.78);
        assert_eq!(format!("{:.2}", 120.0 / 144.0), "0.83");
        assert!(cac_rate(&[]).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\np1\tv.vol\tg.msk\tp.prb\tmild\n\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m[0].volume, PathBuf::from("/data/v.vol"));
        assert_eq!(m[0].true_risk, RiskCategory::Mild);
        assert!(parse_manifest("p1\tv\tg\n", Path::new(".")).is_err());
        assert!(parse_manifest("p1\tv\tg\tp\tbogus\n", Path::new(".")).is_err());
        assert!(parse_manifest("# nothing\n", Path::new(".")).is_err());
    }
}
