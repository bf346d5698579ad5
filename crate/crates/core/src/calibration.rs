//! Reliability bins, expected calibration error, reliability diagrams and
//! threshold sweeps.
//!
//! Predictions are grouped into `M` equal bins over confidence, where the
//! confidence of a binary prediction is `max(p, 1-p)`. Bin `m` covers the
//! half-open interval `((m-1)/M, m/M]`; probability 0 lands in bin 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{metrics_report, MetricsReport};
use crate::svg::{fmt, SvgDoc};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// 1-based bin index.
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Fraction of correct predictions; 0 for empty bins.
    pub accuracy: f64,
    /// Mean confidence; 0 for empty bins.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub n: usize,
    pub threshold: f64,
}

/// Confidence of a binary prediction with class-1 probability `p`.
pub fn confidence(p: f64) -> f64 {
    p.max(1.0 - p)
}

fn bin_index(conf: f64, m: usize) -> usize {
    if conf <= 0.0 {
        return 0;
    }
    let idx = (conf * m as f64).ceil() as usize;
    idx.clamp(1, m) - 1
}

/// Group predictions into `m` reliability bins at the given decision
/// threshold (prediction rule: positive iff `p >= threshold`).
pub fn bin_predictions(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
    m: usize,
) -> Result<Vec<CalibrationBin>> {
    if probs.len() != labels.len() {
        return Err(Error::Shape {
            op: "bin_predictions",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {m}")));
    }
    let mut counts = vec![0usize; m];
    let mut conf_sums = vec![0.0; m];
    let mut correct = vec![0usize; m];
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("probability {p} outside [0, 1]")));
        }
        let c = confidence(p);
        let b = bin_index(c, m);
        counts[b] += 1;
        conf_sums[b] += c;
        let pred = (p >= threshold) as u8;
        correct[b] += (pred == y) as usize;
    }
    Ok((0..m)
        .map(|b| CalibrationBin {
            index: b + 1,
            lower: b as f64 / m as f64,
            upper: (b + 1) as f64 / m as f64,
            count: counts[b],
            accuracy: if counts[b] > 0 {
                correct[b] as f64 / counts[b] as f64
            } else {
                0.0
            },
            confidence: if counts[b] > 0 {
                conf_sums[b] / counts[b] as f64
            } else {
                0.0
            },
        })
        .collect())
}

/// `ECE = sum_m (|B_m| / n) * |acc(B_m) - conf(B_m)|`; empty bins
/// contribute nothing.
pub fn expected_calibration_error(bins: &[CalibrationBin], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "ECE of an empty sample set is undefined".into(),
        ));
    }
    let total: usize = bins.iter().map(|b| b.count).sum();
    if total != n {
        return Err(Error::Config(format!(
            "bin counts sum to {total}, expected n = {n}"
        )));
    }
    Ok(bins
        .iter()
        .map(|b| (b.count as f64 / n as f64) * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Bin, score and package a calibration report.
pub fn calibration_report(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
    m: usize,
) -> Result<CalibrationReport> {
    let bins = bin_predictions(probs, labels, threshold, m)?;
    let n = probs.len();
    let ece = if n == 0 {
        0.0
    } else {
        expected_calibration_error(&bins, n)?
    };
    Ok(CalibrationReport {
        bins,
        ece,
        n,
        threshold,
    })
}

/// Render a reliability diagram: the diagonal, per-bin accuracy bars, red
/// gap overlays between accuracy and confidence, a sample-count histogram
/// strip, and the ECE in the caption. Deterministic for a given report.
pub fn reliability_diagram(report: &CalibrationReport) -> String {
    let (width, height) = (520.0, 600.0);
    let (x0, y0, side) = (70.0, 40.0, 400.0);
    let mut doc = SvgDoc::new(width, height);
    let m = report.bins.len().max(1);
    let bw = side / m as f64;

    // frame and diagonal
    doc.line(x0, y0, x0, y0 + side, "black", false);
    doc.line(x0, y0 + side, x0 + side, y0 + side, "black", false);
    doc.line(x0, y0 + side, x0 + side, y0, "gray", true);

    for bin in &report.bins {
        let bx = x0 + (bin.index - 1) as f64 * bw;
        if bin.count == 0 {
            continue;
        }
        // accuracy bar
        let acc_h = bin.accuracy * side;
        doc.rect(bx, y0 + side - acc_h, bw, acc_h, "steelblue", 0.8);
        // calibration gap between accuracy and confidence
        let gap = (bin.confidence - bin.accuracy).abs() * side;
        let top = y0 + side - bin.confidence.max(bin.accuracy) * side;
        doc.rect(bx, top, bw, gap, "red", if gap > 0.0 { 0.45 } else { 0.0 });
    }

    // confidence histogram strip
    let strip_y = y0 + side + 40.0;
    let strip_h = 60.0;
    let max_count = report.bins.iter().map(|b| b.count).max().unwrap_or(0).max(1);
    for bin in &report.bins {
        let bx = x0 + (bin.index - 1) as f64 * bw;
        let h = bin.count as f64 / max_count as f64 * strip_h;
        doc.rect(bx, strip_y + strip_h - h, bw, h, "dimgray", 0.9);
    }

    // axis labels and caption
    doc.text(x0, y0 - 12.0, 13.0, "reliability diagram (accuracy vs confidence)");
    doc.text(x0, strip_y - 8.0, 11.0, "confidence histogram");
    doc.text(
        x0,
        strip_y + strip_h + 30.0,
        13.0,
        &format!(
            "ECE = {} | n = {} | threshold = {}",
            fmt(report.ece),
            report.n,
            fmt(report.threshold)
        ),
    );
    doc.finish()
}

/// One row per threshold: the classification metrics and the ECE.
pub fn threshold_sweep(
    probs: &[f64],
    labels: &[u8],
    thresholds: &[f64],
    m: usize,
) -> Result<Vec<(MetricsReport, f64)>> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold sweep needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "thresholds must be strictly increasing".into(),
        ));
    }
    thresholds
        .iter()
        .map(|&t| {
            let report = metrics_report(probs, labels, t)?;
            let cal = calibration_report(probs, labels, t, m)?;
            Ok((report, cal.ece))
        })
        .collect()
}

/// CSV serialization of a sweep, header
/// `threshold,accuracy,precision,recall,f1,kappa,auc,ece`.
pub fn sweep_to_csv(rows: &[(MetricsReport, f64)]) -> String {
    let mut out = String::from("threshold,accuracy,precision,recall,f1,kappa,auc,ece\n");
    for (r, ece) in rows {
        let auc = r.auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{auc},{:.6}\n",
            r.threshold, r.accuracy, r.precision, r.recall, r.f1, r.kappa, ece
        ));
    }
    out
}

/// CSV serialization of a calibration report, one row per bin.
pub fn calibration_to_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin,lower,upper,count,accuracy,confidence\n");
    for b in &report.bins {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{:.6},{:.6}\n",
            b.index, b.lower, b.upper, b.count, b.accuracy, b.confidence
        ));
    }
    out.push_str(&format!("# ece,{:.12}\n", report.ece));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_binning_example() {
        let probs = [0.55, 0.58, 0.95];
        let labels = [1u8, 0, 1];
        let bins = bin_predictions(&probs, &labels, 0.5, 10).unwrap();
        let b6 = &bins[5];
        assert_eq!(b6.count, 2);
        assert!((b6.confidence - 0.565).abs() < 1e-12);
        assert!((b6.accuracy - 0.5).abs() < 1e-12);
        let b10 = &bins[9];
        assert_eq!(b10.count, 1);
        assert!((b10.confidence - 0.95).abs() < 1e-12);
        assert_eq!(b10.accuracy, 1.0);
    }

    #[test]
    fn all_confident_and_correct_fill_top_bin() {
        let probs = [1.0, 0.0, 1.0];
        let labels = [1u8, 0, 1];
        let bins = bin_predictions(&probs, &labels, 0.5, 10).unwrap();
        assert_eq!(bins[9].count, 3);
        assert_eq!(bins[9].accuracy, 1.0);
        assert_eq!(bins[9].confidence, 1.0);
        assert!(bins[..9].iter().all(|b| b.count == 0));
    }

    #[test]
    fn empty_input_gives_empty_bins() {
        let bins = bin_predictions(&[], &[], 0.5, 10).unwrap();
        assert!(bins.iter().all(|b| b.count == 0));
    }

    #[test]
    fn probability_zero_lands_in_first_bin_of_raw_values() {
        // raw value binning rule check through a degenerate confidence:
        // confidence(0.5) == 0.5 -> bin 5 of 10 ((0.4, 0.5])
        let bins = bin_predictions(&[0.5], &[1], 0.5, 10).unwrap();
        assert_eq!(bins[4].count, 1);
        assert_eq!(bin_index(0.0, 10), 0);
    }

    #[test]
    fn ece_hand_example() {
        let bins = vec![
            CalibrationBin {
                index: 1,
                lower: 0.0,
                upper: 0.5,
                count: 4,
                accuracy: 0.75,
                confidence: 0.55,
            },
            CalibrationBin {
                index: 2,
                lower: 0.5,
                upper: 1.0,
                count: 6,
                accuracy: 1.0,
                confidence: 0.95,
            },
        ];
        let ece = expected_calibration_error(&bins, 10).unwrap();
        assert!((ece - 0.11).abs() < 1e-12, "{ece}");
    }

    #[test]
    fn ece_perfectly_calibrated_is_zero() {
        let bins = vec![CalibrationBin {
            index: 1,
            lower: 0.0,
            upper: 1.0,
            count: 5,
            accuracy: 0.8,
            confidence: 0.8,
        }];
        assert_eq!(expected_calibration_error(&bins, 5).unwrap(), 0.0);
    }

    #[test]
    fn ece_maximal_miscalibration() {
        let bins = vec![CalibrationBin {
            index: 1,
            lower: 0.0,
            upper: 1.0,
            count: 3,
            accuracy: 0.0,
            confidence: 1.0,
        }];
        assert_eq!(expected_calibration_error(&bins, 3).unwrap(), 1.0);
    }

    #[test]
    fn ece_rejects_empty_n() {
        assert!(matches!(
            expected_calibration_error(&[], 0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn diagram_contains_caption_and_is_deterministic() {
        let bins = vec![
            CalibrationBin {
                index: 1,
                lower: 0.0,
                upper: 0.5,
                count: 4,
                accuracy: 0.75,
                confidence: 0.55,
            },
            CalibrationBin {
                index: 2,
                lower: 0.5,
                upper: 1.0,
                count: 6,
                accuracy: 1.0,
                confidence: 0.95,
            },
        ];
        let report = CalibrationReport {
            ece: expected_calibration_error(&bins, 10).unwrap(),
            bins,
            n: 10,
            threshold: 0.5,
        };
        let svg = reliability_diagram(&report);
        assert!(svg.contains("ECE = 0.110"));
        assert_eq!(svg, reliability_diagram(&report));
    }

    #[test]
    fn perfectly_calibrated_diagram_has_zero_height_gaps() {
        let bins = vec![CalibrationBin {
            index: 1,
            lower: 0.0,
            upper: 1.0,
            count: 4,
            accuracy: 0.9,
            confidence: 0.9,
        }];
        let report = CalibrationReport {
            ece: 0.0,
            bins,
            n: 4,
            threshold: 0.5,
        };
        let svg = reliability_diagram(&report);
        assert!(svg.contains("fill=\"red\" fill-opacity=\"0.000\""));
    }

    #[test]
    fn sweep_accuracy_flips_at_boundary() {
        let probs = [0.45, 0.45];
        let labels = [1u8, 1];
        let rows = threshold_sweep(&probs, &labels, &[0.4, 0.5], 10).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0.accuracy, 1.0);
        assert_eq!(rows[1].0.accuracy, 0.0);
    }

    #[test]
    fn sweep_single_threshold_matches_metrics() {
        let probs = [0.2, 0.7, 0.6, 0.9];
        let labels = [0u8, 1, 0, 1];
        let rows = threshold_sweep(&probs, &labels, &[0.5], 10).unwrap();
        let direct = metrics_report(&probs, &labels, 0.5).unwrap();
        assert_eq!(rows[0].0, direct);
    }

    #[test]
    fn sweep_rejects_bad_threshold_lists() {
        let probs = [0.2];
        let labels = [0u8];
        assert!(threshold_sweep(&probs, &labels, &[], 10).is_err());
        assert!(threshold_sweep(&probs, &labels, &[0.5, 0.4], 10).is_err());
    }
}
