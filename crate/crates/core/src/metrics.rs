//! Classification metrics and the confusion heatmap.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores of one set of predictions. Serializes with keys in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f_measure: f64,
    /// Support-weighted mean of the per-class F-Measures.
    pub weighted_f_measure: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_measure: Vec<f64>,
    pub support: Vec<u64>,
    /// Classes without test samples; their F-Measure is reported as 0.
    pub empty_classes: Vec<usize>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Invalid(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes,
                });
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("confusion matrix is not square".into()));
        }
        let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
        let predicted: Vec<u64> = (0..c).map(|j| confusion.iter().map(|row| row[j]).sum()).collect();
        let total: u64 = support.iter().sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision: Vec<f64> = (0..c).map(|k| ratio(confusion[k][k], predicted[k])).collect();
        let recall: Vec<f64> = (0..c).map(|k| ratio(confusion[k][k], support[k])).collect();
        let f_measure: Vec<f64> = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
            .collect();
        let trace: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let weighted = f_measure.iter().zip(&support).map(|(&f, &s)| f * s as f64).sum::<f64>();
        Ok(MetricsReport {
            samples: total as usize,
            accuracy: ratio(trace, total),
            macro_f_measure: if c == 0 { 0.0 } else { f_measure.iter().sum::<f64>() / c as f64 },
            weighted_f_measure: if total == 0 { 0.0 } else { weighted / total as f64 },
            precision,
            recall,
            f_measure,
            empty_classes: (0..c).filter(|&k| support[k] == 0).collect(),
            support,
            confusion,
        })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader(format!("metrics report: {e}")))
    }

    /// Accuracy restricted to samples whose true class is in `classes`.
    pub fn accuracy_on(&self, classes: &[usize]) -> f64 {
        let hit: u64 = classes.iter().map(|&k| self.confusion[k][k]).sum();
        let total: u64 = classes.iter().map(|&k| self.support[k]).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Confusion rows divided by their support; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .zip(&self.support)
            .map(|(row, &s)| row.iter().map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 }).collect())
            .collect()
    }
}

/// Pixels per confusion cell in the heatmap.
pub const CELL: usize = 16;
/// Colour of a zero cell.
pub const RAMP_LOW: [u8; 3] = [255, 255, 255];
/// Colour of a cell holding its whole row.
pub const RAMP_HIGH: [u8; 3] = [8, 48, 107];

pub fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    std::array::from_fn(|i| (RAMP_LOW[i] as f64 + (RAMP_HIGH[i] as f64 - RAMP_LOW[i] as f64) * v).round() as u8)
}

/// Binary (P6) pixmap of the row-normalized confusion matrix.
pub fn heatmap_ppm(report: &MetricsReport) -> Vec<u8> {
    let c = report.classes();
    let side = c * CELL;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    let norm = report.row_normalized();
    for y in 0..side {
        for x in 0..side {
            out.extend(ramp(norm[y / CELL][x / CELL]));
        }
    }
    out
}

pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_confusion_csv(text: &str) -> Result<Vec<Vec<u64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|cell| {
                    cell.trim()
                        .parse()
                        .map_err(|_| Error::Invalid(format!("bad confusion count {cell:?}")))
                })
                .collect()
        })
        .collect()
}

/// Writes the heatmap to `path` and the raw counts next to it with a `.csv`
/// extension.
pub fn emit_heatmap(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, heatmap_ppm(report))?;
    fs::write(path.with_extension("csv"), confusion_csv(&report.confusion))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn two_class_hand_example() {
        let r = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.f_measure, vec![0.75, 0.75]);
        assert_eq!(r.macro_f_measure, 0.75);
    }

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 2, 1];
        let r = MetricsReport::from_predictions(3, &t, &t).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.f_measure.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn empty_class_flagged_and_zero() {
        let r = MetricsReport::from_predictions(3, &[0, 0, 1], &[0, 2, 1]).unwrap();
        assert_eq!(r.empty_classes, vec![2]);
        assert_eq!(r.f_measure[2], 0.0);
        assert!((r.macro_f_measure - (r.f_measure[0] + r.f_measure[1]) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uneven_example_macro_and_weighted() {
        // truth 0: 4 samples (3 right, 1 -> class 1); truth 1: 2 samples (both right)
        let r = MetricsReport::from_confusion(vec![vec![3, 1], vec![0, 2]]).unwrap();
        let f0 = 2.0 * 1.0 * 0.75 / 1.75;
        let f1 = 2.0 * (2.0 / 3.0) * 1.0 / (2.0 / 3.0 + 1.0);
        assert!((r.f_measure[0] - f0).abs() < 1e-12 && (r.f_measure[1] - f1).abs() < 1e-12);
        assert!((r.macro_f_measure - (f0 + f1) / 2.0).abs() < 1e-12);
        assert!((r.weighted_f_measure - (4.0 * f0 + 2.0 * f1) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn json_keys_in_fixed_order() {
        let json = MetricsReport::from_confusion(vec![vec![1, 0], vec![0, 1]]).unwrap().to_json();
        let keys = ["\"samples\"", "\"accuracy\"", "\"macro_f_measure\"", "\"weighted_f_measure\"", "\"confusion\""];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{json}");
    }

    #[test]
    fn json_round_trip() {
        let r = MetricsReport::from_confusion(vec![vec![3, 1], vec![0, 2]]).unwrap();
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert!(MetricsReport::from_json("{}").is_err());
    }

    fn pixel(ppm: &[u8], side: usize, x: usize, y: usize) -> [u8; 3] {
        let header = format!("P6\n{side} {side}\n255\n").len();
        let i = header + 3 * (y * side + x);
        [ppm[i], ppm[i + 1], ppm[i + 2]]
    }

    #[test]
    fn identity_heatmap_is_diagonal() {
        let r = MetricsReport::from_confusion(vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 9]]).unwrap();
        let ppm = heatmap_ppm(&r);
        let side = 3 * CELL;
        for y in (0..side).step_by(5) {
            for x in (0..side).step_by(5) {
                let want = if x / CELL == y / CELL { RAMP_HIGH } else { RAMP_LOW };
                assert_eq!(pixel(&ppm, side, x, y), want);
            }
        }
    }

    #[test]
    fn uniform_heatmap_is_flat() {
        let r = MetricsReport::from_confusion(vec![vec![4, 4], vec![7, 7]]).unwrap();
        let ppm = heatmap_ppm(&r);
        let header = format!("P6\n{0} {0}\n255\n", 2 * CELL).len();
        assert!(ppm[header..].chunks(3).all(|p| p == ramp(0.5)));
    }

    #[test]
    fn heatmap_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricsReport::from_confusion(vec![vec![2, 1], vec![0, 3]]).unwrap();
        emit_heatmap(&r, dir.path().join("h.ppm")).unwrap();
        let csv = fs::read_to_string(dir.path().join("h.csv")).unwrap();
        assert_eq!(parse_confusion_csv(&csv).unwrap(), r.confusion);
        assert!(fs::read(dir.path().join("h.ppm")).unwrap().starts_with(b"P6\n32 32\n255\n"));
    }

    proptest! {
        #[test]
        fn report_invariants(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
            let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = MetricsReport::from_predictions(4, &truth, &pred).unwrap();
            let trace: u64 = (0..4).map(|k| r.confusion[k][k]).sum();
            prop_assert_eq!(r.accuracy, trace as f64 / truth.len() as f64);
            for k in 0..4 {
                prop_assert_eq!(r.confusion[k].iter().sum::<u64>(), truth.iter().filter(|&&t| t == k).count() as u64);
                prop_assert!((0.0..=1.0).contains(&r.f_measure[k]));
                let fp: u64 = (0..4).filter(|&t| t != k).map(|t| r.confusion[t][k]).sum();
                let fn_: u64 = r.support[k] - r.confusion[k][k];
                let perfect = fp == 0 && fn_ == 0 && r.support[k] > 0;
                prop_assert_eq!(r.f_measure[k] == 1.0, perfect);
            }
            prop_assert_eq!(parse_confusion_csv(&confusion_csv(&r.confusion)).unwrap(), r.confusion.clone());
        }
    }
}
