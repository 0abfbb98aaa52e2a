//! GZSL evaluation: class-balanced accuracy, harmonic mean and domain recall.
//! All values are percentages.

use std::collections::BTreeMap;
use std::fmt;

use crate::dataio::{ClassId, Domain};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "mca_s,mca_u,h,r_s,r_u,h_r";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub mca_s: f64,
    pub mca_u: f64,
    pub h: f64,
    pub r_s: f64,
    pub r_u: f64,
    pub h_r: f64,
}

impl MetricsReport {
    /// Fills in both harmonic means.
    pub fn new(mca_s: f64, mca_u: f64, r_s: f64, r_u: f64) -> Self {
        MetricsReport { mca_s, mca_u, h: harmonic(mca_s, mca_u), r_s, r_u, h_r: harmonic(r_s, r_u) }
    }

    pub fn csv_row(&self) -> String {
        self.to_string()
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let vals = line
            .trim()
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::parse(format!("bad metric {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let [mca_s, mca_u, h, r_s, r_u, h_r] = vals[..] else {
            return Err(Error::parse(format!("expected 6 metrics, got {}", vals.len())));
        };
        Ok(MetricsReport { mca_s, mca_u, h, r_s, r_u, h_r })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.mca_s, self.mca_u, self.h, self.r_s, self.r_u, self.h_r
        )
    }
}

/// `2ab/(a+b)`, zero when both are zero.
pub fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Unweighted mean over `classes` of per-class top-1 accuracy.
pub fn mca(predictions: &[ClassId], labels: &[ClassId], classes: &[ClassId]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::invalid("mean class accuracy over an empty class set"));
    }
    let mut tally: BTreeMap<ClassId, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        if let Some(t) = tally.get_mut(&y) {
            t.1 += 1;
            if p == y {
                t.0 += 1;
            }
        }
    }
    let mut total = 0.0;
    for (class, (hit, n)) in &tally {
        if *n == 0 {
            return Err(Error::invalid(format!("class {class} has no samples")));
        }
        total += *hit as f64 / *n as f64;
    }
    Ok(100.0 * total / tally.len() as f64)
}

/// Percent of seen samples routed seen and unseen samples routed unseen.
pub fn domain_recall(routed: &[Domain], truth: &[Domain]) -> Result<(f64, f64)> {
    if routed.len() != truth.len() {
        return Err(Error::dim(format!("{} decisions for {} samples", routed.len(), truth.len())));
    }
    let recall = |d: Domain| -> Result<f64> {
        let n = truth.iter().filter(|&&t| t == d).count();
        if n == 0 {
            return Err(Error::invalid(format!("no {d:?} samples to measure recall")));
        }
        let hit = routed.iter().zip(truth).filter(|&(&r, &t)| t == d && r == d).count();
        Ok(100.0 * hit as f64 / n as f64)
    };
    Ok((recall(Domain::Seen)?, recall(Domain::Unseen)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mca_examples() {
        assert_eq!(mca(&[1, 2, 2], &[1, 2, 2], &[1, 2]).unwrap(), 100.0);
        assert_eq!(mca(&[1, 1, 1, 1, 9], &[1, 1, 1, 1, 2], &[1, 2]).unwrap(), 50.0);
        let preds = [0, 1, 9, 9, 9];
        let labels = [0, 1, 1, 2, 2];
        assert!((mca(&preds, &labels, &[0, 1, 2]).unwrap() - 50.0).abs() < 1e-12);
        let err = mca(&[0], &[0], &[0, 7]).unwrap_err();
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic(64.4, 73.2) - 68.5).abs() <= 0.05);
        assert!((harmonic(42.0, 42.0) - 42.0).abs() < 1e-12);
        assert_eq!(harmonic(0.0, 88.0), 0.0);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
    }

    #[test]
    fn recall_examples() {
        use Domain::*;
        assert_eq!(domain_recall(&[Seen, Unseen], &[Seen, Unseen]).unwrap(), (100.0, 100.0));
        assert_eq!(domain_recall(&[Seen, Seen], &[Seen, Unseen]).unwrap(), (100.0, 0.0));
        let mut truth = vec![Seen; 10];
        truth.extend([Unseen; 4]);
        let mut routed = vec![Seen; 8];
        routed.extend([Unseen, Unseen, Unseen, Unseen, Unseen, Seen]);
        assert_eq!(domain_recall(&routed, &truth).unwrap(), (80.0, 75.0));
        assert!(domain_recall(&[Seen], &[Seen]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let r = MetricsReport::new(50.0, 25.0, 90.0, 60.0);
        assert!((r.h - 100.0 / 3.0).abs() < 1e-12);
        let back = MetricsReport::parse_csv_row(&r.csv_row()).unwrap();
        assert_eq!(back.csv_row(), r.csv_row());
    }
}
