//! Entropy-gated routing between the seen classifier and the unseen
//! nearest-neighbour search.

use crate::amse::AmseModel;
use crate::autos2v::S2vModel;
use crate::dataio::{ClassId, Domain, GzslDataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, domain_recall, mca, MetricsReport};
use crate::numerics::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 95.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub tau: f64,
    pub calibration_percentile: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { tau: 0.0, calibration_percentile: DEFAULT_PERCENTILE }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::invalid(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !(self.calibration_percentile > 0.0 && self.calibration_percentile < 100.0) {
            return Err(Error::invalid(format!(
                "calibration percentile must lie in (0, 100), got {}",
                self.calibration_percentile
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: ClassId,
    pub domain: Domain,
    pub entropy: f64,
    pub scores: Option<Tensor>,
}

/// Shannon entropy in nats, `0·ln 0 = 0`.
pub fn entropy(probs: &Tensor) -> Result<f64> {
    let p = probs.data();
    if p.is_empty() || p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid("entropy needs a non-empty, non-negative distribution"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Linearly interpolated percentile (0..=100) of `entropies`.
pub fn calibrate_tau(entropies: &[f64], percentile: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::invalid("cannot calibrate tau from an empty list"));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::invalid(format!("percentile {percentile} outside [0, 100]")));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Routes `x` by the entropy of its seen-class probabilities. `semantic` is
/// the `K×E` output of the semantic embedding for all classes.
pub fn gated_predict(
    x: &Tensor,
    amse: &AmseModel,
    s2v: &S2vModel,
    semantic: &Tensor,
    unseen: &[ClassId],
    config: &GateConfig,
) -> Result<Prediction> {
    let probs = amse.predict_probs(x)?;
    let h = entropy(&probs)?;
    if h <= config.tau {
        let class_id = amse.classes[probs.argmax()];
        Ok(Prediction { class_id, domain: Domain::Seen, entropy: h, scores: Some(probs) })
    } else {
        let class_id = s2v.nearest(x, semantic, unseen)?;
        Ok(Prediction { class_id, domain: Domain::Unseen, entropy: h, scores: Some(probs) })
    }
}

/// Both branch answers for one test sample, so any τ can be applied later.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub label: ClassId,
    pub truth: Domain,
    pub entropy: f64,
    pub seen_pred: ClassId,
    pub unseen_pred: ClassId,
}

impl Outcome {
    pub fn route(&self, tau: f64) -> (ClassId, Domain) {
        if self.entropy <= tau {
            (self.seen_pred, Domain::Seen)
        } else {
            (self.unseen_pred, Domain::Unseen)
        }
    }
}

fn test_samples(ds: &GzslDataset) -> impl Iterator<Item = &Sample> {
    ds.test_seen.iter().chain(&ds.test_unseen)
}

/// Outcomes over the seen and unseen test splits, in that order.
pub fn outcomes(ds: &GzslDataset, amse: &AmseModel, s2v: &S2vModel) -> Result<Vec<Outcome>> {
    let semantic = s2v.embed_semantic(&ds.attribute_matrix())?;
    let unseen = ds.unseen_ids();
    test_samples(ds)
        .map(|s| {
            let probs = amse.predict_probs(&s.feature)?;
            Ok(Outcome {
                label: s.label,
                truth: s.domain,
                entropy: entropy(&probs)?,
                seen_pred: amse.classes[probs.argmax()],
                unseen_pred: s2v.nearest(&s.feature, &semantic, &unseen)?,
            })
        })
        .collect()
}

fn report_from(ds: &GzslDataset, routed: &[(ClassId, Domain)], truth: &[(ClassId, Domain)]) -> Result<MetricsReport> {
    let split = |d: Domain| -> (Vec<ClassId>, Vec<ClassId>) {
        routed.iter().zip(truth).filter(|(_, t)| t.1 == d).map(|(r, t)| (r.0, t.0)).unzip()
    };
    let (ps, ls) = split(Domain::Seen);
    let (pu, lu) = split(Domain::Unseen);
    let mca_s = mca(&ps, &ls, &ds.seen_ids())?;
    let mca_u = mca(&pu, &lu, &ds.unseen_ids())?;
    let decided: Vec<Domain> = routed.iter().map(|r| r.1).collect();
    let actual: Vec<Domain> = truth.iter().map(|t| t.1).collect();
    let (r_s, r_u) = domain_recall(&decided, &actual)?;
    Ok(MetricsReport::new(mca_s, mca_u, r_s, r_u))
}

/// Full GZSL metrics at threshold `tau`.
pub fn report_at(ds: &GzslDataset, outcomes: &[Outcome], tau: f64) -> Result<MetricsReport> {
    let routed: Vec<_> = outcomes.iter().map(|o| o.route(tau)).collect();
    let truth: Vec<_> = outcomes.iter().map(|o| (o.label, o.truth)).collect();
    report_from(ds, &routed, &truth)
}

pub fn evaluate(ds: &GzslDataset, amse: &AmseModel, s2v: &S2vModel, tau: f64) -> Result<MetricsReport> {
    report_at(ds, &outcomes(ds, amse, s2v)?, tau)
}

/// Gate-free baseline: nearest class over all of `Y_s ∪ Y_u`; the domain
/// decision is the domain of the chosen class.
pub fn evaluate_ungated(ds: &GzslDataset, s2v: &S2vModel) -> Result<MetricsReport> {
    let semantic = s2v.embed_semantic(&ds.attribute_matrix())?;
    let all = ds.class_ids();
    let mut routed = Vec::new();
    let mut truth = Vec::new();
    for s in test_samples(ds) {
        let c = s2v.nearest(&s.feature, &semantic, &all)?;
        let d = if ds.seen_classes.contains(&c) { Domain::Seen } else { Domain::Unseen };
        routed.push((c, d));
        truth.push((s.label, s.domain));
    }
    report_from(ds, &routed, &truth)
}

/// Entropies of the classifier on the seen validation split.
pub fn val_entropies(ds: &GzslDataset, amse: &AmseModel) -> Result<Vec<f64>> {
    ds.val_seen.iter().map(|s| entropy(&amse.predict_probs(&s.feature)?)).collect()
}

/// One report per grid value; the grid must be non-empty and ascending.
pub fn tau_sweep(ds: &GzslDataset, outcomes: &[Outcome], grid: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
    if grid.is_empty() {
        return Err(Error::invalid("tau grid is empty"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("tau grid must be ascending"));
    }
    grid.iter().map(|&t| Ok((t, report_at(ds, outcomes, t)?))).collect()
}

pub fn sweep_csv(rows: &[(f64, MetricsReport)]) -> String {
    let mut out = format!("tau,{}\n", metrics::CSV_HEADER);
    for (tau, r) in rows {
        out.push_str(&format!("{tau},{r}\n"));
    }
    out
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap()).unwrap(), 0.0);
        let u = entropy(&Tensor::full(&[5], 0.2)).unwrap();
        assert!((u - 5f64.ln()).abs() < 1e-12);
        let h = entropy(&Tensor::vector(vec![0.5, 0.5, 0.0, 0.0]).unwrap()).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(entropy(&Tensor::vector(vec![0.5, 0.6]).unwrap()).is_err());
        assert!(entropy(&Tensor::vector(vec![1.5, -0.5]).unwrap()).is_err());
    }

    #[test]
    fn calibrate_examples() {
        for p in [1.0, 50.0, 99.0] {
            assert_eq!(calibrate_tau(&[0.7; 6], p).unwrap(), 0.7);
        }
        assert_eq!(calibrate_tau(&[4.0, 2.0, 1.0, 3.0], 50.0).unwrap(), 2.5);
        assert_eq!(calibrate_tau(&[4.0, 2.0, 9.0, 3.0], 100.0).unwrap(), 9.0);
        assert!(calibrate_tau(&[], 50.0).is_err());
    }

    #[test]
    fn boundary_entropy_goes_seen() {
        let o = Outcome { label: 0, truth: Domain::Seen, entropy: 1.25, seen_pred: 0, unseen_pred: 9 };
        assert_eq!(o.route(1.25), (0, Domain::Seen));
        assert_eq!(o.route(1.2499), (9, Domain::Unseen));
    }

    #[test]
    fn grid_helpers() {
        assert_eq!(linear_grid(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        let rows = [(0.5, MetricsReport::new(10.0, 20.0, 30.0, 40.0))];
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("tau,mca_s,mca_u,h,r_s,r_u,h_r\n0.5,10.0000,"));
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        assert!(GateConfig { tau: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(GateConfig { calibration_percentile: 100.0, ..Default::default() }.validate().is_err());
    }
}
