//! What a representation contains: kernel alignment between modalities
//! and probe-based information about individual factors.

mod kernel;
mod probe;

pub use kernel::{cka, cka_from_grams, hsic, rbf_bandwidth_median, GramMatrix, Kernel};
pub use probe::{probe, probe_mi, ProbeConfig, ProbeResult};

use crate::autodiff::Tensor;
use crate::error::Result;

/// Labels of one factor with its name and cardinality.
#[derive(Clone, Copy, Debug)]
pub struct FactorLabels<'a> {
    pub name: &'a str,
    pub labels: &'a [usize],
    pub cardinality: usize,
}

/// Fraction of each factor's entropy recoverable by a linear probe, clamped
/// to `[0, 1]`.
pub fn urr(z: &Tensor<f64>, withheld: &[FactorLabels], cfg: &ProbeConfig) -> Result<Vec<(String, f64)>> {
    withheld
        .iter()
        .map(|f| {
            let mi = probe(z, f.labels, f.cardinality, cfg)?.mi_nats;
            let ratio = mi / (f.cardinality as f64).ln();
            Ok((f.name.to_string(), ratio.clamp(0.0, 1.0)))
        })
        .collect()
}

/// Summed probe MI (nats) and mean probe accuracy over provided factors.
pub fn essence_metrics(z: &Tensor<f64>, provided: &[FactorLabels], cfg: &ProbeConfig) -> Result<(f64, f64)> {
    let mut mi = 0.0;
    let mut acc = 0.0;
    for f in provided {
        let r = probe(z, f.labels, f.cardinality, cfg)?;
        mi += r.mi_nats.min((f.cardinality as f64).ln());
        acc += r.test_accuracy;
    }
    let k = provided.len().max(1) as f64;
    Ok((mi, acc / k))
}

/// Measurements of one trained encoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// URR per withheld factor, in world factor order.
    pub urr: Vec<(String, f64)>,
    pub cka: f64,
    pub mi_essence_nats: f64,
    pub essence_accuracy: f64,
    pub temperature_final: f64,
    pub loss_final: f64,
}

impl MetricsReport {
    /// Mean URR over withheld factors; `NaN` when nothing is withheld.
    pub fn urr_mean(&self) -> f64 {
        if self.urr.is_empty() {
            f64::NAN
        } else {
            self.urr.iter().map(|(_, v)| v).sum::<f64>() / self.urr.len() as f64
        }
    }

    pub fn urr_of(&self, factor: &str) -> Option<f64> {
        self.urr.iter().find(|(n, _)| n == factor).map(|(_, v)| *v)
    }

    /// Checks the documented ranges of every field.
    pub fn in_range(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        self.urr.iter().all(|(_, v)| unit(*v))
            && unit(self.cka)
            && self.mi_essence_nats >= 0.0
            && unit(self.essence_accuracy)
            && self.temperature_final > 0.0
            && self.loss_final.is_finite()
    }
}
