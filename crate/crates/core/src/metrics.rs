//! Clustering scores and run traces.

use std::collections::HashMap;
use std::io::Write;

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::Dataset;
use crate::expfam::{FamilyError, FamilySpec, SuffStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("partitions have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("empty partition")]
    Empty,
    #[error(transparent)]
    Family(#[from] FamilyError),
}

/// Variation of information between two labelings, in nats.
pub fn variation_of_information(a: &[u64], b: &[u64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut joint: HashMap<(u64, u64), f64> = HashMap::new();
    let mut ca: HashMap<u64, f64> = HashMap::new();
    let mut cb: HashMap<u64, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
    }
    let n = a.len() as f64;
    // VI = -sum_ij p_ij [ln(p_ij / p_i) + ln(p_ij / p_j)]
    let vi: f64 = joint
        .iter()
        .map(|(&(x, y), &nij)| -(nij / n) * ((nij / ca[&x]).ln() + (nij / cb[&y]).ln()))
        .sum();
    Ok(vi.max(0.0))
}

/// `sum_i ln h(x_i)` over a dataset.
pub fn sum_log_base_measure(ds: &Dataset, spec: &FamilySpec) -> f64 {
    ds.rows().map(|x| spec.log_base_measure(x)).sum()
}

/// `sum_k [b(beta_k, kappa_k) - b(beta_0, kappa_0)]` over cluster statistics.
pub fn stats_log_likelihood<'a>(spec: &FamilySpec, stats: impl IntoIterator<Item = &'a SuffStats>) -> f64 {
    let b0 = spec.log_partition_of_stats(&SuffStats::zero(spec.dim));
    stats
        .into_iter()
        .filter(|s| s.count > 0)
        .map(|s| spec.log_partition_of_stats(s) - b0)
        .sum()
}

/// CRP prior of a partition with the given cluster sizes.
pub fn crp_log_prior(alpha: f64, counts: impl IntoIterator<Item = i64>) -> f64 {
    let mut n = 0.0;
    let mut lp = 0.0;
    for c in counts.into_iter().filter(|&c| c > 0) {
        lp += alpha.ln() + ln_gamma(c as f64);
        n += c as f64;
    }
    lp - (ln_gamma(alpha + n) - ln_gamma(alpha))
}

/// Collapsed joint log score of a labeling: the marginal likelihood of the
/// data given the partition, plus the CRP prior when `include_crp`.
pub fn joint_log_likelihood(
    ds: &Dataset,
    z: &[u64],
    spec: &FamilySpec,
    include_crp: bool,
) -> Result<f64, MetricsError> {
    if z.len() != ds.len() {
        return Err(MetricsError::LengthMismatch(ds.len(), z.len()));
    }
    if ds.dim() != spec.dim {
        return Err(FamilyError::DimensionMismatch {
            expected: spec.dim,
            got: ds.dim(),
        }
        .into());
    }
    let mut clusters: HashMap<u64, SuffStats> = HashMap::new();
    let mut log_h = 0.0;
    for (x, &label) in ds.rows().zip(z) {
        spec.check_observation(x)?;
        log_h += spec.log_base_measure(x);
        clusters
            .entry(label)
            .or_insert_with(|| SuffStats::zero(spec.dim))
            .add_observation(x, 1);
    }
    let mut score = stats_log_likelihood(spec, clusters.values()) + log_h;
    if include_crp {
        score += crp_log_prior(spec.alpha, clusters.values().map(|s| s.count));
    }
    Ok(score)
}

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: u64,
    pub ms: u64,
    pub loglik: f64,
    pub k: usize,
    pub msgs: u64,
    pub bytes: u64,
    pub mode: String,
}

/// Writes `iter,ms,loglik,K,msgs,bytes,mode`. With `zero_time` the `ms`
/// column is written as 0 so that traces of seeded runs compare equal.
pub fn write_trace<W: Write>(w: W, records: &[TraceRecord], zero_time: bool) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iter", "ms", "loglik", "K", "msgs", "bytes", "mode"])?;
    for r in records {
        let ms = if zero_time { 0 } else { r.ms };
        out.write_record([
            r.iter.to_string(),
            ms.to_string(),
            r.loglik.to_string(),
            r.k.to_string(),
            r.msgs.to_string(),
            r.bytes.to_string(),
            r.mode.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
