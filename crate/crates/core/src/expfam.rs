//! Conjugate exponential-family kernels.
//!
//! Two families are supported: a spherical Gaussian with fixed observation
//! variance and a Normal prior on the mean, and a multinomial over a fixed
//! vocabulary with a symmetric Dirichlet prior. Both are written in the
//! canonical form
//!
//! ```text
//! f(x | phi)           = h(x) exp(eta(phi)' psi(x) - c a(phi))
//! mu(phi | beta, kappa) = exp(beta' eta(phi) - kappa a(phi) - b(beta, kappa))
//! ```
//!
//! so that a cluster posterior is `(beta0 + psi(S), kappa0 + c |S|)` and the
//! posterior predictive is `h(x) exp(b(beta + psi(x), kappa + c) - b(beta, kappa))`.
//! Everything here works in log space.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FamilyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty document (all word counts are zero)")]
    EmptyDocument,
    #[error("invalid word count {0} (must be a nonnegative integer)")]
    InvalidCount(f64),
    #[error("non-finite observation value")]
    NonFinite,
    #[error("invalid posterior parameters: {0}")]
    InvalidParams(&'static str),
    #[error("invalid family spec: {0}")]
    Parse(String),
}

/// Which conjugate pair to use, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyKind {
    /// `x ~ N(phi, sigma^2 I)`, `phi ~ N(0, sigma0^2 I)`.
    Gaussian { sigma: f64, sigma0: f64 },
    /// `x ~ Mult(phi)`, `phi ~ Dir(gamma, ..., gamma)`.
    Multinomial { gamma: f64 },
}

/// A fully specified model: likelihood family, dimension and DP concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    /// Data dimension for the Gaussian family, vocabulary size for the multinomial.
    pub dim: usize,
    /// DP concentration.
    pub alpha: f64,
}

/// Additive sufficient statistics of a sample set.
///
/// `count` may be negative when the value is a difference (a delta payload).
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub psi: Vec<f64>,
    pub count: i64,
}

/// Canonical posterior parameters `(beta, kappa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub beta: Vec<f64>,
    pub kappa: f64,
}

impl SuffStats {
    pub fn zero(dim: usize) -> Self {
        SuffStats {
            psi: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn is_zero(&self) -> bool {
        self.count == 0 && self.psi.iter().all(|&v| v == 0.0)
    }

    /// Componentwise `self + sign * other`.
    pub fn accumulate(&self, other: &SuffStats, sign: i8) -> Result<SuffStats, FamilyError> {
        let mut out = self.clone();
        out.accumulate_in_place(other, sign)?;
        Ok(out)
    }

    pub fn accumulate_in_place(&mut self, other: &SuffStats, sign: i8) -> Result<(), FamilyError> {
        if other.dim() != self.dim() {
            return Err(FamilyError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let s = f64::from(sign.signum());
        for (a, b) in self.psi.iter_mut().zip(&other.psi) {
            *a += s * b;
        }
        self.count += i64::from(sign.signum()) * other.count;
        Ok(())
    }

    /// Add (`sign = 1`) or remove (`sign = -1`) a single observation.
    /// The observation must already be validated against the family.
    pub fn add_observation(&mut self, x: &[f64], sign: i8) {
        let s = f64::from(sign.signum());
        for (a, b) in self.psi.iter_mut().zip(x) {
            *a += s * b;
        }
        self.count += i64::from(sign.signum());
    }
}

impl FamilySpec {
    pub fn gaussian(dim: usize, sigma: f64, sigma0: f64, alpha: f64) -> Self {
        FamilySpec {
            kind: FamilyKind::Gaussian { sigma, sigma0 },
            dim,
            alpha,
        }
    }

    pub fn multinomial(vocab: usize, gamma: f64, alpha: f64) -> Self {
        FamilySpec {
            kind: FamilyKind::Multinomial { gamma },
            dim: vocab,
            alpha,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), FamilyError> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(FamilyError::Parse(format!("{what} must be positive, got {v}")))
            }
        };
        if self.dim == 0 {
            return Err(FamilyError::Parse("dimension must be positive".into()));
        }
        positive(self.alpha, "alpha")?;
        match self.kind {
            FamilyKind::Gaussian { sigma, sigma0 } => {
                positive(sigma, "sigma")?;
                positive(sigma0, "sigma0")
            }
            FamilyKind::Multinomial { gamma } => positive(gamma, "gamma"),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, FamilyKind::Gaussian { .. })
    }

    /// Prior canonical parameters `(beta0, kappa0)`.
    pub fn prior(&self) -> PosteriorParams {
        match self.kind {
            FamilyKind::Gaussian { sigma, sigma0 } => PosteriorParams {
                beta: vec![0.0; self.dim],
                kappa: (sigma * sigma) / (sigma0 * sigma0),
            },
            FamilyKind::Multinomial { gamma } => PosteriorParams {
                beta: vec![gamma; self.dim],
                kappa: self.dim as f64 * gamma,
            },
        }
    }

    pub fn prior_beta_entry(&self) -> f64 {
        match self.kind {
            FamilyKind::Gaussian { .. } => 0.0,
            FamilyKind::Multinomial { gamma } => gamma,
        }
    }

    /// `kappa` increment contributed by one observation. The multinomial
    /// family counts words rather than documents.
    pub fn count_scale(&self, x: &[f64]) -> f64 {
        match self.kind {
            FamilyKind::Gaussian { .. } => 1.0,
            FamilyKind::Multinomial { .. } => x.iter().sum(),
        }
    }

    /// `kappa` increment for a (possibly signed) block of statistics.
    pub fn kappa_increment(&self, stats: &SuffStats) -> f64 {
        match self.kind {
            FamilyKind::Gaussian { .. } => stats.count as f64,
            FamilyKind::Multinomial { .. } => stats.psi.iter().sum(),
        }
    }

    pub fn check_observation(&self, x: &[f64]) -> Result<(), FamilyError> {
        if x.len() != self.dim {
            return Err(FamilyError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FamilyError::NonFinite);
        }
        if let FamilyKind::Multinomial { .. } = self.kind {
            if let Some(&bad) = x.iter().find(|&&v| v < 0.0 || v.fract() != 0.0) {
                return Err(FamilyError::InvalidCount(bad));
            }
            if x.iter().all(|&v| v == 0.0) {
                return Err(FamilyError::EmptyDocument);
            }
        }
        Ok(())
    }

    /// `(psi(x), 1)`. Both families use the identity map.
    pub fn suff_stats(&self, x: &[f64]) -> Result<SuffStats, FamilyError> {
        self.check_observation(x)?;
        Ok(SuffStats {
            psi: x.to_vec(),
            count: 1,
        })
    }

    pub fn posterior_params(&self, stats: &SuffStats) -> Result<PosteriorParams, FamilyError> {
        if stats.dim() != self.dim {
            return Err(FamilyError::DimensionMismatch {
                expected: self.dim,
                got: stats.dim(),
            });
        }
        let mut p = self.prior();
        for (b, s) in p.beta.iter_mut().zip(&stats.psi) {
            *b += s;
        }
        p.kappa += self.kappa_increment(stats);
        Ok(p)
    }

    /// Checked log-partition `b(beta, kappa)`.
    pub fn log_partition(&self, p: &PosteriorParams) -> Result<f64, FamilyError> {
        if p.beta.len() != self.dim {
            return Err(FamilyError::DimensionMismatch {
                expected: self.dim,
                got: p.beta.len(),
            });
        }
        match self.kind {
            FamilyKind::Gaussian { .. } => {
                if p.kappa.is_nan() || p.kappa <= 0.0 {
                    return Err(FamilyError::InvalidParams("kappa must be positive"));
                }
            }
            FamilyKind::Multinomial { .. } => {
                if p.beta.iter().any(|&b| b.is_nan() || b <= 0.0) {
                    return Err(FamilyError::InvalidParams("beta entries must be positive"));
                }
            }
        }
        Ok(self.log_partition_unchecked(&p.beta, p.kappa))
    }

    pub(crate) fn log_partition_unchecked(&self, beta: &[f64], kappa: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian { sigma, .. } => {
                let s2 = sigma * sigma;
                let norm2: f64 = beta.iter().map(|b| b * b).sum();
                0.5 * self.dim as f64 * (2.0 * PI * s2 / kappa).ln() + norm2 / (2.0 * s2 * kappa)
            }
            FamilyKind::Multinomial { .. } => {
                let mut total = 0.0;
                let mut acc = 0.0;
                for &b in beta {
                    acc += ln_gamma(b);
                    total += b;
                }
                acc - ln_gamma(total)
            }
        }
    }

    /// Log partition of the posterior after absorbing `stats` into the prior.
    pub(crate) fn log_partition_of_stats(&self, stats: &SuffStats) -> f64 {
        let b0 = self.prior_beta_entry();
        match self.kind {
            FamilyKind::Gaussian { sigma, sigma0 } => {
                let s2 = sigma * sigma;
                let kappa = s2 / (sigma0 * sigma0) + stats.count as f64;
                let norm2: f64 = stats.psi.iter().map(|b| b * b).sum();
                0.5 * self.dim as f64 * (2.0 * PI * s2 / kappa).ln() + norm2 / (2.0 * s2 * kappa)
            }
            FamilyKind::Multinomial { .. } => {
                let mut total = 0.0;
                let mut acc = 0.0;
                for &s in &stats.psi {
                    let b = b0 + s;
                    acc += ln_gamma(b);
                    total += b;
                }
                acc - ln_gamma(total)
            }
        }
    }

    /// `ln h(x)`: the base measure. For the multinomial this is the log
    /// multinomial coefficient of the document.
    pub fn log_base_measure(&self, x: &[f64]) -> f64 {
        match self.kind {
            FamilyKind::Gaussian { sigma, .. } => {
                let s2 = sigma * sigma;
                let norm2: f64 = x.iter().map(|v| v * v).sum();
                -0.5 * self.dim as f64 * (2.0 * PI * s2).ln() - norm2 / (2.0 * s2)
            }
            FamilyKind::Multinomial { .. } => {
                let len: f64 = x.iter().sum();
                let denom: f64 = x.iter().filter(|&&v| v > 0.0).map(|&v| ln_gamma(v + 1.0)).sum();
                ln_gamma(len + 1.0) - denom
            }
        }
    }

    /// `ln f(x | p)`: posterior-predictive log density (Gaussian) or log mass
    /// including the multinomial coefficient.
    pub fn log_marginal(&self, x: &[f64], p: &PosteriorParams) -> Result<f64, FamilyError> {
        self.check_observation(x)?;
        let base = self.log_partition(p)?;
        Ok(self.log_base_measure(x) + self.log_marginal_ratio(x, p, base))
    }

    /// `b(beta + psi(x), kappa + c) - b(beta, kappa)` given the cached
    /// `b(beta, kappa)`. Allocation-free; inputs are assumed validated.
    pub(crate) fn log_marginal_ratio(&self, x: &[f64], p: &PosteriorParams, log_part: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian { sigma, .. } => {
                let s2 = sigma * sigma;
                let kappa = p.kappa + 1.0;
                let norm2: f64 = p.beta.iter().zip(x).map(|(b, v)| (b + v) * (b + v)).sum();
                let next = 0.5 * self.dim as f64 * (2.0 * PI * s2 / kappa).ln() + norm2 / (2.0 * s2 * kappa);
                next - log_part
            }
            FamilyKind::Multinomial { .. } => {
                // Only the words present in x change.
                let mut total = 0.0;
                let mut len = 0.0;
                let mut acc = 0.0;
                for (&b, &v) in p.beta.iter().zip(x) {
                    total += b;
                    if v > 0.0 {
                        len += v;
                        acc += ln_gamma(b + v) - ln_gamma(b);
                    }
                }
                acc - (ln_gamma(total + len) - ln_gamma(total))
            }
        }
    }
}

impl PosteriorParams {
    /// Add (`sign = 1`) or remove (`sign = -1`) one observation.
    pub(crate) fn absorb(&mut self, spec: &FamilySpec, x: &[f64], sign: f64) {
        for (b, v) in self.beta.iter_mut().zip(x) {
            *b += sign * v;
        }
        self.kappa += sign * spec.count_scale(x);
    }
}

impl fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FamilyKind::Gaussian { sigma, sigma0 } => write!(
                f,
                "gaussian:dim={},sigma={},sigma0={},alpha={}",
                self.dim, sigma, sigma0, self.alpha
            ),
            FamilyKind::Multinomial { gamma } => {
                write!(f, "multinomial:vocab={},gamma={},alpha={}", self.dim, gamma, self.alpha)
            }
        }
    }
}

/// Parses `gaussian:dim=2,sigma=1.0,sigma0=1.0` or
/// `multinomial:vocab=9866,gamma=1.0`. An optional `alpha=` key sets the
/// concentration (default 1).
impl FromStr for FamilySpec {
    type Err = FamilyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut dim = None;
        let mut sigma = 1.0;
        let mut sigma0 = 1.0;
        let mut gamma = 1.0;
        let mut alpha = 1.0;
        for kv in rest.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| FamilyError::Parse(format!("expected key=value, got '{kv}'")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| FamilyError::Parse(format!("bad number '{v}' for '{k}'")))
            };
            match k.trim() {
                "dim" | "vocab" => {
                    dim = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| FamilyError::Parse(format!("bad integer '{v}' for '{k}'")))?,
                    )
                }
                "sigma" => sigma = num(v)?,
                "sigma0" => sigma0 = num(v)?,
                "gamma" => gamma = num(v)?,
                "alpha" => alpha = num(v)?,
                other => return Err(FamilyError::Parse(format!("unknown key '{other}'"))),
            }
        }
        let dim = dim.ok_or_else(|| FamilyError::Parse("missing dim/vocab".into()))?;
        let spec = match name.trim() {
            "gaussian" => FamilySpec::gaussian(dim, sigma, sigma0, alpha),
            "multinomial" => FamilySpec::multinomial(dim, gamma, alpha),
            other => return Err(FamilyError::Parse(format!("unknown family '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `ln(e^a + e^b)`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln sum_i e^{x_i}`, `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn g1() -> FamilySpec {
        FamilySpec::gaussian(1, 1.0, 1.0, 1.0)
    }

    #[test]
    fn suff_stats_identity() {
        let g = FamilySpec::gaussian(2, 1.0, 1.0, 1.0);
        let s = g.suff_stats(&[1.0, -2.0]).unwrap();
        assert_eq!(s.psi, vec![1.0, -2.0]);
        assert_eq!(s.count, 1);

        let m = FamilySpec::multinomial(3, 1.0, 1.0);
        let s = m.suff_stats(&[2.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.psi, vec![2.0, 0.0, 1.0]);
        assert_eq!(s.count, 1);
    }

    #[test]
    fn suff_stats_errors() {
        let g = FamilySpec::gaussian(2, 1.0, 1.0, 1.0);
        assert!(matches!(
            g.suff_stats(&[1.0]),
            Err(FamilyError::DimensionMismatch { expected: 2, got: 1 })
        ));
        let m = FamilySpec::multinomial(3, 1.0, 1.0);
        assert_eq!(m.suff_stats(&[0.0, 0.0, 0.0]), Err(FamilyError::EmptyDocument));
        assert!(m.suff_stats(&[0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let a = SuffStats {
            psi: vec![1.0, 2.0],
            count: 1,
        };
        let b = SuffStats {
            psi: vec![3.0, 4.0],
            count: 2,
        };
        assert_eq!(
            a.accumulate(&b, 1).unwrap(),
            SuffStats {
                psi: vec![4.0, 6.0],
                count: 3
            }
        );
        assert_eq!(a.accumulate(&SuffStats::zero(2), 1).unwrap(), a);
        let c = SuffStats {
            psi: vec![1.0, 1.0],
            count: 1,
        };
        let d = SuffStats {
            psi: vec![3.0, 0.0],
            count: 2,
        };
        assert_eq!(
            c.accumulate(&d, -1).unwrap(),
            SuffStats {
                psi: vec![-2.0, 1.0],
                count: -1
            }
        );
        assert!(a.accumulate(&SuffStats::zero(3), 1).is_err());
    }

    #[test]
    fn posterior_params_examples() {
        let p = g1().posterior_params(&SuffStats::zero(1)).unwrap();
        assert_eq!(
            p,
            PosteriorParams {
                beta: vec![0.0],
                kappa: 1.0
            }
        );
        let p = g1()
            .posterior_params(&SuffStats {
                psi: vec![0.0],
                count: 2,
            })
            .unwrap();
        // posterior precision 1/sigma0^2 + n/sigma^2 = 3, scaled by sigma^2
        assert_eq!(
            p,
            PosteriorParams {
                beta: vec![0.0],
                kappa: 3.0
            }
        );
        let m = FamilySpec::multinomial(2, 1.0, 1.0);
        let p = m
            .posterior_params(&SuffStats {
                psi: vec![1.0, 0.0],
                count: 1,
            })
            .unwrap();
        assert_eq!(
            p,
            PosteriorParams {
                beta: vec![2.0, 1.0],
                kappa: 3.0
            }
        );
    }

    #[test]
    fn log_partition_examples() {
        let b = g1()
            .log_partition(&PosteriorParams {
                beta: vec![0.0],
                kappa: 1.0,
            })
            .unwrap();
        assert_close!(b, 0.918_938_533_204_672_7, 1e-12);
        let b = g1()
            .log_partition(&PosteriorParams {
                beta: vec![0.0],
                kappa: 3.0,
            })
            .unwrap();
        assert_close!(b, 0.5 * (2.0 * PI / 3.0).ln(), 1e-12);
        assert_close!(b, 0.369_632, 1e-6);
        let m = FamilySpec::multinomial(2, 1.0, 1.0);
        let b = m
            .log_partition(&PosteriorParams {
                beta: vec![1.0, 1.0],
                kappa: 2.0,
            })
            .unwrap();
        assert_close!(b, 0.0, 1e-14);
    }

    #[test]
    fn log_partition_rejects_bad_params() {
        assert!(g1()
            .log_partition(&PosteriorParams {
                beta: vec![0.0],
                kappa: 0.0
            })
            .is_err());
        let m = FamilySpec::multinomial(2, 1.0, 1.0);
        assert!(m
            .log_partition(&PosteriorParams {
                beta: vec![1.0, 0.0],
                kappa: 1.0
            })
            .is_err());
    }

    #[test]
    fn log_marginal_examples() {
        let g = g1();
        let lm = g.log_marginal(&[0.0], &g.prior()).unwrap();
        // N(0; 0, 2)
        assert_close!(lm, -0.5 * (4.0 * PI).ln(), 1e-12);
        assert_close!(lm, -1.265_512, 1e-6);

        let m = FamilySpec::multinomial(2, 1.0, 1.0);
        let lm = m.log_marginal(&[1.0, 0.0], &m.prior()).unwrap();
        assert_close!(lm, 0.5f64.ln(), 1e-14);
    }

    #[test]
    fn predictive_concentrates_at_data() {
        let g = FamilySpec::gaussian(1, 1.0, 1.0, 1.0);
        let x0 = 1.5;
        let limit = -0.5 * (2.0 * PI).ln();
        let mut prev_gap = f64::INFINITY;
        for n in [10, 100, 1000] {
            let p = g
                .posterior_params(&SuffStats {
                    psi: vec![x0 * n as f64],
                    count: n,
                })
                .unwrap();
            let gap = (g.log_marginal(&[x0], &p).unwrap() - limit).abs();
            assert!(gap < prev_gap, "n={n}: {gap} !< {prev_gap}");
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }

    #[test]
    fn parse_family_strings() {
        let g: FamilySpec = "gaussian:dim=2,sigma=1.0,sigma0=4".parse().unwrap();
        assert_eq!(g, FamilySpec::gaussian(2, 1.0, 4.0, 1.0));
        let m: FamilySpec = "multinomial:vocab=9866,gamma=1.0".parse().unwrap();
        assert_eq!(m, FamilySpec::multinomial(9866, 1.0, 1.0));
        assert!("gaussian:sigma=1".parse::<FamilySpec>().is_err());
        assert!("poisson:dim=1".parse::<FamilySpec>().is_err());
        assert!("gaussian:dim=1,sigma=-1".parse::<FamilySpec>().is_err());
        let round: FamilySpec = g.to_string().parse().unwrap();
        assert_eq!(round, g);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_close!(log_sum_exp(&[0.0, 0.0]), 2f64.ln(), 1e-15);
        assert_close!(log_add_exp(f64::NEG_INFINITY, 1.5), 1.5, 0.0);
        assert_close!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln(), 1e-12);
    }
}
