//! Distributions over depth configurations, sampled once per training iteration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, DepthConfig, Scheme};
use crate::error::{Error, Result};
use crate::nncore::RngState;
use crate::profile::link_budget_bits;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Always keep `n` units.
    Fixed { n: usize },
    /// Full model with probability `p_full`, otherwise `n` uniform on `1..B·K−1`.
    FullElseUniform { p_full: f64 },
    /// `weights[i]` is the probability of keeping `i + 1` units.
    Categorical { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPolicy {
    pub scheme: Scheme,
    pub total_units: usize,
    #[serde(flatten)]
    pub kind: PolicyKind,
}

impl DepthPolicy {
    pub fn new(scheme: Scheme, total_units: usize, kind: PolicyKind) -> Result<Self> {
        let policy = Self {
            scheme,
            total_units,
            kind,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Conventional training: every iteration trains the full network.
    pub fn baseline(scheme: Scheme, spec: &ArchSpec) -> Self {
        Self {
            scheme,
            total_units: spec.total_units(),
            kind: PolicyKind::Fixed {
                n: spec.total_units(),
            },
        }
    }

    pub fn full_else_uniform(scheme: Scheme, spec: &ArchSpec, p_full: f64) -> Result<Self> {
        Self::new(scheme, spec.total_units(), PolicyKind::FullElseUniform { p_full })
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_units == 0 {
            return Err(Error::config("policy over an empty network"));
        }
        match &self.kind {
            PolicyKind::Fixed { n } => {
                if *n == 0 || *n > self.total_units {
                    return Err(Error::config(format!("fixed n = {n} outside 1..={}", self.total_units)));
                }
            }
            PolicyKind::FullElseUniform { p_full } => {
                if !(0.0..=1.0).contains(p_full) {
                    return Err(Error::config(format!("p_full = {p_full} outside [0, 1]")));
                }
            }
            PolicyKind::Categorical { weights } => {
                if weights.len() != self.total_units {
                    return Err(Error::config(format!(
                        "categorical policy needs {} weights, got {}",
                        self.total_units,
                        weights.len()
                    )));
                }
                if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return Err(Error::config("categorical weights must be finite and non-negative"));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::config(format!("categorical weights sum to {sum}, not 1")));
                }
            }
        }
        Ok(())
    }

    /// Probability of keeping exactly `n` units.
    pub fn probability(&self, n: usize) -> f64 {
        let total = self.total_units;
        if n == 0 || n > total {
            return 0.0;
        }
        match &self.kind {
            PolicyKind::Fixed { n: fixed } => f64::from(u8::from(*fixed == n)),
            PolicyKind::FullElseUniform { p_full } => {
                if total == 1 {
                    1.0
                } else if n == total {
                    *p_full
                } else {
                    (1.0 - p_full) / (total - 1) as f64
                }
            }
            PolicyKind::Categorical { weights } => weights[n - 1],
        }
    }

    /// Expected number of kept units.
    pub fn expected_units(&self) -> f64 {
        (1..=self.total_units).map(|n| n as f64 * self.probability(n)).sum()
    }

    pub fn sample(&self, rng: &mut RngState) -> DepthConfig {
        let total = self.total_units;
        let kept_units = match &self.kind {
            PolicyKind::Fixed { n } => *n,
            PolicyKind::FullElseUniform { p_full } => {
                if total == 1 || rng.random::<f64>() < *p_full {
                    total
                } else {
                    rng.random_range(1..total)
                }
            }
            PolicyKind::Categorical { weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = Some(i + 1);
                        break;
                    }
                }
                // rounding can leave u ≥ Σw; fall back to the last supported n
                pick.unwrap_or_else(|| weights.iter().rposition(|w| *w > 0.0).map_or(total, |i| i + 1))
            }
        };
        DepthConfig {
            scheme: self.scheme,
            kept_units,
        }
    }

    /// Communication-driven policy: weight each `n` by how often the link
    /// budget `throughput × deadline` makes `n` the largest configuration that
    /// fits. Budgets below every configuration count towards `n = 1`.
    pub fn from_throughput(
        throughput_samples_bps: &[u64],
        deadline: Duration,
        size_fn: impl Fn(usize) -> u64,
        scheme: Scheme,
        total_units: usize,
    ) -> Result<Self> {
        if throughput_samples_bps.is_empty() {
            return Err(Error::config("no throughput samples"));
        }
        if deadline.is_zero() {
            return Err(Error::config("deadline must be positive"));
        }
        let sizes: Vec<u64> = (0..=total_units).map(&size_fn).collect();
        let mut counts = vec![0u64; total_units];
        for &t in throughput_samples_bps {
            let budget = link_budget_bits(t, deadline);
            let best = (0..=total_units).rev().find(|&n| sizes[n] <= budget).unwrap_or(0);
            counts[best.max(1) - 1] += 1;
        }
        Self::from_counts(scheme, &counts)
    }

    /// Requirement-driven policy: each requested size maps to the smallest
    /// `n ≥ 1` whose size covers it (or the full model when none does).
    pub fn from_size_requests(
        histogram: &BTreeMap<u64, u64>,
        size_fn: impl Fn(usize) -> u64,
        scheme: Scheme,
        total_units: usize,
    ) -> Result<Self> {
        if histogram.values().all(|&f| f == 0) {
            return Err(Error::config("empty size-request histogram"));
        }
        let sizes: Vec<u64> = (0..=total_units).map(&size_fn).collect();
        let mut counts = vec![0u64; total_units];
        for (&requested, &freq) in histogram {
            let n = (1..=total_units).find(|&n| sizes[n] >= requested).unwrap_or(total_units);
            counts[n - 1] += freq;
        }
        Self::from_counts(scheme, &counts)
    }

    fn from_counts(scheme: Scheme, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        let weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::new(scheme, counts.len(), PolicyKind::Categorical { weights })
    }
}

/// The named training policies used in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyName {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "coml-05")]
    Coml05,
    #[serde(rename = "coml-03")]
    Coml03,
    #[serde(rename = "blockcoml-05")]
    BlockComl05,
    #[serde(rename = "blockcoml-03")]
    BlockComl03,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::Baseline,
        PolicyName::Coml05,
        PolicyName::Coml03,
        PolicyName::BlockComl05,
        PolicyName::BlockComl03,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Baseline => "baseline",
            PolicyName::Coml05 => "coml-05",
            PolicyName::Coml03 => "coml-03",
            PolicyName::BlockComl05 => "blockcoml-05",
            PolicyName::BlockComl03 => "blockcoml-03",
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            PolicyName::Baseline | PolicyName::Coml05 | PolicyName::Coml03 => Scheme::CoML,
            PolicyName::BlockComl05 | PolicyName::BlockComl03 => Scheme::BlockCoML,
        }
    }

    pub fn p_full(self) -> f64 {
        match self {
            PolicyName::Baseline => 1.0,
            PolicyName::Coml05 | PolicyName::BlockComl05 => 0.5,
            PolicyName::Coml03 | PolicyName::BlockComl03 => 0.3,
        }
    }

    pub fn policy(self, spec: &ArchSpec) -> DepthPolicy {
        match self {
            PolicyName::Baseline => DepthPolicy::baseline(Scheme::CoML, spec),
            other => DepthPolicy::full_else_uniform(other.scheme(), spec, other.p_full())
                .expect("named policies are valid"),
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown policy `{s}`")))
    }
}
