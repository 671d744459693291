//! The lookup table from depth configuration to size, compute and measured
//! error, and the endpoint's selection rules over it.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::arch::{AccordionModel, ArchSpec, DepthConfig, Scheme};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::evaluate;
use crate::wire;

/// Bits that fit through `throughput_bps` within `deadline`, rounded down.
pub fn link_budget_bits(throughput_bps: u64, deadline: Duration) -> u64 {
    let bits = u128::from(throughput_bps) * deadline.as_nanos() / 1_000_000_000;
    u64::try_from(bits).unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub scheme: Scheme,
    #[serde(rename = "n")]
    pub kept_units: usize,
    pub size_bits: u64,
    pub mac_count: u64,
    pub layer_fraction: f64,
    pub error_rate: f64,
}

impl ProfileEntry {
    pub fn config(&self) -> DepthConfig {
        DepthConfig {
            scheme: self.scheme,
            kept_units: self.kept_units,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    /// Hex model id as recorded in the wire manifest.
    pub model_id: String,
    pub dataset_id: String,
    /// Unix seconds at which the table was evaluated.
    pub eval_timestamp: u64,
    entries: Vec<ProfileEntry>,
}

impl ProfileTable {
    /// Validates and sorts `entries` by `(scheme, n)`.
    pub fn from_entries(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        eval_timestamp: u64,
        mut entries: Vec<ProfileEntry>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::input("profile table has no entries"));
        }
        entries.sort_by(|a, b| (a.scheme, a.kept_units).cmp(&(b.scheme, b.kept_units)));
        for scheme in Scheme::ALL {
            let rows: Vec<&ProfileEntry> = entries.iter().filter(|e| e.scheme == scheme).collect();
            for (i, e) in rows.iter().enumerate() {
                if e.kept_units != i + 1 {
                    return Err(Error::input(format!(
                        "{scheme} entries must cover n = 1, 2, … without gaps; found n = {} at position {}",
                        e.kept_units,
                        i + 1
                    )));
                }
                if !(0.0..=1.0).contains(&e.error_rate) {
                    return Err(Error::input(format!("error rate {} outside [0, 1]", e.error_rate)));
                }
            }
            for w in rows.windows(2) {
                if w[1].size_bits <= w[0].size_bits || w[1].mac_count <= w[0].mac_count {
                    return Err(Error::input(format!(
                        "{scheme} size and MACs must grow strictly with n (at n = {})",
                        w[1].kept_units
                    )));
                }
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            eval_timestamp,
            entries,
        })
    }

    /// Table whose sizes come from `spec` and whose errors come from `error_of`.
    pub fn from_accounting(
        spec: &ArchSpec,
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        schemes: &[Scheme],
        mut error_of: impl FnMut(&DepthConfig) -> Result<f64>,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for &scheme in schemes {
            for n in 1..=spec.total_units() {
                let config = DepthConfig::new(scheme, n, spec)?;
                let size = spec.size_of(&config);
                entries.push(ProfileEntry {
                    scheme,
                    kept_units: n,
                    size_bits: size.size_bits,
                    mac_count: size.mac_count,
                    layer_fraction: size.layer_fraction,
                    error_rate: error_of(&config)?,
                });
            }
        }
        Self::from_entries(model_id, dataset_id, unix_now(), entries)
    }

    pub fn entries(&self) -> &[ProfileEntry] {
        &self.entries
    }

    pub fn scheme_entries(&self, scheme: Scheme) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.iter().filter(move |e| e.scheme == scheme)
    }

    pub fn entry(&self, scheme: Scheme, n: usize) -> Option<&ProfileEntry> {
        self.scheme_entries(scheme).find(|e| e.kept_units == n)
    }

    /// The same table with every size recomputed at `bits_per_param`.
    pub fn with_bits_per_param(&self, spec: &ArchSpec, bits_per_param: u32) -> Self {
        let spec = ArchSpec {
            bits_per_param,
            ..spec.clone()
        };
        let mut out = self.clone();
        for e in &mut out.entries {
            e.size_bits = spec.size_of(&e.config()).size_bits;
        }
        out
    }

    /// Lowest error among entries of size at most `max_bits`; ties go to the
    /// larger `n`, then to the smaller size.
    pub fn select_by_size(&self, scheme: Scheme, max_bits: u64) -> Result<&ProfileEntry> {
        self.scheme_entries(scheme)
            .filter(|e| e.size_bits <= max_bits)
            .min_by(|a, b| {
                a.error_rate
                    .total_cmp(&b.error_rate)
                    .then(b.kept_units.cmp(&a.kept_units))
                    .then(a.size_bits.cmp(&b.size_bits))
            })
            .ok_or_else(|| Error::Infeasible {
                budget_bits: max_bits,
                smallest_bits: self.smallest_bits(scheme),
            })
    }

    /// Smallest entry whose error is at most `max_error`.
    pub fn select_by_accuracy(&self, scheme: Scheme, max_error: f64) -> Result<&ProfileEntry> {
        if !(0.0..=1.0).contains(&max_error) {
            return Err(Error::config(format!("max_error {max_error} outside [0, 1]")));
        }
        self.scheme_entries(scheme)
            .filter(|e| e.error_rate <= max_error)
            .min_by_key(|e| e.size_bits)
            .ok_or_else(|| Error::UnreachableAccuracy {
                max_error,
                best_error: self
                    .scheme_entries(scheme)
                    .map(|e| e.error_rate)
                    .fold(f64::INFINITY, f64::min),
            })
    }

    pub fn select_by_link(&self, scheme: Scheme, throughput_bps: u64, deadline: Duration) -> Result<&ProfileEntry> {
        if throughput_bps == 0 || deadline.is_zero() {
            return Err(Error::config("throughput and deadline must be positive"));
        }
        self.select_by_size(scheme, link_budget_bits(throughput_bps, deadline))
    }

    fn smallest_bits(&self, scheme: Scheme) -> u64 {
        self.scheme_entries(scheme).map(|e| e.size_bits).min().unwrap_or(0)
    }

    /// CSV with columns `scheme,n,size_bits,mac_count,layer_fraction,error_rate`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::decode(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::decode(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(
        text: &str,
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        eval_timestamp: u64,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ProfileEntry>, _>>()
            .map_err(|e| Error::decode(e.to_string()))?;
        Self::from_entries(model_id, dataset_id, eval_timestamp, entries)
    }
}

/// Evaluates every `(scheme, n)` of `model` on `dataset`.
pub fn build_table(model: &AccordionModel<f32>, schemes: &[Scheme], dataset: &Dataset) -> Result<ProfileTable> {
    if dataset.is_empty() {
        return Err(Error::input("profiling set is empty"));
    }
    let model_id = hex::encode(wire::model_id(model));
    ProfileTable::from_accounting(model.spec(), model_id, dataset.digest(), schemes, |config| {
        evaluate(model, config, dataset)
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
