//! Synthetic interleaved-spiral classification benchmark and its binary file format.
//!
//! File layout (little-endian): magic `ACDS`, `u32` sample count, `u32` feature
//! dimension, `u32` class count, then `count × dim` `f32` features row-major,
//! then `count` `u8` labels.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::{RngState, Tensor};

const MAGIC: &[u8; 4] = b"ACDS";
const HEADER_LEN: usize = 16;

const TRAIN_STREAM: u64 = 0;
const VALIDATION_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Labelled samples held as an `N × dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        features.check_matrix("Dataset::new")?;
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "Dataset::new",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if num_classes == 0 || num_classes > usize::from(u8::MAX) + 1 {
            return Err(Error::input(format!("class count {num_classes} outside 1..=256")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the listed samples, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let x = self.features.select_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.features.len() * 4 + self.len());
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.dim(), self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::decode("not a dataset file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, dim, classes) = (word(0), word(1), word(2));
        let feat_len = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::decode("dataset header overflows"))?;
        if bytes.len() != HEADER_LEN + feat_len + n {
            return Err(Error::decode(format!(
                "dataset body is {} bytes, header implies {}",
                bytes.len() - HEADER_LEN,
                feat_len + n
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let data = body[..feat_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = body[feat_len..].iter().map(|&b| usize::from(b)).collect();
        Dataset::new(Tensor::matrix(n, dim, data)?, labels, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex sha256 of the serialized dataset.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Parameters of the spiral generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpiralSpec {
    pub classes: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Revolutions each arm makes from the centre to radius 1.
    pub turns: f64,
    /// Standard deviation of the isotropic Gaussian jitter.
    pub noise: f64,
    /// Probability that a sample's label is replaced by a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            train: 6000,
            validation: 1000,
            test: 1000,
            turns: 1.5,
            noise: 0.03,
            label_noise: 0.02,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl SpiralSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.classes) {
            return Err(Error::config(format!("spiral classes = {} outside 2..=256", self.classes)));
        }
        if self.train == 0 || self.validation == 0 || self.test == 0 {
            return Err(Error::config("every split needs at least one sample"));
        }
        if !(self.turns > 0.0 && self.turns.is_finite()) {
            return Err(Error::config("turns must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        Ok(Splits {
            train: self.split(self.train, TRAIN_STREAM)?,
            validation: self.split(self.validation, VALIDATION_STREAM)?,
            test: self.split(self.test, TEST_STREAM)?,
        })
    }

    /// One split of `n` samples; class `c` gets `n / K` samples, plus one if
    /// `c < n mod K`. Label noise is applied after balancing, so the balance
    /// holds for the clean class assignment.
    fn split(&self, n: usize, stream: u64) -> Result<Dataset> {
        let mut rng = RngState::stream(self.seed, stream);
        let k = self.classes;
        let jitter = Normal::new(0.0, self.noise).map_err(|e| Error::config(e.to_string()))?;
        let mut rows: Vec<([f32; 2], usize)> = Vec::with_capacity(n);
        for class in 0..k {
            let count = n / k + usize::from(class < n % k);
            for _ in 0..count {
                let t: f64 = rng.random();
                let r = t.sqrt();
                let angle = TAU * (self.turns * r + class as f64 / k as f64);
                let x = r * angle.cos() + jitter.sample(&mut rng);
                let y = r * angle.sin() + jitter.sample(&mut rng);
                let mut label = class;
                if rng.random::<f64>() < self.label_noise {
                    label = (class + rng.random_range(1..k)) % k;
                }
                rows.push(([x as f32, y as f32], label));
            }
        }
        rows.shuffle(&mut rng);
        let data = rows.iter().flat_map(|(x, _)| *x).collect();
        let labels = rows.iter().map(|(_, l)| *l).collect();
        Dataset::new(Tensor::matrix(n, 2, data)?, labels, k)
    }
}
