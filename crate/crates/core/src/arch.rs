//! The depth-elastic residual network.
//!
//! Layout: a dense stem (`input_dim → w₀`, ReLU), `B` blocks of `K` residual
//! units each, fixed parameter-free transitions between blocks of different
//! width, and a dense head (`w_{B−1} → classes`). A residual unit computes
//! `h + W₂·relu(W₁·h + b₁) + b₂`; when it is inactive it is the identity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    axpy, dense_backward, dense_forward, dot, relu_backward, relu_in_place, ParamId, ParamSet, RngState, Scalar,
    Tensor,
};

/// Bits per parameter used by the size accounting unless told otherwise.
pub const ACCOUNTING_BITS_PER_PARAM: u32 = 64;
/// Bits per parameter actually shipped on the wire (`f32`).
pub const PAYLOAD_BITS_PER_PARAM: u32 = 32;

const PARAM_STREAM: u64 = 0;
const TRANSITION_STREAM_BASE: u64 = 1 << 32;

/// Which hidden units a depth configuration keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// Drop units right to left: the last block empties first.
    #[serde(rename = "coml")]
    CoML,
    /// Keep the same number of units in every block.
    #[serde(rename = "blockcoml")]
    BlockCoML,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::CoML, Scheme::BlockCoML];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::CoML => "coml",
            Scheme::BlockCoML => "blockcoml",
        }
    }

    pub fn wire_tag(self) -> u8 {
        match self {
            Scheme::CoML => 0,
            Scheme::BlockCoML => 1,
        }
    }

    pub fn from_wire_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Scheme::CoML),
            1 => Ok(Scheme::BlockCoML),
            other => Err(Error::decode(format!("unknown scheme tag {other}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coml" => Ok(Scheme::CoML),
            "blockcoml" => Ok(Scheme::BlockCoML),
            other => Err(Error::config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Position of a residual unit: block index and position inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId {
    pub block: usize,
    pub pos: usize,
}

impl UnitId {
    pub fn new(block: usize, pos: usize) -> Self {
        Self { block, pos }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}p{}", self.block + 1, self.pos + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub block_widths: Vec<usize>,
    pub units_per_block: usize,
    pub num_classes: usize,
    #[serde(default = "default_bits_per_param")]
    pub bits_per_param: u32,
}

fn default_bits_per_param() -> u32 {
    ACCOUNTING_BITS_PER_PARAM
}

impl Default for ArchSpec {
    /// Three blocks of six width-64 units on 2-D inputs with three classes.
    fn default() -> Self {
        Self {
            input_dim: 2,
            block_widths: vec![64, 64, 64],
            units_per_block: 6,
            num_classes: 3,
            bits_per_param: ACCOUNTING_BITS_PER_PARAM,
        }
    }
}

/// What a transition between blocks `b` and `b+1` does to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Identity,
    /// Averages adjacent pairs; used when the width halves.
    PairAverage,
    /// Fixed seeded Gaussian projection; any other width change.
    Projection,
}

impl TransitionKind {
    pub fn between(from: usize, to: usize) -> Self {
        if from == to {
            TransitionKind::Identity
        } else if from == 2 * to {
            TransitionKind::PairAverage
        } else {
            TransitionKind::Projection
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransitionKind::Identity => "identity",
            TransitionKind::PairAverage => "pair-average",
            TransitionKind::Projection => "projection",
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("input_dim and num_classes must be positive"));
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::config("need at least one block and positive widths"));
        }
        if self.units_per_block == 0 {
            return Err(Error::config("units_per_block must be at least 1"));
        }
        if self.bits_per_param == 0 {
            return Err(Error::config("bits_per_param must be positive"));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.block_widths.len()
    }

    /// `B · K`
    pub fn total_units(&self) -> usize {
        self.num_blocks() * self.units_per_block
    }

    pub fn flat_index(&self, unit: UnitId) -> usize {
        unit.block * self.units_per_block + unit.pos
    }

    pub fn unit_at(&self, flat: usize) -> UnitId {
        UnitId::new(flat / self.units_per_block, flat % self.units_per_block)
    }

    pub fn stem_params(&self) -> u64 {
        let w = self.block_widths[0] as u64;
        self.input_dim as u64 * w + w
    }

    pub fn head_params(&self) -> u64 {
        let w = *self.block_widths.last().unwrap() as u64;
        w * self.num_classes as u64 + self.num_classes as u64
    }

    pub fn unit_params(&self, block: usize) -> u64 {
        let w = self.block_widths[block] as u64;
        2 * (w * w + w)
    }

    pub fn unit_macs(&self, block: usize) -> u64 {
        let w = self.block_widths[block] as u64;
        2 * w * w
    }

    pub fn transition_kinds(&self) -> Vec<TransitionKind> {
        self.block_widths
            .windows(2)
            .map(|w| TransitionKind::between(w[0], w[1]))
            .collect()
    }

    fn transition_macs(&self) -> u64 {
        self.block_widths
            .windows(2)
            .filter(|w| TransitionKind::between(w[0], w[1]) == TransitionKind::Projection)
            .map(|w| (w[0] * w[1]) as u64)
            .sum()
    }

    /// Parameters needed to run `config`: stem, head and the active units.
    pub fn param_count(&self, config: &DepthConfig) -> u64 {
        self.stem_params()
            + self.head_params()
            + unit_priority(config.scheme, self)
                .iter()
                .take(config.kept_units)
                .map(|u| self.unit_params(u.block))
                .sum::<u64>()
    }

    /// Bits shipped for `config` with `f32` payloads.
    pub fn payload_bits(&self, config: &DepthConfig) -> u64 {
        self.param_count(config) * PAYLOAD_BITS_PER_PARAM as u64
    }

    pub fn size_of(&self, config: &DepthConfig) -> SizeReport {
        let active = &unit_priority(config.scheme, self)[..config.kept_units];
        let full = DepthConfig {
            scheme: config.scheme,
            kept_units: self.total_units(),
        };
        let param_count = self.param_count(config);
        let full_params = self.param_count(&full);
        let unit_macs: u64 = active.iter().map(|u| self.unit_macs(u.block)).sum();
        let all_unit_macs: u64 = (0..self.num_blocks())
            .map(|b| self.unit_macs(b) * self.units_per_block as u64)
            .sum();
        let fixed_macs = (self.input_dim * self.block_widths[0]) as u64
            + (*self.block_widths.last().unwrap() * self.num_classes) as u64
            + self.transition_macs();
        let bits = self.bits_per_param as u64;
        SizeReport {
            param_count,
            size_bits: bits_for_params(param_count, self.bits_per_param),
            mac_count: fixed_macs + unit_macs,
            layer_fraction: config.kept_units as f64 / self.total_units() as f64,
            size_fraction: (param_count * bits) as f64 / (full_params * bits) as f64,
            mac_fraction: unit_macs as f64 / all_unit_macs as f64,
        }
    }

    /// Canonical `key=value` lines, in a fixed order.
    pub fn to_kv(&self) -> String {
        let widths: Vec<String> = self.block_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "input_dim={}\nblock_widths={}\nunits_per_block={}\nnum_classes={}\nbits_per_param={}\n",
            self.input_dim,
            widths.join(","),
            self.units_per_block,
            self.num_classes,
            self.bits_per_param
        )
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::decode(format!("arch descriptor lacks `{key}`")))
        }
        fn num<T: FromStr>(s: &str, key: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::decode(format!("bad value `{s}` for `{key}`")))
        }
        let widths = get(map, "block_widths")?
            .split(',')
            .map(|w| num(w, "block_widths"))
            .collect::<Result<Vec<usize>>>()?;
        let spec = Self {
            input_dim: num(get(map, "input_dim")?, "input_dim")?,
            block_widths: widths,
            units_per_block: num(get(map, "units_per_block")?, "units_per_block")?,
            num_classes: num(get(map, "num_classes")?, "num_classes")?,
            bits_per_param: num(get(map, "bits_per_param")?, "bits_per_param")?,
        };
        spec.validate().map_err(|e| Error::decode(e.to_string()))?;
        Ok(spec)
    }
}

/// Parses `key=value` lines; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::decode(format!("descriptor line without `=`: {line}")))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::decode(format!("duplicate descriptor key `{k}`")));
        }
    }
    Ok(map)
}

pub fn bits_for_params(params: u64, bits_per_param: u32) -> u64 {
    params * bits_per_param as u64
}

/// Size and compute accounting for one depth configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeReport {
    pub param_count: u64,
    pub size_bits: u64,
    /// Multiply-accumulates per sample, stem / transitions / head included.
    pub mac_count: u64,
    /// `n / (B·K)`
    pub layer_fraction: f64,
    /// `size_bits(config) / size_bits(full)`
    pub size_fraction: f64,
    /// Active-unit MACs over all-unit MACs.
    pub mac_fraction: f64,
}

/// A `(scheme, n)` pair: keep `n` hidden units in the scheme's priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DepthConfig {
    pub scheme: Scheme,
    pub kept_units: usize,
}

impl DepthConfig {
    pub fn new(scheme: Scheme, kept_units: usize, spec: &ArchSpec) -> Result<Self> {
        if kept_units > spec.total_units() {
            return Err(Error::config(format!(
                "cannot keep {kept_units} units, the network has {}",
                spec.total_units()
            )));
        }
        Ok(Self { scheme, kept_units })
    }

    pub fn full(scheme: Scheme, spec: &ArchSpec) -> Self {
        Self {
            scheme,
            kept_units: spec.total_units(),
        }
    }

    pub fn is_full(&self, spec: &ArchSpec) -> bool {
        self.kept_units == spec.total_units()
    }

    /// Flat `block·K + pos` mask of active units.
    pub fn active_mask(&self, spec: &ArchSpec) -> Vec<bool> {
        let mut mask = vec![false; spec.total_units()];
        for u in unit_priority(self.scheme, spec).into_iter().take(self.kept_units) {
            mask[spec.flat_index(u)] = true;
        }
        mask
    }
}

/// All units in the order a scheme adds them: CoML walks blocks left to
/// right, BlockCoML deals them round-robin across blocks.
pub fn unit_priority(scheme: Scheme, spec: &ArchSpec) -> Vec<UnitId> {
    let (b, k) = (spec.num_blocks(), spec.units_per_block);
    match scheme {
        Scheme::CoML => (0..b).flat_map(|blk| (0..k).map(move |p| UnitId::new(blk, p))).collect(),
        Scheme::BlockCoML => (0..b * k).map(|i| UnitId::new(i % b, i / b)).collect(),
    }
}

pub fn active_set(scheme: Scheme, n: usize, spec: &ArchSpec) -> Result<BTreeSet<UnitId>> {
    let config = DepthConfig::new(scheme, n, spec)?;
    Ok(unit_priority(scheme, spec).into_iter().take(config.kept_units).collect())
}

/// One independently transmissible piece of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Piece {
    Stem,
    Head,
    /// Metadata for every between-block transition (no trainable payload).
    Transitions,
    Unit(UnitId),
}

/// `[stem, head, transitions]` followed by the units in scheme priority, so
/// that the first `3 + n` pieces are exactly what `DepthConfig(scheme, n)` needs.
pub fn chunk_priority(scheme: Scheme, spec: &ArchSpec) -> Vec<Piece> {
    [Piece::Stem, Piece::Head, Piece::Transitions]
        .into_iter()
        .chain(unit_priority(scheme, spec).into_iter().map(Piece::Unit))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct DenseIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct UnitParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl UnitParams {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone)]
enum Transition<T: Scalar> {
    Identity,
    PairAverage,
    Projection(Tensor<T>),
}

impl<T: Scalar> Transition<T> {
    fn build(kind: TransitionKind, from: usize, to: usize, seed: u64, index: usize) -> Self {
        match kind {
            TransitionKind::Identity => Transition::Identity,
            TransitionKind::PairAverage => Transition::PairAverage,
            TransitionKind::Projection => {
                let mut rng = RngState::stream(seed, TRANSITION_STREAM_BASE + index as u64);
                let std = (1.0 / from as f64).sqrt();
                Transition::Projection(normal_tensor(&mut rng, &[to, from], std))
            }
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Transition::Identity => x.clone(),
            Transition::PairAverage => {
                let half = T::from(0.5).unwrap();
                let (rows, cols) = (x.rows(), x.cols() / 2);
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = x.row(r);
                    out.extend((0..cols).map(|j| (row[2 * j] + row[2 * j + 1]) * half));
                }
                Tensor::matrix(rows, cols, out).expect("pair-average shape")
            }
            Transition::Projection(p) => {
                let (rows, outs) = (x.rows(), p.rows());
                let mut out = Vec::with_capacity(rows * outs);
                for r in 0..rows {
                    let row = x.row(r);
                    out.extend((0..outs).map(|o| dot(p.row(o), row)));
                }
                Tensor::matrix(rows, outs, out).expect("projection shape")
            }
        }
    }

    fn backward(&self, dy: Tensor<T>, in_width: usize) -> Tensor<T> {
        match self {
            Transition::Identity => dy,
            Transition::PairAverage => {
                let half = T::from(0.5).unwrap();
                let mut dx = Tensor::zeros(&[dy.rows(), in_width]);
                for r in 0..dy.rows() {
                    let g = dy.row(r).to_vec();
                    let row = dx.row_mut(r);
                    for (j, gj) in g.into_iter().enumerate() {
                        row[2 * j] = gj * half;
                        row[2 * j + 1] = gj * half;
                    }
                }
                dx
            }
            Transition::Projection(p) => {
                let mut dx = Tensor::zeros(&[dy.rows(), in_width]);
                for r in 0..dy.rows() {
                    let g = dy.row(r).to_vec();
                    let row = dx.row_mut(r);
                    for (o, go) in g.into_iter().enumerate() {
                        axpy(go, p.row(o), row);
                    }
                }
                dx
            }
        }
    }

    fn cast<U: Scalar>(&self) -> Transition<U> {
        match self {
            Transition::Identity => Transition::Identity,
            Transition::PairAverage => Transition::PairAverage,
            Transition::Projection(p) => Transition::Projection(p.cast()),
        }
    }
}

fn normal_tensor<T: Scalar>(rng: &mut RngState, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from(z * std).unwrap()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Activations recorded by a forward pass, consumed by [`AccordionModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar> {
    input: Tensor<T>,
    stem_pre: Tensor<T>,
    units: Vec<Option<UnitTrace<T>>>,
    head_input: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone)]
struct UnitTrace<T: Scalar> {
    h_in: Tensor<T>,
    z1: Tensor<T>,
    a1: Tensor<T>,
}

/// The elastic residual network and its parameters.
#[derive(Debug, Clone)]
pub struct AccordionModel<T: Scalar = f32> {
    spec: ArchSpec,
    transition_seed: u64,
    params: ParamSet<T>,
    stem: DenseIds,
    head: DenseIds,
    units: Vec<UnitParams>,
    transitions: Vec<Transition<T>>,
}

impl<T: Scalar> AccordionModel<T> {
    /// Builds a freshly initialised network.
    ///
    /// Dense weights are drawn from `N(0, 2/fan_in)` and biases start at zero.
    /// The second layer of every residual branch is further scaled by
    /// `1/√(B·K)` so that the residual stream does not blow up with depth.
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = RngState::stream(seed, PARAM_STREAM);
        let branch_scale = 1.0 / (spec.total_units() as f64).sqrt();
        Self::assemble_with(spec, seed, |shape, is_bias, branch_out| {
            if is_bias {
                return Tensor::zeros(shape);
            }
            let fan_in = shape[1] as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if branch_out {
                std *= branch_scale;
            }
            normal_tensor(&mut rng, shape, std)
        })
    }

    /// Same layout as [`build`](Self::build) with every parameter zero; the
    /// transitions are still regenerated from `transition_seed`.
    pub fn zeroed(spec: ArchSpec, transition_seed: u64) -> Result<Self> {
        Self::assemble_with(spec, transition_seed, |shape, _, _| Tensor::zeros(shape))
    }

    fn assemble_with(
        spec: ArchSpec,
        seed: u64,
        mut init: impl FnMut(&[usize], bool, bool) -> Tensor<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let w0 = spec.block_widths[0];
        let stem = DenseIds {
            w: params.insert("stem.w", init(&[w0, spec.input_dim], false, false), true)?,
            b: params.insert("stem.b", init(&[w0], true, false), true)?,
        };
        let mut units = Vec::with_capacity(spec.total_units());
        for (b, &w) in spec.block_widths.iter().enumerate() {
            for k in 0..spec.units_per_block {
                let name = |p: &str| format!("unit.{b}.{k}.{p}");
                units.push(UnitParams {
                    w1: params.insert(name("w1"), init(&[w, w], false, false), true)?,
                    b1: params.insert(name("b1"), init(&[w], true, false), true)?,
                    w2: params.insert(name("w2"), init(&[w, w], false, true), true)?,
                    b2: params.insert(name("b2"), init(&[w], true, true), true)?,
                });
            }
        }
        let wl = *spec.block_widths.last().unwrap();
        let head = DenseIds {
            w: params.insert("head.w", init(&[spec.num_classes, wl], false, false), true)?,
            b: params.insert("head.b", init(&[spec.num_classes], true, false), true)?,
        };
        let transitions = spec
            .block_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Transition::build(TransitionKind::between(w[0], w[1]), w[0], w[1], seed, i))
            .collect();
        Ok(Self {
            spec,
            transition_seed: seed,
            params,
            stem,
            head,
            units,
            transitions,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn transition_seed(&self) -> u64 {
        self.transition_seed
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn unit_params(&self, unit: UnitId) -> UnitParams {
        self.units[self.spec.flat_index(unit)]
    }

    /// Parameter entries carried by one transmissible piece, in canonical order.
    pub fn piece_params(&self, piece: Piece) -> Vec<ParamId> {
        match piece {
            Piece::Stem => vec![self.stem.w, self.stem.b],
            Piece::Head => vec![self.head.w, self.head.b],
            Piece::Transitions => vec![],
            Piece::Unit(u) => self.unit_params(u).ids().to_vec(),
        }
    }

    pub fn size_of(&self, config: &DepthConfig) -> SizeReport {
        self.spec.size_of(config)
    }

    pub fn cast<U: Scalar>(&self) -> AccordionModel<U> {
        AccordionModel {
            spec: self.spec.clone(),
            transition_seed: self.transition_seed,
            params: self.params.cast(),
            stem: self.stem,
            head: self.head,
            units: self.units.clone(),
            transitions: self.transitions.iter().map(Transition::cast).collect(),
        }
    }

    /// Marks stem, head and the active units trainable; every other unit frozen.
    pub fn set_trainable_for(&mut self, config: &DepthConfig) {
        let mask = config.active_mask(&self.spec);
        for (i, unit) in self.units.clone().iter().enumerate() {
            for id in unit.ids() {
                self.params.set_trainable(id, mask[i]);
            }
        }
        for id in [self.stem.w, self.stem.b, self.head.w, self.head.b] {
            self.params.set_trainable(id, true);
        }
    }

    fn check_config(&self, config: &DepthConfig) -> Result<()> {
        DepthConfig::new(config.scheme, config.kept_units, &self.spec).map(|_| ())
    }

    /// Logits for `batch` with inactive units acting as the identity.
    pub fn forward(&self, config: &DepthConfig, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_config(config)?;
        self.run(&config.active_mask(&self.spec), batch, false)
            .map(|t| t.logits)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_traced(&self, config: &DepthConfig, batch: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_config(config)?;
        self.run(&config.active_mask(&self.spec), batch, true)
    }

    fn run(&self, mask: &[bool], batch: &Tensor<T>, keep: bool) -> Result<ForwardTrace<T>> {
        batch.check_matrix("model input")?;
        if batch.cols() != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "model input",
                left: vec![batch.rows(), batch.cols()],
                right: vec![batch.rows(), self.spec.input_dim],
            });
        }
        let p = &self.params;
        let stem_pre = dense_forward(p.value(self.stem.w), p.value(self.stem.b), batch)?;
        let mut h = stem_pre.clone();
        relu_in_place(&mut h);
        let mut traces = Vec::with_capacity(self.units.len());
        for b in 0..self.spec.num_blocks() {
            if b > 0 {
                h = self.transitions[b - 1].forward(&h);
            }
            for k in 0..self.spec.units_per_block {
                let flat = b * self.spec.units_per_block + k;
                if !mask[flat] {
                    traces.push(None);
                    continue;
                }
                let u = &self.units[flat];
                let z1 = dense_forward(p.value(u.w1), p.value(u.b1), &h)?;
                let mut a1 = z1.clone();
                relu_in_place(&mut a1);
                let z2 = dense_forward(p.value(u.w2), p.value(u.b2), &a1)?;
                let mut next = h.clone();
                for (o, r) in next.data_mut().iter_mut().zip(z2.data()) {
                    *o = *o + *r;
                }
                if keep {
                    traces.push(Some(UnitTrace { h_in: h, z1, a1 }));
                } else {
                    traces.push(None);
                }
                h = next;
            }
        }
        let logits = dense_forward(p.value(self.head.w), p.value(self.head.b), &h)?;
        Ok(ForwardTrace {
            input: if keep { batch.clone() } else { Tensor::zeros(&[1]) },
            stem_pre,
            units: traces,
            head_input: h,
            logits,
        })
    }

    /// Accumulates parameter gradients for `grad_logits` into the parameter
    /// set. Inactive units in the trace are left untouched.
    /// Returns the number of residual units back-propagated through.
    pub fn backward(&mut self, trace: &ForwardTrace<T>, grad_logits: &Tensor<T>) -> Result<usize> {
        let mut dh = self
            .dense_grad(self.head, &trace.head_input, grad_logits, true)?
            .expect("input grad requested");
        let mut touched = 0;
        for b in (0..self.spec.num_blocks()).rev() {
            for k in (0..self.spec.units_per_block).rev() {
                let flat = b * self.spec.units_per_block + k;
                let Some(ut) = &trace.units[flat] else { continue };
                let u = self.units[flat];
                let da1 = self
                    .dense_grad(DenseIds { w: u.w2, b: u.b2 }, &ut.a1, &dh, true)?
                    .expect("input grad requested");
                let dz1 = relu_backward(&ut.z1, &da1)?;
                let dbranch = self
                    .dense_grad(DenseIds { w: u.w1, b: u.b1 }, &ut.h_in, &dz1, true)?
                    .expect("input grad requested");
                for (d, g) in dh.data_mut().iter_mut().zip(dbranch.data()) {
                    *d = *d + *g;
                }
                touched += 1;
            }
            if b > 0 {
                dh = self.transitions[b - 1].backward(dh, self.spec.block_widths[b - 1]);
            }
        }
        let dstem = relu_backward(&trace.stem_pre, &dh)?;
        self.dense_grad(self.stem, &trace.input, &dstem, false)?;
        Ok(touched)
    }

    fn dense_grad(
        &mut self,
        ids: DenseIds,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut gw = std::mem::replace(&mut self.params.entry_mut(ids.w).grad, Tensor::placeholder());
        let mut gb = std::mem::replace(&mut self.params.entry_mut(ids.b).grad, Tensor::placeholder());
        let result = dense_backward(self.params.value(ids.w), input, grad_out, &mut gw, &mut gb, want_input);
        self.params.entry_mut(ids.w).grad = gw;
        self.params.entry_mut(ids.b).grad = gb;
        result
    }
}
