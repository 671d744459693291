//! The `.acdn` model format: a manifest followed by per-piece chunks in
//! transmission priority.
//!
//! Manifest (all integers little-endian):
//!
//! | field          | bytes |
//! |----------------|-------|
//! | magic `ACDN`   | 4     |
//! | format version | 2     |
//! | model id       | 16    |
//! | descriptor len | 4     |
//! | descriptor     | len   |
//! | total chunks   | 4     |
//! | chunk table    | 29 each: index u32, kind u8, block u16, pos u16, offset u64, length u64, crc32 u32 |
//!
//! Kinds are 0 stem, 1 head, 2 transitions, 3 unit; block and pos are zero
//! for non-unit pieces. Offsets are relative to the first payload byte.
//!
//! A chunk on the wire is a 17-byte header (index u32, kind u8, block u16,
//! pos u16, payload length u32, crc32 u32) followed by the payload: the piece's
//! parameters as `f32` little-endian, each tensor row-major, in the order
//! `W, b` for stem and head and `W1, b1, W2, b2` for a unit.
//!
//! A `.acdn` file is the manifest followed by the concatenated payloads of a
//! priority prefix of the chunks, so any truncation on a chunk boundary is
//! itself a loadable partial model.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::arch::{
    active_set, chunk_priority, parse_kv, AccordionModel, ArchSpec, DepthConfig, Piece, Scheme, UnitId,
    PAYLOAD_BITS_PER_PARAM,
};
use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const MAGIC: &[u8; 4] = b"ACDN";
pub const FORMAT_VERSION: u16 = 1;
pub const TABLE_ENTRY_LEN: usize = 29;
pub const CHUNK_HEADER_LEN: usize = 17;
/// Chunks preceding the first residual unit.
pub const FIXED_CHUNKS: usize = 3;

pub type ModelId = [u8; 16];

/// Identifier derived from the architecture, transition seed and parameter
/// values; independent of the skip scheme.
pub fn model_id(model: &AccordionModel<f32>) -> ModelId {
    let mut h = Sha256::new();
    h.update(model.spec().to_kv().as_bytes());
    h.update(model.transition_seed().to_le_bytes());
    for (_, name, entry) in model.params().iter() {
        h.update(name.as_bytes());
        h.update(f32_bytes(entry.value.data()));
    }
    h.finalize()[..16].try_into().expect("sha256 is 32 bytes")
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn piece_tag(piece: Piece) -> (u8, u16, u16) {
    match piece {
        Piece::Stem => (0, 0, 0),
        Piece::Head => (1, 0, 0),
        Piece::Transitions => (2, 0, 0),
        Piece::Unit(u) => (3, u.block as u16, u.pos as u16),
    }
}

fn piece_from_tag(kind: u8, block: u16, pos: u16) -> Result<Piece> {
    if kind != 3 && (block, pos) != (0, 0) {
        return Err(Error::decode(format!("chunk kind {kind} carries block {block}, pos {pos}")));
    }
    match kind {
        0 => Ok(Piece::Stem),
        1 => Ok(Piece::Head),
        2 => Ok(Piece::Transitions),
        3 => Ok(Piece::Unit(UnitId::new(block.into(), pos.into()))),
        other => Err(Error::decode(format!("unknown chunk kind {other}"))),
    }
}

/// Scalar parameter count carried by `piece`.
pub fn piece_param_count(spec: &ArchSpec, piece: Piece) -> u64 {
    match piece {
        Piece::Stem => spec.stem_params(),
        Piece::Head => spec.head_params(),
        Piece::Transitions => 0,
        Piece::Unit(u) => spec.unit_params(u.block),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkEntry {
    pub index: u32,
    pub piece: Piece,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelManifest {
    pub model_id: ModelId,
    pub spec: ArchSpec,
    pub transition_seed: u64,
    pub scheme: Scheme,
    pub chunks: Vec<ChunkEntry>,
}

impl ModelManifest {
    /// The manifest describing every chunk of `model` in `scheme` priority.
    pub fn for_model(model: &AccordionModel<f32>, scheme: Scheme) -> Self {
        let mut offset = 0;
        let chunks = chunk_priority(scheme, model.spec())
            .into_iter()
            .enumerate()
            .map(|(i, piece)| {
                let payload = piece_payload(model, piece);
                let entry = ChunkEntry {
                    index: i as u32,
                    piece,
                    offset,
                    length: payload.len() as u64,
                    crc32: crc32fast::hash(&payload),
                };
                offset += payload.len() as u64;
                entry
            })
            .collect();
        Self {
            model_id: model_id(model),
            spec: model.spec().clone(),
            transition_seed: model.transition_seed(),
            scheme,
            chunks,
        }
    }

    pub fn total_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn descriptor(&self) -> String {
        let order: Vec<String> = self
            .chunks
            .iter()
            .map(|c| match c.piece {
                Piece::Stem => "stem".to_string(),
                Piece::Head => "head".to_string(),
                Piece::Transitions => "transitions".to_string(),
                Piece::Unit(u) => u.to_string(),
            })
            .collect();
        format!(
            "{}transition_seed={}\nscheme={}\npayload_bits_per_param={}\nchunk_order={}\n",
            self.spec.to_kv(),
            self.transition_seed,
            self.scheme,
            PAYLOAD_BITS_PER_PARAM,
            order.join(",")
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let desc = self.descriptor();
        let mut out = Vec::with_capacity(30 + desc.len() + TABLE_ENTRY_LEN * self.chunks.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_id);
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            let (kind, block, pos) = piece_tag(c.piece);
            out.extend_from_slice(&c.index.to_le_bytes());
            out.push(kind);
            out.extend_from_slice(&block.to_le_bytes());
            out.extend_from_slice(&pos.to_le_bytes());
            out.extend_from_slice(&c.offset.to_le_bytes());
            out.extend_from_slice(&c.length.to_le_bytes());
            out.extend_from_slice(&c.crc32.to_le_bytes());
        }
        out
    }

    /// Decodes a manifest from the front of `bytes`, returning it and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::decode("missing ACDN magic"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let model_id: ModelId = r.take(16)?.try_into().unwrap();
        let desc_len = r.u32()? as usize;
        let desc = std::str::from_utf8(r.take(desc_len)?).map_err(|_| Error::decode("descriptor is not UTF-8"))?;
        let kv = parse_kv(desc)?;
        let spec = ArchSpec::from_kv(&kv)?;
        let field = |k: &str| kv.get(k).ok_or_else(|| Error::decode(format!("descriptor lacks `{k}`")));
        let transition_seed = field("transition_seed")?
            .parse()
            .map_err(|_| Error::decode("bad transition_seed"))?;
        let scheme: Scheme = field("scheme")?.parse().map_err(|_| Error::decode("bad scheme"))?;
        if field("payload_bits_per_param")? != &PAYLOAD_BITS_PER_PARAM.to_string() {
            return Err(Error::decode("unsupported payload precision"));
        }

        let total = r.u32()? as usize;
        let expected = chunk_priority(scheme, &spec);
        if total != expected.len() {
            return Err(Error::decode(format!("manifest lists {total} chunks, architecture has {}", expected.len())));
        }
        let mut chunks = Vec::with_capacity(total);
        let mut offset = 0u64;
        for (i, want) in expected.into_iter().enumerate() {
            let index = r.u32()?;
            let kind = r.u8()?;
            let block = r.u16()?;
            let pos = r.u16()?;
            let entry = ChunkEntry {
                index,
                piece: piece_from_tag(kind, block, pos)?,
                offset: r.u64()?,
                length: r.u64()?,
                crc32: r.u32()?,
            };
            if entry.index as usize != i || entry.piece != want {
                return Err(Error::decode(format!("chunk table entry {i} out of priority order")));
            }
            if entry.offset != offset || entry.length != 4 * piece_param_count(&spec, want) {
                return Err(Error::decode(format!("chunk table entry {i} has a bad offset or length")));
            }
            offset += entry.length;
            chunks.push(entry);
        }
        let manifest = Self {
            model_id,
            spec,
            transition_seed,
            scheme,
            chunks,
        };
        if manifest.descriptor() != desc {
            return Err(Error::decode("descriptor is not canonical"));
        }
        Ok((manifest, r.pos))
    }

    /// Indices of the chunks needed to run with `n` units.
    pub fn chunks_for(&self, n: usize) -> Result<Vec<u32>> {
        DepthConfig::new(self.scheme, n, &self.spec)?;
        Ok((0..(FIXED_CHUNKS + n) as u32).collect())
    }

    /// Payload bytes of the first `FIXED_CHUNKS + n` chunks.
    pub fn payload_bytes_for(&self, n: usize) -> u64 {
        self.chunks[..FIXED_CHUNKS + n].iter().map(|c| c.length).sum()
    }

    fn index_of(&self, piece: Piece) -> u32 {
        self.chunks
            .iter()
            .find(|c| c.piece == piece)
            .map(|c| c.index)
            .expect("every piece is listed")
    }
}

/// Payload bytes of one piece.
fn piece_payload(model: &AccordionModel<f32>, piece: Piece) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * piece_param_count(model.spec(), piece) as usize);
    for id in model.piece_params(piece) {
        out.extend(f32_bytes(model.params().value(id).data()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerChunk {
    pub index: u32,
    pub piece: Piece,
    pub crc32: u32,
    pub payload: Vec<u8>,
}

impl LayerChunk {
    pub fn encode(&self) -> Vec<u8> {
        let (kind, block, pos) = piece_tag(self.piece);
        let mut out = Vec::with_capacity(CHUNK_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.index.to_le_bytes());
        out.push(kind);
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&pos.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.crc32.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let index = r.u32()?;
        let kind = r.u8()?;
        let block = r.u16()?;
        let pos = r.u16()?;
        let len = r.u32()? as usize;
        let crc32 = r.u32()?;
        let payload = r.take(len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::decode("trailing bytes after chunk payload"));
        }
        Ok(Self {
            index,
            piece: piece_from_tag(kind, block, pos)?,
            crc32,
            payload,
        })
    }
}

/// Manifest bytes and the chunks for `config`, in transmission order.
pub fn serialize(model: &AccordionModel<f32>, config: &DepthConfig) -> Result<(Vec<u8>, Vec<LayerChunk>)> {
    let manifest = ModelManifest::for_model(model, config.scheme);
    let chunks = chunks_from(model, &manifest, &manifest.chunks_for(config.kept_units)?);
    Ok((manifest.encode(), chunks))
}

/// The listed chunks of `model`, laid out per `manifest`.
pub fn chunks_from(model: &AccordionModel<f32>, manifest: &ModelManifest, indices: &[u32]) -> Vec<LayerChunk> {
    indices
        .iter()
        .map(|&i| {
            let entry = manifest.chunks[i as usize];
            LayerChunk {
                index: entry.index,
                piece: entry.piece,
                crc32: entry.crc32,
                payload: piece_payload(model, entry.piece),
            }
        })
        .collect()
}

/// Chunks in `active_set(want_n) \ active_set(have_n)`, by index.
pub fn delta_chunks(manifest: &ModelManifest, have_n: usize, want_n: usize) -> Result<Vec<u32>> {
    if have_n > want_n {
        return Err(Error::protocol(format!(
            "downgrade from {have_n} to {want_n} units is local and needs no transfer"
        )));
    }
    let have = active_set(manifest.scheme, have_n, &manifest.spec)?;
    let want = active_set(manifest.scheme, want_n, &manifest.spec)?;
    let mut out: Vec<u32> = want.difference(&have).map(|&u| manifest.index_of(Piece::Unit(u))).collect();
    out.sort_unstable();
    Ok(out)
}

/// A model being received chunk by chunk.
#[derive(Debug, Clone)]
pub struct PartialModel {
    manifest: ModelManifest,
    received: BTreeSet<u32>,
    model: AccordionModel<f32>,
}

impl PartialModel {
    pub fn new(manifest: ModelManifest) -> Result<Self> {
        let model = AccordionModel::zeroed(manifest.spec.clone(), manifest.transition_seed)?;
        Ok(Self {
            manifest,
            received: BTreeSet::new(),
            model,
        })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn received(&self) -> &BTreeSet<u32> {
        &self.received
    }

    /// The materialized network; pieces not yet received are all-zero.
    pub fn model(&self) -> &AccordionModel<f32> {
        &self.model
    }

    /// Verifies `chunk` against its header and the manifest, then loads it.
    pub fn accept(&mut self, chunk: &LayerChunk) -> Result<()> {
        let integrity = |detail: String| Error::Integrity {
            chunk_index: chunk.index,
            detail,
        };
        let entry = *self
            .manifest
            .chunks
            .get(chunk.index as usize)
            .ok_or_else(|| integrity(format!("manifest has {} chunks", self.manifest.total_chunks())))?;
        if entry.piece != chunk.piece {
            return Err(integrity("chunk kind disagrees with the manifest".into()));
        }
        if chunk.payload.len() as u64 != entry.length {
            return Err(integrity(format!(
                "payload is {} bytes, manifest says {}",
                chunk.payload.len(),
                entry.length
            )));
        }
        let actual = crc32fast::hash(&chunk.payload);
        if actual != chunk.crc32 || actual != entry.crc32 {
            return Err(integrity(format!(
                "crc32 {actual:08x} does not match header {:08x} / manifest {:08x}",
                chunk.crc32, entry.crc32
            )));
        }
        let mut values = chunk
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        for id in self.model.piece_params(chunk.piece) {
            let t: &mut Tensor<f32> = self.model.params_mut().value_mut(id);
            for v in t.data_mut() {
                *v = values.next().expect("length checked against manifest");
            }
        }
        self.received.insert(chunk.index);
        Ok(())
    }

    /// Largest configuration whose chunks have all arrived; `None` until stem,
    /// head and transition metadata are in.
    pub fn achievable(&self) -> Option<DepthConfig> {
        if !(0..FIXED_CHUNKS as u32).all(|i| self.received.contains(&i)) {
            return None;
        }
        let spec = &self.manifest.spec;
        let mut n = 0;
        while n < spec.total_units() && self.received.contains(&((FIXED_CHUNKS + n) as u32)) {
            n += 1;
        }
        Some(DepthConfig {
            scheme: self.manifest.scheme,
            kept_units: n,
        })
    }

    /// Runs the received network with `n` units; `n` may not exceed the achievable count.
    pub fn forward(&self, n: usize, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let achievable = self
            .achievable()
            .ok_or_else(|| Error::input("stem, head and transitions have not all arrived"))?;
        if n > achievable.kept_units {
            return Err(Error::input(format!(
                "{n} units requested, only {} received",
                achievable.kept_units
            )));
        }
        self.model.forward(&DepthConfig::new(self.manifest.scheme, n, &self.manifest.spec)?, batch)
    }

    /// The `.acdn` bytes for the received priority prefix.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let n = self.achievable().map(|c| FIXED_CHUNKS + c.kept_units).unwrap_or(0);
        let indices: Vec<u32> = (0..n as u32).collect();
        let mut out = self.manifest.encode();
        for chunk in chunks_from(&self.model, &self.manifest, &indices) {
            out.extend_from_slice(&chunk.payload);
        }
        out
    }
}

/// Builds a partial model from manifest bytes and whatever chunks are given.
pub fn assemble(manifest_bytes: &[u8], chunks: &[LayerChunk]) -> Result<PartialModel> {
    let (manifest, used) = ModelManifest::decode(manifest_bytes)?;
    if used != manifest_bytes.len() {
        return Err(Error::decode("trailing bytes after manifest"));
    }
    let mut partial = PartialModel::new(manifest)?;
    for chunk in chunks {
        partial.accept(chunk)?;
    }
    Ok(partial)
}

/// `.acdn` bytes holding the chunks for `config`.
pub fn to_file_bytes(model: &AccordionModel<f32>, config: &DepthConfig) -> Result<Vec<u8>> {
    let (mut out, chunks) = serialize(model, config)?;
    for chunk in chunks {
        out.extend_from_slice(&chunk.payload);
    }
    Ok(out)
}

/// Loads an `.acdn` file, taking every complete chunk present after the manifest.
pub fn from_file_bytes(bytes: &[u8]) -> Result<PartialModel> {
    let (manifest, mut pos) = ModelManifest::decode(bytes)?;
    let mut partial = PartialModel::new(manifest.clone())?;
    for entry in &manifest.chunks {
        let end = pos + entry.length as usize;
        if end > bytes.len() {
            break;
        }
        let payload = bytes[pos..end].to_vec();
        partial.accept(&LayerChunk {
            index: entry.index,
            piece: entry.piece,
            crc32: crc32fast::hash(&payload),
            payload,
        })?;
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::decode(format!("{} bytes after the last whole chunk", bytes.len() - pos)));
    }
    Ok(partial)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::decode(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
