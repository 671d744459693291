//! Framed request/offer/chunk messages, the endpoint and client state
//! machines, and a deterministic link simulator.
//!
//! Every frame is a 4-byte big-endian length (covering tag and body), a
//! 1-byte tag and a little-endian body:
//!
//! | tag | message        | body |
//! |-----|----------------|------|
//! | 1   | ModelRequest   | model id (16), scheme u8, deadline_ms u32, throughput_bps u64, has_max_error u8, [max_error f64] |
//! | 2   | ModelOffer     | n u32, predicted_error f64, predicted_transfer_ms f64, flags u8 (bit 0: accuracy unmet), manifest len u32, manifest |
//! | 3   | ChunkData      | a chunk as laid out in [`crate::wire`] |
//! | 4   | TransferDone   | n u32 |
//! | 5   | UpgradeRequest | current n u32, target kind u8 (0 max error, 1 unit count), f64 or u32 |
//! | 6   | ErrorReply     | code u16, detail len u32, UTF-8 detail |

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::arch::{AccordionModel, Scheme, PAYLOAD_BITS_PER_PARAM};
use crate::error::{Error, Result};
use crate::profile::{link_budget_bits, ProfileEntry, ProfileTable};
use crate::wire::{delta_chunks, LayerChunk, ModelId, ModelManifest, PartialModel};

/// Codes carried by [`Message::ErrorReply`].
pub mod code {
    pub const INFEASIBLE: u16 = 1;
    pub const NOT_FOUND: u16 = 2;
    pub const UNREACHABLE: u16 = 3;
    pub const BAD_REQUEST: u16 = 4;
    pub const PROTOCOL: u16 = 5;
}

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 1 << 30;

/// Model id that matches whatever model the endpoint serves.
pub const ANY_MODEL: ModelId = [0; 16];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpgradeTarget {
    MaxError(f64),
    Units(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ModelRequest {
        model_id: ModelId,
        scheme: Scheme,
        deadline_ms: u32,
        throughput_bps: u64,
        max_error: Option<f64>,
    },
    ModelOffer {
        n: u32,
        predicted_error: f64,
        predicted_transfer_ms: f64,
        accuracy_unmet: bool,
        manifest: Vec<u8>,
    },
    ChunkData(LayerChunk),
    TransferDone {
        n: u32,
    },
    UpgradeRequest {
        current_n: u32,
        target: UpgradeTarget,
    },
    ErrorReply {
        code: u16,
        detail: String,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::ModelRequest { .. } => 1,
            Message::ModelOffer { .. } => 2,
            Message::ChunkData(_) => 3,
            Message::TransferDone { .. } => 4,
            Message::UpgradeRequest { .. } => 5,
            Message::ErrorReply { .. } => 6,
        }
    }

    fn error(code: u16, detail: impl Into<String>) -> Self {
        Message::ErrorReply {
            code,
            detail: detail.into(),
        }
    }

    /// The complete frame: length prefix, tag and body.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![self.tag()];
        match self {
            Message::ModelRequest {
                model_id,
                scheme,
                deadline_ms,
                throughput_bps,
                max_error,
            } => {
                body.extend_from_slice(model_id);
                body.push(scheme.wire_tag());
                body.extend_from_slice(&deadline_ms.to_le_bytes());
                body.extend_from_slice(&throughput_bps.to_le_bytes());
                match max_error {
                    Some(e) => {
                        body.push(1);
                        body.extend_from_slice(&e.to_le_bytes());
                    }
                    None => body.push(0),
                }
            }
            Message::ModelOffer {
                n,
                predicted_error,
                predicted_transfer_ms,
                accuracy_unmet,
                manifest,
            } => {
                body.extend_from_slice(&n.to_le_bytes());
                body.extend_from_slice(&predicted_error.to_le_bytes());
                body.extend_from_slice(&predicted_transfer_ms.to_le_bytes());
                body.push(u8::from(*accuracy_unmet));
                body.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
                body.extend_from_slice(manifest);
            }
            Message::ChunkData(chunk) => body.extend(chunk.encode()),
            Message::TransferDone { n } => body.extend_from_slice(&n.to_le_bytes()),
            Message::UpgradeRequest { current_n, target } => {
                body.extend_from_slice(&current_n.to_le_bytes());
                match target {
                    UpgradeTarget::MaxError(e) => {
                        body.push(0);
                        body.extend_from_slice(&e.to_le_bytes());
                    }
                    UpgradeTarget::Units(n) => {
                        body.push(1);
                        body.extend_from_slice(&n.to_le_bytes());
                    }
                }
            }
            Message::ErrorReply { code, detail } => {
                body.extend_from_slice(&code.to_le_bytes());
                body.extend_from_slice(&(detail.len() as u32).to_le_bytes());
                body.extend_from_slice(detail.as_bytes());
            }
        }
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend(body);
        frame
    }

    /// Decodes the tag-and-body part of a frame.
    pub fn decode_body(frame: &[u8]) -> Result<Self> {
        let (&tag, rest) = frame.split_first().ok_or_else(|| Error::protocol("empty frame"))?;
        let mut r = Cursor { bytes: rest, pos: 0 };
        let msg = match tag {
            1 => {
                let model_id = r.take(16)?.try_into().unwrap();
                let scheme = Scheme::from_wire_tag(r.u8()?).map_err(|e| Error::protocol(e.to_string()))?;
                let deadline_ms = r.u32()?;
                let throughput_bps = r.u64()?;
                let max_error = match r.u8()? {
                    0 => None,
                    1 => Some(r.f64()?),
                    other => return Err(Error::protocol(format!("bad max_error flag {other}"))),
                };
                Message::ModelRequest {
                    model_id,
                    scheme,
                    deadline_ms,
                    throughput_bps,
                    max_error,
                }
            }
            2 => {
                let n = r.u32()?;
                let predicted_error = r.f64()?;
                let predicted_transfer_ms = r.f64()?;
                let flags = r.u8()?;
                let len = r.u32()? as usize;
                Message::ModelOffer {
                    n,
                    predicted_error,
                    predicted_transfer_ms,
                    accuracy_unmet: flags & 1 == 1,
                    manifest: r.take(len)?.to_vec(),
                }
            }
            3 => {
                let chunk = LayerChunk::decode(rest).map_err(|e| Error::protocol(e.to_string()))?;
                r.pos = rest.len();
                Message::ChunkData(chunk)
            }
            4 => Message::TransferDone { n: r.u32()? },
            5 => {
                let current_n = r.u32()?;
                let target = match r.u8()? {
                    0 => UpgradeTarget::MaxError(r.f64()?),
                    1 => UpgradeTarget::Units(r.u32()?),
                    other => return Err(Error::protocol(format!("bad upgrade target kind {other}"))),
                };
                Message::UpgradeRequest { current_n, target }
            }
            6 => {
                let code = r.u16()?;
                let len = r.u32()? as usize;
                let detail = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::protocol("error detail is not UTF-8"))?;
                Message::ErrorReply { code, detail }
            }
            other => return Err(Error::protocol(format!("unknown message tag {other}"))),
        };
        if r.pos != rest.len() {
            return Err(Error::protocol(format!("{} trailing bytes in frame", rest.len() - r.pos)));
        }
        Ok(msg)
    }

    /// Decodes one whole frame, length prefix included.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        if frame.len() < 4 {
            return Err(Error::protocol("frame shorter than its length prefix"));
        }
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if len != frame.len() - 4 {
            return Err(Error::protocol(format!("frame says {len} bytes, has {}", frame.len() - 4)));
        }
        Self::decode_body(&frame[4..])
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::protocol("truncated message body"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes one frame.
pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode())?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(Error::protocol(format!("frame length {len} out of range")));
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body)?;
    Message::decode_body(&body).map(Some)
}

/// A reliable, ordered message channel.
pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

/// Frames over any byte stream, such as a `TcpStream`.
pub struct FramedStream<S> {
    stream: S,
}

impl<S: Read + Write> FramedStream<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for FramedStream<S> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        write_frame(&mut self.stream, msg)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        read_frame(&mut self.stream)?.ok_or_else(|| Error::protocol("connection closed by peer"))
    }
}

/// Per-connection endpoint state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Session {
    pub scheme: Option<Scheme>,
    pub delivered_n: Option<usize>,
    /// Every chunk index sent so far.
    pub sent: BTreeSet<u32>,
}

/// Serves one immutable model and its profile table.
#[derive(Debug)]
pub struct Endpoint {
    model: AccordionModel<f32>,
    table: ProfileTable,
    manifests: Vec<(Scheme, ModelManifest, Vec<u8>)>,
}

impl Endpoint {
    /// The table's sizes are re-expressed in payload bits so link budgets
    /// compare against what actually crosses the wire.
    pub fn new(model: AccordionModel<f32>, table: &ProfileTable) -> Result<Self> {
        let manifests: Vec<_> = Scheme::ALL
            .into_iter()
            .map(|s| {
                let m = ModelManifest::for_model(&model, s);
                let bytes = m.encode();
                (s, m, bytes)
            })
            .collect();
        let id = hex::encode(manifests[0].1.model_id);
        if table.model_id != id {
            return Err(Error::config(format!(
                "profile table belongs to model {}, serving {id}",
                table.model_id
            )));
        }
        let table = table.with_bits_per_param(model.spec(), PAYLOAD_BITS_PER_PARAM);
        Ok(Self {
            model,
            table,
            manifests,
        })
    }

    pub fn model(&self) -> &AccordionModel<f32> {
        &self.model
    }

    pub fn model_id(&self) -> ModelId {
        self.manifests[0].1.model_id
    }

    /// Profile table with sizes in payload bits.
    pub fn table(&self) -> &ProfileTable {
        &self.table
    }

    pub fn manifest(&self, scheme: Scheme) -> &ModelManifest {
        &self.manifests.iter().find(|m| m.0 == scheme).expect("all schemes").1
    }

    fn manifest_bytes(&self, scheme: Scheme) -> &[u8] {
        &self.manifests.iter().find(|m| m.0 == scheme).expect("all schemes").2
    }

    /// Replies to one client message, updating `session`.
    pub fn handle(&self, msg: &Message, session: &mut Session) -> Vec<Message> {
        match msg {
            Message::ModelRequest {
                model_id,
                scheme,
                deadline_ms,
                throughput_bps,
                max_error,
            } => self.handle_request(session, model_id, *scheme, *deadline_ms, *throughput_bps, *max_error),
            Message::UpgradeRequest { current_n, target } => self.handle_upgrade(session, *current_n, *target),
            other => vec![Message::error(
                code::PROTOCOL,
                format!("clients may not send message tag {}", other.tag()),
            )],
        }
    }

    fn handle_request(
        &self,
        session: &mut Session,
        model_id: &ModelId,
        scheme: Scheme,
        deadline_ms: u32,
        throughput_bps: u64,
        max_error: Option<f64>,
    ) -> Vec<Message> {
        if *model_id != ANY_MODEL && *model_id != self.model_id() {
            return vec![Message::error(code::NOT_FOUND, format!("unknown model {}", hex::encode(model_id)))];
        }
        if session.delivered_n.is_some() {
            return vec![Message::error(
                code::PROTOCOL,
                "a model was already delivered in this session; send an upgrade request",
            )];
        }
        if deadline_ms == 0 || throughput_bps == 0 {
            return vec![Message::error(code::BAD_REQUEST, "deadline and throughput must be positive")];
        }
        if max_error.is_some_and(|e| !(0.0..=1.0).contains(&e)) {
            return vec![Message::error(code::BAD_REQUEST, "max_error must lie in [0, 1]")];
        }
        let deadline = Duration::from_millis(deadline_ms.into());
        let by_link = match self.table.select_by_link(scheme, throughput_bps, deadline) {
            Ok(e) => e,
            Err(e) => return vec![Message::error(code::INFEASIBLE, e.to_string())],
        };
        let (entry, accuracy_unmet) = match max_error {
            None => (by_link, false),
            Some(max_error) => {
                let budget = link_budget_bits(throughput_bps, deadline);
                let both = self
                    .table
                    .scheme_entries(scheme)
                    .filter(|e| e.size_bits <= budget && e.error_rate <= max_error)
                    .min_by_key(|e| e.kept_units);
                match both {
                    Some(e) => (e, false),
                    None => (by_link, true),
                }
            }
        };
        let n = entry.kept_units;
        let mut replies = vec![Message::ModelOffer {
            n: n as u32,
            predicted_error: entry.error_rate,
            predicted_transfer_ms: entry.size_bits as f64 / throughput_bps as f64 * 1e3,
            accuracy_unmet,
            manifest: self.manifest_bytes(scheme).to_vec(),
        }];
        let manifest = self.manifest(scheme);
        let indices = manifest.chunks_for(n).expect("table n is valid");
        replies.extend(self.chunks(session, manifest, &indices));
        replies.push(Message::TransferDone { n: n as u32 });
        session.scheme = Some(scheme);
        session.delivered_n = Some(n);
        replies
    }

    fn handle_upgrade(&self, session: &mut Session, current_n: u32, target: UpgradeTarget) -> Vec<Message> {
        let (Some(scheme), Some(have)) = (session.scheme, session.delivered_n) else {
            return vec![Message::error(code::PROTOCOL, "upgrade requested before any model was delivered")];
        };
        if current_n as usize != have {
            return vec![Message::error(
                code::BAD_REQUEST,
                format!("client claims {current_n} units, session delivered {have}"),
            )];
        }
        let total = self.model.spec().total_units();
        let want = match target {
            UpgradeTarget::Units(n) if n as usize > total => {
                return vec![Message::error(code::BAD_REQUEST, format!("model has only {total} units"))];
            }
            UpgradeTarget::Units(n) if (n as usize) < have => {
                return vec![Message::error(
                    code::PROTOCOL,
                    format!("downgrade from {have} to {n} units is local and needs no transfer"),
                )];
            }
            UpgradeTarget::Units(n) => n as usize,
            UpgradeTarget::MaxError(e) => match self.table.select_by_accuracy(scheme, e) {
                Ok(entry) => entry.kept_units.max(have),
                Err(Error::UnreachableAccuracy { .. }) => {
                    return vec![Message::error(code::UNREACHABLE, format!("no configuration reaches error {e}"))];
                }
                Err(err) => return vec![Message::error(code::BAD_REQUEST, err.to_string())],
            },
        };
        let manifest = self.manifest(scheme);
        let indices = delta_chunks(manifest, have, want).expect("want ≥ have");
        let mut replies = self.chunks(session, manifest, &indices);
        replies.push(Message::TransferDone { n: want as u32 });
        session.delivered_n = Some(want);
        replies
    }

    fn chunks(&self, session: &mut Session, manifest: &ModelManifest, indices: &[u32]) -> Vec<Message> {
        let fresh: Vec<u32> = indices.iter().copied().filter(|i| session.sent.insert(*i)).collect();
        crate::wire::chunks_from(&self.model, manifest, &fresh)
            .into_iter()
            .map(Message::ChunkData)
            .collect()
    }

    /// Looks up the profile entry the endpoint would report for `(scheme, n)`.
    pub fn entry(&self, scheme: Scheme, n: usize) -> Option<&ProfileEntry> {
        self.table.entry(scheme, n)
    }
}

/// Answers framed requests on one connection until the peer hangs up.
pub fn serve_connection<S: Read + Write>(stream: S, endpoint: &Endpoint) -> Result<()> {
    let mut framed = FramedStream::new(stream);
    let mut session = Session::default();
    loop {
        let msg = match read_frame(&mut framed.stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(Error::Protocol(detail)) => {
                framed.send(&Message::error(code::PROTOCOL, detail))?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        for reply in endpoint.handle(&msg, &mut session) {
            framed.send(&reply)?;
        }
    }
}

/// Accepts connections and serves each on its own thread. With
/// `max_connections`, returns after that many connections have finished.
pub fn serve(listener: TcpListener, endpoint: Arc<Endpoint>, max_connections: Option<usize>) -> Result<()> {
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream: TcpStream = stream?;
        let endpoint = Arc::clone(&endpoint);
        handles.push(std::thread::spawn(move || serve_connection(stream, &endpoint)));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        h.join().map_err(|_| Error::protocol("connection thread panicked"))??;
    }
    Ok(())
}

/// What the client asks for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirements {
    #[serde(default = "default_model_id", with = "hex_id")]
    pub model_id: ModelId,
    pub scheme: Scheme,
    pub deadline_ms: u32,
    pub throughput_bps: u64,
    #[serde(default)]
    pub max_error: Option<f64>,
}

fn default_model_id() -> ModelId {
    ANY_MODEL
}

mod hex_id {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::wire::ModelId;

    pub fn serialize<S: Serializer>(id: &ModelId, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(id))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ModelId, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("model id must be 16 bytes"))
    }
}

impl Requirements {
    pub fn to_message(&self) -> Message {
        Message::ModelRequest {
            model_id: self.model_id,
            scheme: self.scheme,
            deadline_ms: self.deadline_ms,
            throughput_bps: self.throughput_bps,
            max_error: self.max_error,
        }
    }
}

/// The endpoint's answer to a model request.
#[derive(Debug, Clone, PartialEq)]
pub struct Offer {
    pub n: usize,
    pub predicted_error: f64,
    pub predicted_transfer_ms: f64,
    pub accuracy_unmet: bool,
}

/// A single-session client that assembles chunks as they arrive.
pub struct Client<T: Transport> {
    transport: T,
    partial: Option<PartialModel>,
    offer: Option<Offer>,
}

impl<T: Transport> Client<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            partial: None,
            offer: None,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn partial(&self) -> Option<&PartialModel> {
        self.partial.as_ref()
    }

    pub fn into_partial(self) -> Option<PartialModel> {
        self.partial
    }

    pub fn offer(&self) -> Option<&Offer> {
        self.offer.as_ref()
    }

    /// Units delivered so far.
    pub fn delivered_n(&self) -> Option<usize> {
        self.partial.as_ref().and_then(|p| p.achievable()).map(|c| c.kept_units)
    }

    pub fn fetch(&mut self, req: &Requirements) -> Result<&PartialModel> {
        self.fetch_observed(req, |_| {})
    }

    /// Like [`fetch`](Self::fetch), calling `on_chunk` after each chunk is assembled.
    pub fn fetch_observed(&mut self, req: &Requirements, mut on_chunk: impl FnMut(&PartialModel)) -> Result<&PartialModel> {
        if self.partial.is_some() {
            return Err(Error::protocol("this client already holds a model"));
        }
        self.transport.send(&req.to_message())?;
        let (offer, manifest) = match self.transport.recv()? {
            Message::ModelOffer {
                n,
                predicted_error,
                predicted_transfer_ms,
                accuracy_unmet,
                manifest,
            } => (
                Offer {
                    n: n as usize,
                    predicted_error,
                    predicted_transfer_ms,
                    accuracy_unmet,
                },
                manifest,
            ),
            other => return Err(unexpected(other, "ModelOffer")),
        };
        let (manifest, used) = ModelManifest::decode(&manifest)?;
        if used != manifest.encode().len() {
            return Err(Error::protocol("trailing bytes after offered manifest"));
        }
        if req.model_id != ANY_MODEL && manifest.model_id != req.model_id {
            return Err(Error::protocol("offered manifest is for a different model"));
        }
        let partial = PartialModel::new(manifest)?;
        self.partial = Some(partial);
        self.offer = Some(offer.clone());
        let n = self.receive_until_done(&mut on_chunk)?;
        if n != offer.n {
            return Err(Error::protocol(format!("offered {} units, delivered {n}", offer.n)));
        }
        Ok(self.partial.as_ref().unwrap())
    }

    /// Asks for more units; returns the delivered unit count afterwards.
    pub fn upgrade(&mut self, target: UpgradeTarget) -> Result<usize> {
        self.upgrade_observed(target, |_| {})
    }

    pub fn upgrade_observed(&mut self, target: UpgradeTarget, mut on_chunk: impl FnMut(&PartialModel)) -> Result<usize> {
        let current = self
            .delivered_n()
            .ok_or_else(|| Error::protocol("upgrade before any model was fetched"))?;
        self.transport.send(&Message::UpgradeRequest {
            current_n: current as u32,
            target,
        })?;
        self.receive_until_done(&mut on_chunk)
    }

    fn receive_until_done(&mut self, on_chunk: &mut impl FnMut(&PartialModel)) -> Result<usize> {
        loop {
            match self.transport.recv()? {
                Message::ChunkData(chunk) => {
                    let partial = self.partial.as_mut().expect("manifest received");
                    if partial.received().contains(&chunk.index) {
                        return Err(Error::protocol(format!("chunk {} received twice", chunk.index)));
                    }
                    partial.accept(&chunk)?;
                    on_chunk(partial);
                }
                Message::TransferDone { n } => {
                    let n = n as usize;
                    let have = self.delivered_n();
                    if have != Some(n) {
                        return Err(Error::protocol(format!(
                            "transfer declared {n} units but the received chunks give {have:?}"
                        )));
                    }
                    return Ok(n);
                }
                other => return Err(unexpected(other, "ChunkData or TransferDone")),
            }
        }
    }
}

fn unexpected(msg: Message, wanted: &str) -> Error {
    match msg {
        Message::ErrorReply { code, detail } => Error::Remote { code, detail },
        other => Error::protocol(format!("expected {wanted}, got message tag {}", other.tag())),
    }
}

/// Link with a fixed throughput and round-trip time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkModel {
    pub throughput_bps: u64,
    #[serde(default)]
    pub rtt_ns: u64,
}

impl LinkModel {
    pub fn new(throughput_bps: u64, rtt: Duration) -> Result<Self> {
        if throughput_bps == 0 {
            return Err(Error::config("link throughput must be positive"));
        }
        Ok(Self {
            throughput_bps,
            rtt_ns: rtt.as_nanos() as u64,
        })
    }

    /// Time to push `bits` through the link, excluding the round trip, rounded up to whole nanoseconds.
    pub fn serialization_ns(&self, bits: u64) -> u64 {
        (u128::from(bits) * 1_000_000_000).div_ceil(u128::from(self.throughput_bps)) as u64
    }

    /// `rtt + bits / throughput`.
    pub fn transfer_time(&self, bits: u64) -> Duration {
        Duration::from_nanos(self.rtt_ns + self.serialization_ns(bits))
    }
}

/// In-process transport that runs an [`Endpoint`] directly and timestamps
/// every reply with a simulated link clock.
///
/// A request starts a reply burst that arrives one round trip later; each
/// reply then occupies the link for its charged bits. Only chunk payloads are
/// charged unless `charge_overhead` is set, in which case whole frames are.
pub struct LoopbackTransport<'a> {
    endpoint: &'a Endpoint,
    session: Session,
    link: LinkModel,
    charge_overhead: bool,
    inbox: VecDeque<Vec<u8>>,
    now_ns: u64,
    burst_start_ns: u64,
    burst_bits: u64,
    total_bits: u64,
    frame_bytes: u64,
}

impl<'a> LoopbackTransport<'a> {
    pub fn new(endpoint: &'a Endpoint, link: LinkModel, charge_overhead: bool) -> Self {
        Self {
            endpoint,
            session: Session::default(),
            link,
            charge_overhead,
            inbox: VecDeque::new(),
            now_ns: 0,
            burst_start_ns: 0,
            burst_bits: 0,
            total_bits: 0,
            frame_bytes: 0,
        }
    }

    pub fn now(&self) -> Duration {
        Duration::from_nanos(self.now_ns)
    }

    /// Bits charged to the link so far.
    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    /// Bytes of every frame sent in either direction.
    pub fn frame_bytes(&self) -> u64 {
        self.frame_bytes
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    fn charge(&self, frame: &[u8], msg: &Message) -> u64 {
        if self.charge_overhead {
            return frame.len() as u64 * 8;
        }
        match msg {
            Message::ChunkData(c) => c.payload.len() as u64 * 8,
            _ => 0,
        }
    }
}

impl Transport for LoopbackTransport<'_> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = msg.encode();
        self.frame_bytes += frame.len() as u64;
        let decoded = Message::decode(&frame)?;
        for reply in self.endpoint.handle(&decoded, &mut self.session) {
            self.inbox.push_back(reply.encode());
        }
        self.burst_start_ns = self.now_ns + self.link.rtt_ns;
        self.burst_bits = 0;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = self
            .inbox
            .pop_front()
            .ok_or_else(|| Error::protocol("receive with no reply pending"))?;
        self.frame_bytes += frame.len() as u64;
        let msg = Message::decode(&frame)?;
        let bits = self.charge(&frame, &msg);
        self.burst_bits += bits;
        self.total_bits += bits;
        self.now_ns = self.burst_start_ns + self.link.serialization_ns(self.burst_bits);
        Ok(msg)
    }
}

/// One simulated session: an initial fetch followed by upgrades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub link: LinkModel,
    pub requirements: Requirements,
    #[serde(default)]
    pub upgrades: Vec<UpgradeTarget>,
    #[serde(default)]
    pub charge_overhead: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEvent {
    pub event: &'static str,
    pub time: Duration,
    /// Cumulative bits charged to the link.
    pub bits: u64,
    pub achievable_n: Option<usize>,
    pub predicted_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub events: Vec<SessionEvent>,
    /// Chunk indices in the order they arrived.
    pub chunks_received: Vec<u32>,
    pub chunk_payload_bytes: u64,
    pub frame_bytes: u64,
}

impl SessionLog {
    /// CSV with columns `event,time_s,bits,achievable_n,predicted_error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("event,time_s,bits,achievable_n,predicted_error\n");
        for e in &self.events {
            let n = e.achievable_n.map(|n| n.to_string()).unwrap_or_default();
            let err = e.predicted_error.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.event, e.time.as_secs_f64(), e.bits, n, err));
        }
        out
    }

    pub fn last(&self, event: &str) -> Option<&SessionEvent> {
        self.events.iter().rev().find(|e| e.event == event)
    }
}

/// Runs `scenario` against `endpoint` over a [`LoopbackTransport`].
pub fn simulate_session(endpoint: &Endpoint, scenario: &Scenario) -> Result<(SessionLog, PartialModel)> {
    let transport = LoopbackTransport::new(endpoint, scenario.link, scenario.charge_overhead);
    let mut client = Client::new(transport);
    let mut events = Vec::new();
    let mut chunks_received: Vec<u32> = Vec::new();
    let mut chunk_payload_bytes = 0u64;
    let mut record_chunks = |partial: &PartialModel| {
        let fresh: Vec<u32> = partial
            .received()
            .iter()
            .copied()
            .filter(|i| !chunks_received.contains(i))
            .collect();
        for i in fresh {
            chunk_payload_bytes += partial.manifest().chunks[i as usize].length;
            chunks_received.push(i);
        }
    };

    events.push(SessionEvent {
        event: "request",
        time: Duration::ZERO,
        bits: 0,
        achievable_n: None,
        predicted_error: None,
    });
    client.fetch(&scenario.requirements)?;
    record_chunks(client.partial().expect("fetched"));
    let offer = client.offer().cloned().expect("offer received");
    let error_of = |n: usize| endpoint.entry(scenario.requirements.scheme, n).map(|e| e.error_rate);
    events.push(SessionEvent {
        event: "transfer_done",
        time: client.transport().now(),
        bits: client.transport().total_bits(),
        achievable_n: Some(offer.n),
        predicted_error: Some(offer.predicted_error),
    });

    for target in &scenario.upgrades {
        events.push(SessionEvent {
            event: "upgrade_request",
            time: client.transport().now(),
            bits: client.transport().total_bits(),
            achievable_n: client.delivered_n(),
            predicted_error: client.delivered_n().and_then(error_of),
        });
        let n = client.upgrade(*target)?;
        record_chunks(client.partial().expect("fetched"));
        events.push(SessionEvent {
            event: "upgrade_done",
            time: client.transport().now(),
            bits: client.transport().total_bits(),
            achievable_n: Some(n),
            predicted_error: error_of(n),
        });
    }

    let frame_bytes = client.transport().frame_bytes();
    let partial = client.into_partial().expect("fetched");
    Ok((
        SessionLog {
            events,
            chunks_received,
            chunk_payload_bytes,
            frame_bytes,
        },
        partial,
    ))
}
