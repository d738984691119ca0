//! Two-party private inference over additive shares in a prime field.
//!
//! Homomorphic encryption is replaced by a dealer that hands the client
//! `W r - s` during the offline phase; the garbled-circuit ReLU is replaced
//! by an ideal box that takes both parties' shares and returns the next
//! layer's masked input to the server. What is simulated exactly is the
//! share algebra, the fixed-point schedule and the message flow.
//!
//! Online schedule for a model with `L` dense layers:
//! - client -> server `share` (layer 0): `y0 - r0`
//! - for each layer `i < L-1`: client -> server `gc_in` (`q_C || r_i || r_{i+1}`),
//!   then the ideal box delivers `gc_out` = `relu(z_i) >> s - r_{i+1}` to the server
//! - server -> client `share` (layer `L-1`): the server's share of the logits

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::stats::chi_square_uniform;

/// Largest Mersenne prime below 2^64 that keeps products in `u128`.
pub const DEFAULT_MODULUS: u64 = (1 << 61) - 1;
pub const DEFAULT_SCALE_BITS: u32 = 12;
pub const DEFAULT_GUARD_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub p: u64,
}

impl Field {
    pub fn new(p: u64) -> Result<Self> {
        if !(3..1 << 63).contains(&p) || !is_prime(p) {
            return Err(Error::InvalidArgument(format!("modulus {p} is not an odd prime below 2^63")));
        }
        Ok(Self { p })
    }

    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.p {
            s - self.p
        } else {
            s
        }
    }

    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.p - b
        }
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.p as u128) as u64
    }

    pub fn from_signed(&self, v: i128) -> u64 {
        v.rem_euclid(self.p as i128) as u64
    }

    /// Representative in `(-p/2, p/2]`.
    pub fn to_signed(&self, v: u64) -> i128 {
        if v > self.p / 2 {
            v as i128 - self.p as i128
        } else {
            v as i128
        }
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.random_range(0..self.p)
    }

    pub fn random_vec<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u64> {
        (0..n).map(|_| self.random(rng)).collect()
    }

    /// `W x` for row-major `w` with `x.len()` columns.
    pub fn matvec(&self, w: &[u64], x: &[u64]) -> Vec<u64> {
        let cols = x.len();
        w.chunks(cols.max(1))
            .map(|row| {
                let acc: u128 = row.iter().zip(x).map(|(&a, &b)| self.mul(a, b) as u128).sum();
                (acc % self.p as u128) as u64
            })
            .collect()
    }

    pub fn add_vec(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter().zip(b).map(|(&x, &y)| self.add(x, y)).collect()
    }

    pub fn sub_vec(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter().zip(b).map(|(&x, &y)| self.sub(x, y)).collect()
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for q in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n.is_multiple_of(q) {
            return n == q;
        }
    }
    // deterministic Miller-Rabin for 64-bit inputs
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let pow = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mul(r, b);
            }
            b = mul(b, b);
            e >>= 1;
        }
        r
    };
    let (mut d, mut s) = (n - 1, 0);
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Reals as scaled integers in the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub field: Field,
    pub scale_bits: u32,
    pub guard_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self { field: Field { p: DEFAULT_MODULUS }, scale_bits: DEFAULT_SCALE_BITS, guard_bits: DEFAULT_GUARD_BITS }
    }
}

impl FixedPointCodec {
    pub fn new(modulus: u64, scale_bits: u32, guard_bits: u32) -> Result<Self> {
        let field = Field::new(modulus)?;
        if (2 * scale_bits + guard_bits) as f64 >= (modulus as f64).log2() {
            return Err(Error::InvalidArgument(format!(
                "modulus {modulus} leaves no room for scale {scale_bits} and guard {guard_bits}"
            )));
        }
        Ok(Self { field, scale_bits, guard_bits })
    }

    /// Largest accepted input magnitude, `p / 2^(2s + guard)`.
    pub fn input_bound(&self) -> f64 {
        self.field.p as f64 / 2f64.powi((2 * self.scale_bits + self.guard_bits) as i32)
    }

    /// Pre-truncation values must stay strictly below this magnitude.
    pub fn value_bound(&self) -> i128 {
        (self.field.p as i128 / 2) >> self.guard_bits
    }

    fn encode_at(&self, x: f64, bits: u32) -> Result<u64> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("cannot encode {x}")));
        }
        if x.abs() >= self.input_bound() {
            return Err(Error::Overflow { layer: 0, detail: format!("{x} exceeds the codec bound") });
        }
        let v = (x * 2f64.powi(bits as i32)).round() as i128;
        Ok(self.field.from_signed(v))
    }

    /// `round(x * 2^s) mod p`.
    pub fn encode(&self, x: f64) -> Result<u64> {
        self.encode_at(x, self.scale_bits)
    }

    pub fn decode(&self, v: u64) -> f64 {
        self.field.to_signed(v) as f64 / 2f64.powi(self.scale_bits as i32)
    }

    /// Floor division of the signed representative by `2^s`.
    pub fn truncate(&self, v: u64) -> u64 {
        self.field.from_signed(self.field.to_signed(v) >> self.scale_bits)
    }

    pub fn check_bound(&self, layer: usize, z: &[u64]) -> Result<()> {
        let bound = self.value_bound();
        match z.iter().position(|&v| self.field.to_signed(v).abs() >= bound) {
            None => Ok(()),
            Some(i) => Err(Error::Overflow {
                layer,
                detail: format!("element {i} = {} reaches the bound {bound}", self.field.to_signed(z[i])),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayer {
    /// `out x in`, row-major rows.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Defaults to true for hidden layers and false for the last layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relu: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
    #[serde(default = "default_scale")]
    pub scale_bits: u32,
    #[serde(default = "default_modulus")]
    pub modulus: u64,
    #[serde(default = "default_guard")]
    pub guard_bits: u32,
}

fn default_scale() -> u32 {
    DEFAULT_SCALE_BITS
}
fn default_modulus() -> u64 {
    DEFAULT_MODULUS
}
fn default_guard() -> u32 {
    DEFAULT_GUARD_BITS
}

impl Model {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        Self { layers, scale_bits: DEFAULT_SCALE_BITS, modulus: DEFAULT_MODULUS, guard_bits: DEFAULT_GUARD_BITS }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn codec(&self) -> Result<FixedPointCodec> {
        FixedPointCodec::new(self.modulus, self.scale_bits, self.guard_bits)
    }

    /// Dense layer sizes `[in0, out0 = in1, ...]`, checked for consistency.
    pub fn dims(&self) -> Result<Vec<usize>> {
        let first =
            self.layers.first().ok_or_else(|| Error::DimensionMismatch { layer: 0, detail: "no layers".into() })?;
        let mut dims = vec![first.weights.first().map_or(0, Vec::len)];
        for (i, l) in self.layers.iter().enumerate() {
            let cols = *dims.last().expect("nonempty");
            if l.weights.is_empty() || l.weights.iter().any(|r| r.len() != cols) || cols == 0 {
                return Err(Error::DimensionMismatch {
                    layer: i,
                    detail: format!("rows must all have {cols} columns"),
                });
            }
            if l.bias.len() != l.weights.len() {
                return Err(Error::DimensionMismatch {
                    layer: i,
                    detail: format!("{} biases for {} rows", l.bias.len(), l.weights.len()),
                });
            }
            dims.push(l.weights.len());
        }
        Ok(dims)
    }

    /// Weights at scale `s`, biases at scale `2s`.
    pub fn encode(&self) -> Result<EncodedModel> {
        let codec = self.codec()?;
        self.dims()?;
        let n = self.layers.len();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let at = |e: Error| match e {
                    Error::Overflow { detail, .. } => Error::Overflow { layer: i, detail },
                    other => other,
                };
                let w = l.weights.iter().flatten().map(|&x| codec.encode(x)).collect::<Result<Vec<_>>>().map_err(at)?;
                let b = l
                    .bias
                    .iter()
                    .map(|&x| codec.encode_at(x, 2 * codec.scale_bits))
                    .collect::<Result<Vec<_>>>()
                    .map_err(at)?;
                Ok(EncodedLayer {
                    rows: l.weights.len(),
                    cols: l.weights[0].len(),
                    w,
                    b,
                    relu: l.relu.unwrap_or(i + 1 < n),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedModel { codec, layers })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLayer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<u64>,
    pub b: Vec<u64>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedModel {
    pub codec: FixedPointCodec,
    pub layers: Vec<EncodedLayer>,
}

impl EncodedModel {
    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn encode_input(&self, x: &[f64]) -> Result<Vec<u64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                detail: format!("input has {} values, expected {}", x.len(), self.input_dim()),
            });
        }
        x.iter().map(|&v| self.codec.encode(v)).collect()
    }
}

// ---------------------------------------------------------------------------
// offline phase

/// `W r - s` in the field, as the dealer computes it.
pub fn blind(field: &Field, w: &[u64], r: &[u64], s: &[u64]) -> Vec<u64> {
    field.sub_vec(&field.matvec(w, r), s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientMaterial {
    /// Mask for the input of each layer.
    pub r: Vec<Vec<u64>>,
    /// `W_i r_i - s_i` per layer.
    pub blinded: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerMaterial {
    pub s: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OfflineMaterial {
    pub client: ClientMaterial,
    pub server: ServerMaterial,
}

pub fn offline_phase<R: Rng + ?Sized>(model: &EncodedModel, rng: &mut R) -> OfflineMaterial {
    let f = model.codec.field;
    let mut client = ClientMaterial { r: Vec::new(), blinded: Vec::new() };
    let mut server = ServerMaterial { s: Vec::new() };
    for l in &model.layers {
        let r = f.random_vec(l.cols, rng);
        let s = f.random_vec(l.rows, rng);
        client.blinded.push(blind(&f, &l.w, &r, &s));
        client.r.push(r);
        server.s.push(s);
    }
    OfflineMaterial { client, server }
}

// ---------------------------------------------------------------------------
// messages and transports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    Share = 0,
    GcIn = 1,
    GcOut = 2,
}

impl MsgType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(MsgType::Share),
            1 => Ok(MsgType::GcIn),
            2 => Ok(MsgType::GcOut),
            other => Err(Error::Wire(format!("unknown message type {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: MsgType,
    pub layer: u32,
    pub payload: Vec<u64>,
}

impl Message {
    pub fn new(msg_type: MsgType, layer: usize, payload: Vec<u64>) -> Self {
        Self { msg_type, layer: layer as u32, payload }
    }

    /// `[u8 type][u32 layer LE][u64 count LE][count x u64 LE]`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.payload.len());
        self.encode_into(&mut out);
        out
    }

    /// Reads one frame from the front of `bytes`; returns it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
        let short = || Error::Wire("truncated frame".into());
        if bytes.len() < 13 {
            return Err(short());
        }
        let msg_type = MsgType::from_byte(bytes[0])?;
        let layer = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes"));
        let count = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let need = count.checked_mul(8).and_then(|n| n.checked_add(13)).ok_or_else(short)?;
        if (bytes.len() as u64) < need {
            return Err(short());
        }
        let payload = bytes[13..need as usize]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Message { msg_type, layer, payload }, need as usize))
    }

    fn read_from(r: &mut impl Read) -> Result<Message> {
        let mut head = [0u8; 13];
        r.read_exact(&mut head)?;
        let count = u64::from_le_bytes(head[5..13].try_into().expect("8 bytes"));
        if count > (1 << 32) {
            return Err(Error::Wire(format!("frame claims {count} elements")));
        }
        let mut body = vec![0u8; 8 * count as usize];
        r.read_exact(&mut body)?;
        let mut frame = head.to_vec();
        frame.extend_from_slice(&body);
        Ok(Message::decode(&frame)?.0)
    }
}

pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

/// One end of an in-process duplex queue carrying wire frames.
#[derive(Debug)]
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn duplex() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (ChannelTransport { tx: a_tx, rx: a_rx }, ChannelTransport { tx: b_tx, rx: b_rx })
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.tx.send(msg.to_bytes()).map_err(|_| Error::Protocol("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = self.rx.recv().map_err(|_| Error::Protocol("peer hung up".into()))?;
        Ok(Message::decode(&frame)?.0)
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Self {
        Self { stream }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.stream.write_all(&msg.to_bytes())?;
        Ok(self.stream.flush()?)
    }

    fn recv(&mut self) -> Result<Message> {
        Message::read_from(&mut self.stream)
    }
}

// ---------------------------------------------------------------------------
// transcripts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
    /// Output of the ideal ReLU box, delivered to the server.
    IdealToServer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub message: Message,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Serialize)]
struct SidecarEntry {
    seq: usize,
    direction: Direction,
    msg_type: MsgType,
    layer: u32,
    count: usize,
    offset: usize,
}

impl Transcript {
    /// Frames back-to-back in schedule order.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            e.message.encode_into(&mut out);
        }
        out
    }

    /// Decodes frames; directions are not on the wire and must come from the sidecar.
    pub fn frames(bytes: &[u8]) -> Result<Vec<Message>> {
        let mut out = Vec::new();
        let mut at = 0;
        while at < bytes.len() {
            let (m, used) = Message::decode(&bytes[at..])?;
            out.push(m);
            at += used;
        }
        Ok(out)
    }

    /// Per-message direction and logical sequence number, with byte offsets into the wire form.
    pub fn sidecar_json(&self) -> String {
        let mut offset = 0;
        let rows: Vec<SidecarEntry> = self
            .entries
            .iter()
            .enumerate()
            .map(|(seq, e)| {
                let row = SidecarEntry {
                    seq,
                    direction: e.direction,
                    msg_type: e.message.msg_type,
                    layer: e.message.layer,
                    count: e.message.payload.len(),
                    offset,
                };
                offset += 13 + 8 * e.message.payload.len();
                row
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("sidecar serializes")
    }

    pub fn count(&self, direction: Direction, msg_type: MsgType) -> usize {
        self.entries.iter().filter(|e| e.direction == direction && e.message.msg_type == msg_type).count()
    }
}

// schedule position of a message; sorting by it merges the two parties' logs
fn schedule_key(e: &TranscriptEntry) -> (u32, u8) {
    let phase = match (e.direction, e.message.msg_type) {
        (Direction::ClientToServer, MsgType::Share) => 0,
        (_, MsgType::GcIn) => 1,
        (_, MsgType::GcOut) => 2,
        _ => 3,
    };
    (e.message.layer, phase)
}

// ---------------------------------------------------------------------------
// parties

/// Client side: holds the input and its offline material.
#[derive(Debug)]
pub struct Client<'a> {
    pub codec: FixedPointCodec,
    pub dims: Vec<usize>,
    pub relu_last: bool,
    pub material: &'a ClientMaterial,
    pub log: Vec<TranscriptEntry>,
}

impl<'a> Client<'a> {
    pub fn new(model: &EncodedModel, material: &'a ClientMaterial) -> Self {
        let mut dims = vec![model.input_dim()];
        dims.extend(model.layers.iter().map(|l| l.rows));
        let relu_last = model.layers.last().is_some_and(|l| l.relu);
        Self { codec: model.codec, dims, relu_last, material, log: Vec::new() }
    }

    fn send(&mut self, t: &mut impl Transport, m: Message) -> Result<()> {
        t.send(&m)?;
        self.log.push(TranscriptEntry { direction: Direction::ClientToServer, message: m });
        Ok(())
    }

    /// Everything the client can send before hearing back: the masked input
    /// and its ideal-box inputs for every hidden layer.
    pub fn open(&mut self, t: &mut impl Transport, input: &[u64]) -> Result<()> {
        let f = self.codec.field;
        let layers = self.dims.len() - 1;
        if self.material.r.len() != layers || input.len() != self.dims[0] {
            return Err(Error::DimensionMismatch {
                layer: 0,
                detail: "material or input does not match the model".into(),
            });
        }
        self.send(t, Message::new(MsgType::Share, 0, f.sub_vec(input, &self.material.r[0])))?;
        for i in 0..layers - 1 {
            let mut payload = self.material.blinded[i].clone();
            payload.extend_from_slice(&self.material.r[i]);
            payload.extend_from_slice(&self.material.r[i + 1]);
            self.send(t, Message::new(MsgType::GcIn, i, payload))?;
        }
        Ok(())
    }

    /// Receives the server's final share and reconstructs the output (scale `s`).
    pub fn finish(&mut self, t: &mut impl Transport) -> Result<Vec<u64>> {
        let last = self.dims.len() - 2;
        let m = t.recv()?;
        if m.msg_type != MsgType::Share || m.layer as usize != last || m.payload.len() != self.dims[last + 1] {
            return Err(Error::Protocol(format!(
                "expected final share for layer {last}, got {:?} layer {}",
                m.msg_type, m.layer
            )));
        }
        let f = self.codec.field;
        let z = f.add_vec(&m.payload, &self.material.blinded[last]);
        self.log.push(TranscriptEntry { direction: Direction::ServerToClient, message: m });
        self.codec.check_bound(last, &z)?;
        Ok(z.iter().map(|&v| finish_value(&self.codec, v, self.relu_last)).collect())
    }
}

fn finish_value(codec: &FixedPointCodec, z: u64, relu: bool) -> u64 {
    let v = if relu && codec.field.to_signed(z) < 0 { 0 } else { z };
    codec.truncate(v)
}

/// Server side: holds the model and its offline material, and hosts the
/// ideal ReLU box.
#[derive(Debug)]
pub struct Server<'a> {
    pub model: &'a EncodedModel,
    pub material: &'a ServerMaterial,
    pub log: Vec<TranscriptEntry>,
}

impl<'a> Server<'a> {
    pub fn new(model: &'a EncodedModel, material: &'a ServerMaterial) -> Self {
        Self { model, material, log: Vec::new() }
    }

    fn recv(&mut self, t: &mut impl Transport, ty: MsgType, layer: usize, len: usize) -> Result<Vec<u64>> {
        let m = t.recv()?;
        if m.msg_type != ty || m.layer as usize != layer || m.payload.len() != len {
            return Err(Error::Protocol(format!(
                "expected {ty:?} for layer {layer} with {len} elements, got {:?} layer {} with {}",
                m.msg_type,
                m.layer,
                m.payload.len()
            )));
        }
        let payload = m.payload.clone();
        self.log.push(TranscriptEntry { direction: Direction::ClientToServer, message: m });
        Ok(payload)
    }

    pub fn run(&mut self, t: &mut impl Transport) -> Result<()> {
        let model = self.model;
        let f = model.codec.field;
        let n = model.layers.len();
        if self.material.s.len() != n {
            return Err(Error::DimensionMismatch {
                layer: 0,
                detail: "server material does not match the model".into(),
            });
        }
        let mut masked = self.recv(t, MsgType::Share, 0, model.input_dim())?;
        for (i, l) in model.layers.iter().enumerate() {
            // W (y - r) + s + b
            let share = f.add_vec(&f.add_vec(&f.matvec(&l.w, &masked), &self.material.s[i]), &l.b);
            if i + 1 == n {
                let m = Message::new(MsgType::Share, i, share);
                t.send(&m)?;
                self.log.push(TranscriptEntry { direction: Direction::ServerToClient, message: m });
                return Ok(());
            }
            let gc = self.recv(t, MsgType::GcIn, i, l.rows + l.cols + model.layers[i + 1].cols)?;
            let (client_share, rest) = gc.split_at(l.rows);
            let (r_in, r_next) = rest.split_at(l.cols);
            masked = ideal_relu(model, i, &masked, &share, client_share, r_in, r_next)?;
            self.log.push(TranscriptEntry {
                direction: Direction::IdealToServer,
                message: Message::new(MsgType::GcOut, i, masked.clone()),
            });
        }
        Ok(())
    }
}

/// The garbled-circuit stand-in: reconstructs `z = W y + b` from the two
/// shares, checks the shares against the masked input, applies ReLU and
/// truncation, and re-masks with the client's next mask.
fn ideal_relu(
    model: &EncodedModel,
    layer: usize,
    masked_in: &[u64],
    server_share: &[u64],
    client_share: &[u64],
    r_in: &[u64],
    r_next: &[u64],
) -> Result<Vec<u64>> {
    let f = model.codec.field;
    let l = &model.layers[layer];
    let z = f.add_vec(server_share, client_share);
    let y = f.add_vec(masked_in, r_in);
    let expect = f.add_vec(&f.matvec(&l.w, &y), &l.b);
    if z != expect {
        return Err(Error::Protocol(format!("shares at layer {layer} do not reconstruct W y + b")));
    }
    model.codec.check_bound(layer, &z)?;
    let next: Vec<u64> = z.iter().map(|&v| finish_value(&model.codec, v, l.relu)).collect();
    Ok(f.sub_vec(&next, r_next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Field elements at scale `s`.
    pub raw: Vec<u64>,
    pub decoded: Vec<f64>,
    pub transcript: Transcript,
}

/// Runs both parties over an in-process queue on the calling thread.
pub fn online_inference(model: &EncodedModel, input: &[u64], material: &OfflineMaterial) -> Result<InferenceOutput> {
    let (mut ct, mut st) = duplex();
    let mut client = Client::new(model, &material.client);
    let mut server = Server::new(model, &material.server);
    client.open(&mut ct, input)?;
    server.run(&mut st)?;
    let raw = client.finish(&mut ct)?;
    Ok(assemble(model, raw, client.log, server.log))
}

/// Both parties on separate threads connected by loopback TCP.
pub fn online_inference_tcp(
    model: &EncodedModel,
    input: &[u64],
    material: &OfflineMaterial,
) -> Result<InferenceOutput> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::scope(|scope| {
        let server = scope.spawn(|| -> Result<Vec<TranscriptEntry>> {
            let (stream, _) = listener.accept()?;
            let mut t = TcpTransport::new(stream);
            let mut server = Server::new(model, &material.server);
            server.run(&mut t)?;
            Ok(server.log)
        });
        let client_result = (|| {
            let mut t = TcpTransport::new(TcpStream::connect(addr)?);
            let mut client = Client::new(model, &material.client);
            client.open(&mut t, input)?;
            let raw = client.finish(&mut t)?;
            Ok::<_, Error>((raw, client.log))
        })();
        let server_log = server.join().map_err(|_| Error::Protocol("server thread panicked".into()))?;
        let server_log = server_log?;
        let (raw, client_log) = client_result?;
        Ok(assemble(model, raw, client_log, server_log))
    })
}

fn assemble(
    model: &EncodedModel,
    raw: Vec<u64>,
    client_log: Vec<TranscriptEntry>,
    server_log: Vec<TranscriptEntry>,
) -> InferenceOutput {
    // each message appears once: client sends are taken from the client log,
    // everything else from the server log
    let mut entries: Vec<TranscriptEntry> =
        client_log.into_iter().filter(|e| e.direction == Direction::ClientToServer).collect();
    entries.extend(server_log.into_iter().filter(|e| e.direction != Direction::ClientToServer));
    entries.sort_by_key(schedule_key);
    let decoded = raw.iter().map(|&v| model.codec.decode(v)).collect();
    InferenceOutput { raw, decoded, transcript: Transcript { entries } }
}

/// Offline plus online phase for one input with a seeded stream.
pub fn simulate(model: &EncodedModel, input: &[u64], seed: u64) -> Result<InferenceOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let material = offline_phase(model, &mut rng);
    online_inference(model, input, &material)
}

/// `trials` independent runs of the same input, trial `t` on stream `t` of `seed`.
pub fn simulate_trials(
    model: &EncodedModel,
    input: &[u64],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Transcript>> {
    exec.try_map_range(trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let material = offline_phase(model, &mut rng);
        Ok(online_inference(model, input, &material)?.transcript)
    })
}

// ---------------------------------------------------------------------------
// audit

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotAudit {
    /// Position of the message in the schedule.
    pub message: usize,
    pub layer: u32,
    pub msg_type: MsgType,
    pub element: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub trials: usize,
    pub alpha: f64,
    /// Per-slot threshold after the Bonferroni correction.
    pub slot_alpha: f64,
    pub slots: Vec<SlotAudit>,
    pub passed: bool,
}

/// Checks that every value the server receives (masked input shares and the
/// ideal box's re-masked outputs) is uniform over the field across trials.
/// Needs at least five expected observations per field element.
pub fn transcript_audit(transcripts: &[Transcript], modulus: u64, alpha: f64) -> Result<AuditReport> {
    let need = 5 * modulus as usize;
    if transcripts.len() < need {
        return Err(Error::InsufficientTrials { got: transcripts.len(), need });
    }
    if modulus > 1 << 16 {
        return Err(Error::InvalidArgument(format!("audit modulus {modulus} is too large for binned counts")));
    }
    let template = &transcripts[0].entries;
    let seen_by_server = |e: &TranscriptEntry| {
        matches!(
            (e.direction, e.message.msg_type),
            (Direction::ClientToServer, MsgType::Share) | (Direction::IdealToServer, MsgType::GcOut)
        )
    };
    let slots: Vec<(usize, usize)> = template
        .iter()
        .enumerate()
        .filter(|(_, e)| seen_by_server(e))
        .flat_map(|(m, e)| (0..e.message.payload.len()).map(move |k| (m, k)))
        .collect();
    if slots.is_empty() {
        return Err(Error::InvalidArgument("transcripts carry no server-visible shares".into()));
    }
    let slot_alpha = alpha / slots.len() as f64;
    let mut out = Vec::with_capacity(slots.len());
    for &(m, k) in &slots {
        let mut counts = vec![0u64; modulus as usize];
        for t in transcripts {
            let e = t
                .entries
                .get(m)
                .filter(|e| e.message.msg_type == template[m].message.msg_type && e.message.payload.len() > k);
            let e = e.ok_or_else(|| Error::Protocol("transcripts do not share a schedule".into()))?;
            let v = e.message.payload[k];
            if v >= modulus {
                return Err(Error::Protocol(format!("value {v} outside the audited field")));
            }
            counts[v as usize] += 1;
        }
        let chi = chi_square_uniform(&counts);
        out.push(SlotAudit {
            message: m,
            layer: template[m].message.layer,
            msg_type: template[m].message.msg_type,
            element: k,
            statistic: chi.statistic,
            p_value: chi.p_value,
            passed: chi.passes(slot_alpha),
        });
    }
    let passed = out.iter().all(|s| s.passed);
    Ok(AuditReport { trials: transcripts.len(), alpha, slot_alpha, slots: out, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_relu() -> Model {
        Model::new(vec![DenseLayer {
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            bias: vec![0.0, 0.0],
            relu: Some(true),
        }])
    }

    #[test]
    fn field_basics() {
        let f = Field::new(DEFAULT_MODULUS).unwrap();
        assert_eq!(f.sub(0, 1), DEFAULT_MODULUS - 1);
        assert_eq!(f.to_signed(f.from_signed(-5)), -5);
        assert_eq!(f.mul(DEFAULT_MODULUS - 1, DEFAULT_MODULUS - 1), 1);
        assert!(Field::new(100).is_err());
        assert!(Field::new(101).is_ok());
    }

    #[test]
    fn dealer_example() {
        let f = Field::new(DEFAULT_MODULUS).unwrap();
        assert_eq!(blind(&f, &[2], &[3], &[5]), vec![1]);
    }

    #[test]
    fn codec_round_trip() {
        let c = FixedPointCodec::default();
        for x in [0.0, 1.5, -2.0, 2.71875, -1e5] {
            assert!((c.decode(c.encode(x).unwrap()) - x).abs() <= 2f64.powi(-12));
        }
        assert!(c.encode(f64::NAN).is_err());
        assert!(c.encode(1e12).is_err());
        assert_eq!(c.decode(c.truncate(c.field.from_signed(-1))), -1.0 / 4096.0);
    }

    #[test]
    fn identity_model() {
        let enc = identity_relu().encode().unwrap();
        let input = enc.encode_input(&[1.5, -2.0]).unwrap();
        let out = simulate(&enc, &input, 1).unwrap();
        assert_eq!(out.decoded, vec![1.5, 0.0]);
    }

    #[test]
    fn message_counts() {
        let m = Model::new(vec![
            DenseLayer { weights: vec![vec![0.5, -0.25]; 3], bias: vec![0.1; 3], relu: None },
            DenseLayer { weights: vec![vec![1.0, 1.0, 1.0]; 2], bias: vec![0.0; 2], relu: None },
            DenseLayer { weights: vec![vec![1.0, -1.0]], bias: vec![0.5], relu: None },
        ]);
        let enc = m.encode().unwrap();
        let out = simulate(&enc, &enc.encode_input(&[0.3, 0.7]).unwrap(), 3).unwrap();
        let t = &out.transcript;
        assert_eq!(t.entries.len(), 1 + 2 * 2 + 1);
        assert_eq!(t.count(Direction::ClientToServer, MsgType::Share), 1);
        assert_eq!(t.count(Direction::ClientToServer, MsgType::GcIn), 2);
        assert_eq!(t.count(Direction::IdealToServer, MsgType::GcOut), 2);
        assert_eq!(t.count(Direction::ServerToClient, MsgType::Share), 1);
    }

    #[test]
    fn wire_round_trip() {
        let enc = identity_relu().encode().unwrap();
        let out = simulate(&enc, &enc.encode_input(&[1.0, 2.0]).unwrap(), 9).unwrap();
        let wire = out.transcript.to_wire();
        let frames = Transcript::frames(&wire).unwrap();
        let msgs: Vec<Message> = out.transcript.entries.iter().map(|e| e.message.clone()).collect();
        assert_eq!(frames, msgs);
        assert_eq!(wire[0], 0);
        assert_eq!(&wire[1..5], &0u32.to_le_bytes());
        assert_eq!(&wire[5..13], &2u64.to_le_bytes());
        assert!(Transcript::frames(&wire[..wire.len() - 1]).is_err());
    }

    #[test]
    fn tcp_matches_in_process() {
        let m = Model::new(vec![
            DenseLayer { weights: vec![vec![0.5, -0.25], vec![1.0, 2.0]], bias: vec![0.1, -0.2], relu: None },
            DenseLayer { weights: vec![vec![1.0, -1.0]], bias: vec![0.0], relu: None },
        ]);
        let enc = m.encode().unwrap();
        let input = enc.encode_input(&[0.3, -0.7]).unwrap();
        let material = offline_phase(&enc, &mut ChaCha8Rng::seed_from_u64(4));
        let a = online_inference(&enc, &input, &material).unwrap();
        let b = online_inference_tcp(&enc, &input, &material).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overflow_aborts_with_layer() {
        let m = Model::new(vec![
            DenseLayer { weights: vec![vec![1.0]], bias: vec![0.0], relu: None },
            DenseLayer { weights: vec![vec![30000.0]], bias: vec![0.0], relu: None },
        ]);
        let enc = m.encode().unwrap();
        let input = enc.encode_input(&[30000.0]).unwrap();
        match simulate(&enc, &input, 0) {
            Err(Error::Overflow { layer: 1, .. }) => {}
            other => panic!("expected overflow at layer 1, got {other:?}"),
        }
    }

    #[test]
    fn tampered_share_detected() {
        let layer = identity_relu().layers[0].clone();
        let two = Model::new(vec![layer.clone(), layer]).encode().unwrap();
        let mut m = offline_phase(&two, &mut ChaCha8Rng::seed_from_u64(0));
        m.client.blinded[0][0] = two.codec.field.add(m.client.blinded[0][0], 1);
        assert!(matches!(online_inference(&two, &[0, 0], &m), Err(Error::Protocol(_))));
    }

    #[test]
    fn audit_needs_trials() {
        assert!(matches!(transcript_audit(&[], 101, 0.01), Err(Error::InsufficientTrials { got: 0, need: 505 })));
    }
}
