//! Signed, herald-framed messages for diagram inputs and outputs.
//!
//! Wire layout (integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LDSH"
//!      4     1  version
//!      5     4  origin id
//!      9     4  destination id
//!     13     2  message type id
//!     15     4  payload length in bytes
//!     19     2  signature length in bytes
//!     21     s  signature
//!   21+s     p  payload (f64 values, row-major)
//! ```
//!
//! The signature covers the 21 header bytes followed by the payload.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::time::Duration;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::graph::Value;
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"LDSH";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
pub const HMAC_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u16),
    #[error("frame size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("payload has {actual} values, type expects {expected}")]
    PayloadSizeMismatch { expected: usize, actual: usize },
    #[error("signature invalid")]
    SignatureInvalid,
    #[error("frame addressed to {got}, local id is {expected}")]
    AddressMismatch { expected: u32, got: u32 },
    #[error("unknown key handle {0}")]
    UnknownKey(u32),
    #[error("message type {0} already registered")]
    DuplicateType(u16),
}

impl NetError {
    /// Stable name of the error class, used for drop counters.
    pub fn class(&self) -> &'static str {
        match self {
            NetError::BadMagic => "bad-magic",
            NetError::UnsupportedVersion(_) => "version",
            NetError::UnknownType(_) => "unknown-type",
            NetError::SizeMismatch { .. } | NetError::PayloadSizeMismatch { .. } => "size",
            NetError::SignatureInvalid => "signature",
            NetError::AddressMismatch { .. } => "address",
            NetError::UnknownKey(_) => "key",
            NetError::DuplicateType(_) => "duplicate-type",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadShape {
    Empty,
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl PayloadShape {
    pub fn len(self) -> usize {
        match self {
            PayloadShape::Empty => 0,
            PayloadShape::Scalar => 1,
            PayloadShape::Vector(n) => n,
            PayloadShape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(self) -> usize {
        8 * self.len()
    }

    /// Packs decoded values into a diagram signal. `Empty` has no signal form.
    pub fn to_value(self, values: &[f64]) -> Option<Value> {
        match self {
            PayloadShape::Empty => None,
            PayloadShape::Scalar => Some(Value::Scalar(values[0])),
            PayloadShape::Vector(_) => Some(Value::Vector(values.to_vec())),
            PayloadShape::Matrix(r, c) => {
                Some(Value::Matrix(Matrix::from_vec(r, c, values.to_vec())))
            }
        }
    }
}

impl fmt::Display for PayloadShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadShape::Empty => f.write_str("empty"),
            PayloadShape::Scalar => f.write_str("scalar"),
            PayloadShape::Vector(n) => write!(f, "vector({n})"),
            PayloadShape::Matrix(r, c) => write!(f, "matrix({r},{c})"),
        }
    }
}

/// Message type ids and their fixed payload shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PayloadCodec {
    types: BTreeMap<u16, PayloadShape>,
}

impl PayloadCodec {
    pub fn new() -> Self {
        Self::default()
    }

    /// 0 empty, 1 scalar, 2 vector(3), 3 matrix(2,2), 4 vector(6).
    pub fn standard() -> Self {
        let mut c = Self::new();
        for (id, shape) in [
            (0, PayloadShape::Empty),
            (1, PayloadShape::Scalar),
            (2, PayloadShape::Vector(3)),
            (3, PayloadShape::Matrix(2, 2)),
            (4, PayloadShape::Vector(6)),
        ] {
            c.register(id, shape).expect("distinct ids");
        }
        c
    }

    pub fn register(&mut self, id: u16, shape: PayloadShape) -> Result<(), NetError> {
        if self.types.contains_key(&id) {
            return Err(NetError::DuplicateType(id));
        }
        self.types.insert(id, shape);
        Ok(())
    }

    pub fn shape(&self, id: u16) -> Option<PayloadShape> {
        self.types.get(&id).copied()
    }

    pub fn types(&self) -> impl Iterator<Item = (u16, PayloadShape)> + '_ {
        self.types.iter().map(|(&k, &v)| (k, v))
    }

    pub fn encode_payload(&self, id: u16, values: &[f64]) -> Result<Vec<u8>, NetError> {
        let shape = self.shape(id).ok_or(NetError::UnknownType(id))?;
        if values.len() != shape.len() {
            return Err(NetError::PayloadSizeMismatch {
                expected: shape.len(),
                actual: values.len(),
            });
        }
        Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn decode_payload(&self, id: u16, bytes: &[u8]) -> Result<Vec<f64>, NetError> {
        let shape = self.shape(id).ok_or(NetError::UnknownType(id))?;
        if bytes.len() != shape.byte_len() {
            return Err(NetError::SizeMismatch {
                expected: shape.byte_len(),
                actual: bytes.len(),
            });
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

/// Fixed-size part of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub origin: u32,
    pub destination: u32,
    pub type_id: u16,
    pub payload_len: u32,
    pub signature_len: u16,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5..9].copy_from_slice(&self.origin.to_le_bytes());
        b[9..13].copy_from_slice(&self.destination.to_le_bytes());
        b[13..15].copy_from_slice(&self.type_id.to_le_bytes());
        b[15..19].copy_from_slice(&self.payload_len.to_le_bytes());
        b[19..21].copy_from_slice(&self.signature_len.to_le_bytes());
        b
    }

    /// Parses the first [`HEADER_LEN`] bytes; checks magic and version only.
    pub fn parse(bytes: &[u8]) -> Result<Self, NetError> {
        if !MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
            return Err(NetError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(NetError::SizeMismatch {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(NetError::UnsupportedVersion(bytes[4]));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes"));
        Ok(Header {
            version: bytes[4],
            origin: u32_at(5),
            destination: u32_at(9),
            type_id: u16_at(13),
            payload_len: u32_at(15),
            signature_len: u16_at(19),
        })
    }
}

/// Produces detached signatures over the signed region of a frame.
pub trait Signer {
    fn sign(&self, data: &[u8]) -> Vec<u8>;
}

/// Checks detached signatures.
pub trait Verifier {
    fn verify(&self, data: &[u8], signature: &[u8]) -> bool;
}

/// Shared-key HMAC-SHA256.
#[derive(Clone, PartialEq, Eq)]
pub struct HmacKey {
    key: Vec<u8>,
}

impl HmacKey {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into() }
    }

    fn mac(&self) -> Hmac<Sha256> {
        Hmac::<Sha256>::new_from_slice(&self.key).expect("HMAC accepts any key length")
    }
}

impl fmt::Debug for HmacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HmacKey({} bytes)", self.key.len())
    }
}

impl Signer for HmacKey {
    fn sign(&self, data: &[u8]) -> Vec<u8> {
        let mut m = self.mac();
        m.update(data);
        m.finalize().into_bytes().to_vec()
    }
}

impl Verifier for HmacKey {
    fn verify(&self, data: &[u8], signature: &[u8]) -> bool {
        let mut m = self.mac();
        m.update(data);
        m.verify_slice(signature).is_ok()
    }
}

/// Trusted keys by handle. As a [`Verifier`] it accepts a signature made
/// by any of them.
#[derive(Debug, Clone, Default)]
pub struct Keyring {
    keys: BTreeMap<u32, HmacKey>,
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, handle: u32, key: HmacKey) {
        self.keys.insert(handle, key);
    }

    pub fn key(&self, handle: u32) -> Result<&HmacKey, NetError> {
        self.keys.get(&handle).ok_or(NetError::UnknownKey(handle))
    }

    pub fn sign(&self, handle: u32, data: &[u8]) -> Result<Vec<u8>, NetError> {
        Ok(self.key(handle)?.sign(data))
    }

    pub fn verify_with(
        &self,
        handle: u32,
        data: &[u8],
        signature: &[u8],
    ) -> Result<bool, NetError> {
        Ok(self.key(handle)?.verify(data, signature))
    }
}

impl Verifier for Keyring {
    fn verify(&self, data: &[u8], signature: &[u8]) -> bool {
        self.keys.values().any(|k| k.verify(data, signature))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub origin: u32,
    pub destination: u32,
    pub type_id: u16,
    pub payload: Vec<f64>,
}

pub fn encode_frame(
    codec: &PayloadCodec,
    origin: u32,
    destination: u32,
    type_id: u16,
    payload: &[f64],
    signer: &dyn Signer,
) -> Result<Vec<u8>, NetError> {
    let body = codec.encode_payload(type_id, payload)?;
    // The signature length is part of the signed header, so sign a probe
    // first to learn it.
    let sig_len = signer.sign(&[]).len();
    let header = Header {
        version: VERSION,
        origin,
        destination,
        type_id,
        payload_len: body.len() as u32,
        signature_len: u16::try_from(sig_len).expect("signature fits in u16"),
    }
    .to_bytes();
    let signature = signer.sign(&signed_region(&header, &body));
    debug_assert_eq!(signature.len(), sig_len);
    let mut out = Vec::with_capacity(HEADER_LEN + signature.len() + body.len());
    out.extend_from_slice(&header);
    out.extend_from_slice(&signature);
    out.extend_from_slice(&body);
    Ok(out)
}

fn signed_region(header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(header.len() + payload.len());
    v.extend_from_slice(header);
    v.extend_from_slice(payload);
    v
}

/// Decodes and authenticates one frame. With `local` set, frames for any
/// other destination are rejected.
pub fn decode_frame(
    codec: &PayloadCodec,
    bytes: &[u8],
    verifier: &dyn Verifier,
    local: Option<u32>,
) -> Result<Message, NetError> {
    let h = Header::parse(bytes)?;
    let shape = codec
        .shape(h.type_id)
        .ok_or(NetError::UnknownType(h.type_id))?;
    if h.payload_len as usize != shape.byte_len() {
        return Err(NetError::SizeMismatch {
            expected: shape.byte_len(),
            actual: h.payload_len as usize,
        });
    }
    let expected = HEADER_LEN + h.signature_len as usize + h.payload_len as usize;
    if bytes.len() != expected {
        return Err(NetError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let (header, rest) = bytes.split_at(HEADER_LEN);
    let (signature, body) = rest.split_at(h.signature_len as usize);
    if !verifier.verify(&signed_region(header, body), signature) {
        return Err(NetError::SignatureInvalid);
    }
    if let Some(id) = local {
        if h.destination != id {
            return Err(NetError::AddressMismatch {
                expected: id,
                got: h.destination,
            });
        }
    }
    Ok(Message {
        origin: h.origin,
        destination: h.destination,
        type_id: h.type_id,
        payload: codec.decode_payload(h.type_id, body)?,
    })
}

/// Datagram transport: one frame per datagram.
pub trait Transport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()>;
    /// Next datagram if one is available, without blocking indefinitely.
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>>;
}

/// In-process transport for tests.
#[derive(Debug)]
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl MemoryTransport {
    /// Two connected ends.
    pub fn pair() -> (Self, Self) {
        let (atx, brx) = channel();
        let (btx, arx) = channel();
        (Self { tx: atx, rx: arx }, Self { tx: btx, rx: brx })
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        self.tx
            .send(datagram.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))
    }

    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        match self.rx.try_recv() {
            Ok(d) => Ok(Some(d)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => {
                Err(io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))
            }
        }
    }
}

/// UDP socket bound locally and connected to one peer.
#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
}

/// Largest datagram accepted; bigger ones are truncated and then rejected.
pub const MAX_DATAGRAM: usize = 65_507;

impl UdpTransport {
    pub fn connect(
        local: impl ToSocketAddrs,
        peer: impl ToSocketAddrs,
        timeout: Duration,
    ) -> io::Result<Self> {
        let socket = UdpSocket::bind(local)?;
        socket.connect(peer)?;
        socket.set_read_timeout(Some(timeout))?;
        Ok(Self { socket })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
    )
}

impl Transport for UdpTransport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        self.socket.send(datagram).map(|_| ())
    }

    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        match self.socket.recv(&mut buf) {
            Ok(n) => {
                buf.truncate(n);
                Ok(Some(buf))
            }
            Err(e) if is_timeout(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Per-class counts of frames dropped on receive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropCounts {
    counts: BTreeMap<&'static str, u64>,
}

impl DropCounts {
    pub fn record(&mut self, e: &NetError) {
        *self.counts.entry(e.class()).or_default() += 1;
    }

    pub fn get(&self, class: &str) -> u64 {
        self.counts.get(class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }
}

/// A node id with a transport, codec and keys.
pub struct Endpoint<T: Transport> {
    transport: T,
    codec: PayloadCodec,
    signer: Box<dyn Signer + Send>,
    verifier: Box<dyn Verifier + Send>,
    id: u32,
    filter: bool,
    drops: DropCounts,
}

impl<T: Transport> Endpoint<T> {
    pub fn new(
        id: u32,
        transport: T,
        codec: PayloadCodec,
        signer: impl Signer + Send + 'static,
        verifier: impl Verifier + Send + 'static,
    ) -> Self {
        Self {
            transport,
            codec,
            signer: Box::new(signer),
            verifier: Box::new(verifier),
            id,
            filter: false,
            drops: DropCounts::default(),
        }
    }

    /// Drop frames not addressed to this endpoint's id.
    pub fn with_address_filter(mut self) -> Self {
        self.filter = true;
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn codec(&self) -> &PayloadCodec {
        &self.codec
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn drops(&self) -> &DropCounts {
        &self.drops
    }

    /// Encodes, signs and sends one frame. Encoding errors are returned
    /// through the `io::Error` as `InvalidInput`.
    pub fn publish(&mut self, destination: u32, type_id: u16, payload: &[f64]) -> io::Result<()> {
        let frame = encode_frame(
            &self.codec,
            self.id,
            destination,
            type_id,
            payload,
            self.signer.as_ref(),
        )
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        self.transport.send(&frame)
    }

    /// Next valid message, or `None` once no datagram is pending. Invalid
    /// frames are dropped and counted.
    pub fn receive(&mut self) -> io::Result<Option<Message>> {
        let local = self.filter.then_some(self.id);
        while let Some(datagram) = self.transport.recv()? {
            match decode_frame(&self.codec, &datagram, self.verifier.as_ref(), local) {
                Ok(m) => return Ok(Some(m)),
                Err(e) => self.drops.record(&e),
            }
        }
        Ok(None)
    }

    /// All pending valid messages.
    pub fn drain(&mut self) -> io::Result<Vec<Message>> {
        let mut out = Vec::new();
        while let Some(m) = self.receive()? {
            out.push(m);
        }
        Ok(out)
    }
}

/// Reply for an echo server: same type and payload, origin and
/// destination swapped, re-signed.
pub fn echo_reply(codec: &PayloadCodec, key: &HmacKey, frame: &[u8]) -> Result<Vec<u8>, NetError> {
    let m = decode_frame(codec, frame, key, None)?;
    encode_frame(codec, m.destination, m.origin, m.type_id, &m.payload, key)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EchoStats {
    pub echoed: u64,
    pub drops: DropCounts,
}

/// Answers frames on `socket` until `limit` replies were sent (forever
/// when `None`). Invalid frames are counted and ignored.
pub fn serve_echo(
    socket: &UdpSocket,
    codec: &PayloadCodec,
    key: &HmacKey,
    limit: Option<u64>,
) -> io::Result<EchoStats> {
    let mut stats = EchoStats::default();
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while limit.is_none_or(|n| stats.echoed < n) {
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if is_timeout(&e) => continue,
            Err(e) => return Err(e),
        };
        match echo_reply(codec, key, &buf[..n]) {
            Ok(reply) => {
                socket.send_to(&reply, from)?;
                stats.echoed += 1;
            }
            Err(e) => stats.drops.record(&e),
        }
    }
    Ok(stats)
}
