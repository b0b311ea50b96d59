//! MQTT 5.0 wire format for the packet subset the benchmark uses.
//!
//! Supported: CONNECT, CONNACK, PUBLISH, PUBACK, PUBREC, PUBREL, PUBCOMP,
//! SUBSCRIBE, SUBACK, UNSUBSCRIBE, UNSUBACK, PINGREQ, PINGRESP, DISCONNECT.
//! AUTH is recognised and rejected. The only properties understood are
//! User Property (0x26) and Message Expiry Interval (0x02, PUBLISH only);
//! any other property identifier makes the packet malformed.

mod varint;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topics::{TopicFilter, TopicName};

pub use varint::{decode_varint, encode_varint, varint_len, MAX_VARINT};

/// User property key carrying the publish timestamp (decimal microseconds).
pub const TS_PROPERTY: &str = "ts_us";
/// User property key carrying the per-gateway sequence id.
pub const SEQ_PROPERTY: &str = "seq";

const PROP_MESSAGE_EXPIRY: u8 = 0x02;
const PROP_USER: u8 = 0x26;
const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed packet: {0}")]
    MalformedPacket(&'static str),
    #[error("unsupported packet type {0:?}")]
    UnsupportedPacket(PacketType),
    #[error("packet violates an invariant: {0}")]
    InvariantViolation(&'static str),
    #[error("remaining length {0} exceeds the protocol maximum")]
    OversizePacket(usize),
    #[error("packet of {size} bytes exceeds the configured limit of {limit}")]
    PacketTooLarge { size: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketType {
    Connect = 1,
    ConnAck = 2,
    Publish = 3,
    PubAck = 4,
    PubRec = 5,
    PubRel = 6,
    PubComp = 7,
    Subscribe = 8,
    SubAck = 9,
    Unsubscribe = 10,
    UnsubAck = 11,
    PingReq = 12,
    PingResp = 13,
    Disconnect = 14,
    Auth = 15,
}

impl PacketType {
    pub fn from_code(code: u8) -> Option<Self> {
        use PacketType::*;
        Some(match code {
            1 => Connect,
            2 => ConnAck,
            3 => Publish,
            4 => PubAck,
            5 => PubRec,
            6 => PubRel,
            7 => PubComp,
            8 => Subscribe,
            9 => SubAck,
            10 => Unsubscribe,
            11 => UnsubAck,
            12 => PingReq,
            13 => PingResp,
            14 => Disconnect,
            15 => Auth,
            _ => return None,
        })
    }

    /// Flags nibble required by the protocol, `None` for PUBLISH.
    fn fixed_flags(self) -> Option<u8> {
        match self {
            PacketType::Publish => None,
            PacketType::PubRel | PacketType::Subscribe | PacketType::Unsubscribe => Some(0b0010),
            _ => Some(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedHeader {
    pub packet_type: PacketType,
    pub flags: u8,
    pub remaining_length: u32,
}

impl FixedHeader {
    pub fn encoded_len(&self) -> usize {
        1 + varint_len(self.remaining_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            2 => Some(QoS::ExactlyOnce),
            _ => None,
        }
    }

    pub fn level(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for QoS {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        QoS::from_u8(v).ok_or_else(|| format!("invalid QoS level {v}"))
    }
}

impl From<QoS> for u8 {
    fn from(q: QoS) -> u8 {
        q as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Properties {
    pub message_expiry: Option<u32>,
    pub user: Vec<(String, String)>,
}

impl Properties {
    pub fn is_empty(&self) -> bool {
        self.message_expiry.is_none() && self.user.is_empty()
    }

    pub fn user_property(&self, key: &str) -> Option<&str> {
        self.user.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_user_property(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.user.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.user.push((key.to_owned(), value)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub clean_start: bool,
    pub keep_alive: u16,
    pub username: Option<String>,
    pub password: Option<Bytes>,
    pub properties: Properties,
}

/// CONNACK reason codes used by the broker.
pub mod reason {
    pub const SUCCESS: u8 = 0x00;
    pub const GRANTED_QOS_1: u8 = 0x01;
    pub const GRANTED_QOS_2: u8 = 0x02;
    pub const NO_SUBSCRIPTION_EXISTED: u8 = 0x11;
    pub const UNSPECIFIED_ERROR: u8 = 0x80;
    pub const MALFORMED_PACKET: u8 = 0x81;
    pub const PROTOCOL_ERROR: u8 = 0x82;
    pub const CLIENT_ID_NOT_VALID: u8 = 0x85;
    pub const BAD_USERNAME_OR_PASSWORD: u8 = 0x86;
    pub const SESSION_TAKEN_OVER: u8 = 0x8E;
    pub const KEEP_ALIVE_TIMEOUT: u8 = 0x8D;
    pub const PACKET_ID_NOT_FOUND: u8 = 0x92;
    pub const PACKET_TOO_LARGE: u8 = 0x95;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    pub reason: u8,
    pub properties: Properties,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: TopicName,
    pub qos: QoS,
    pub dup: bool,
    pub retain: bool,
    pub packet_id: Option<u16>,
    pub properties: Properties,
    pub payload: Bytes,
}

impl Publish {
    pub fn new(topic: TopicName, qos: QoS, payload: impl Into<Bytes>) -> Self {
        Self {
            topic,
            qos,
            dup: false,
            retain: false,
            packet_id: None,
            properties: Properties::default(),
            payload: payload.into(),
        }
    }
}

/// Body shared by PUBACK, PUBREC, PUBREL and PUBCOMP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub packet_id: u16,
    pub reason: u8,
    pub properties: Properties,
}

impl Ack {
    pub fn new(packet_id: u16) -> Self {
        Self {
            packet_id,
            reason: reason::SUCCESS,
            properties: Properties::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SubscribeOptions {
    pub max_qos: QoS,
    pub no_local: bool,
    pub retain_as_published: bool,
}

impl SubscribeOptions {
    fn to_byte(self) -> u8 {
        self.max_qos.level() | (self.no_local as u8) << 2 | (self.retain_as_published as u8) << 3
    }

    fn from_byte(b: u8) -> Result<Self, CodecError> {
        if b & 0xC0 != 0 {
            return Err(CodecError::MalformedPacket("reserved subscription option bits set"));
        }
        if (b >> 4) & 0x03 == 3 {
            return Err(CodecError::MalformedPacket("invalid retain handling"));
        }
        let max_qos = QoS::from_u8(b & 0x03).ok_or(CodecError::MalformedPacket("subscription QoS 3"))?;
        Ok(Self {
            max_qos,
            no_local: b & 0x04 != 0,
            retain_as_published: b & 0x08 != 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub properties: Properties,
    pub filters: Vec<(TopicFilter, SubscribeOptions)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    pub properties: Properties,
    pub reasons: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub properties: Properties,
    pub filters: Vec<TopicFilter>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnsubAck {
    pub packet_id: u16,
    pub properties: Properties,
    pub reasons: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Disconnect {
    pub reason: u8,
    pub properties: Properties,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlPacket {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    PubAck(Ack),
    PubRec(Ack),
    PubRel(Ack),
    PubComp(Ack),
    Subscribe(Subscribe),
    SubAck(SubAck),
    Unsubscribe(Unsubscribe),
    UnsubAck(UnsubAck),
    PingReq,
    PingResp,
    Disconnect(Disconnect),
}

impl ControlPacket {
    pub fn packet_type(&self) -> PacketType {
        use ControlPacket as P;
        match self {
            P::Connect(_) => PacketType::Connect,
            P::ConnAck(_) => PacketType::ConnAck,
            P::Publish(_) => PacketType::Publish,
            P::PubAck(_) => PacketType::PubAck,
            P::PubRec(_) => PacketType::PubRec,
            P::PubRel(_) => PacketType::PubRel,
            P::PubComp(_) => PacketType::PubComp,
            P::Subscribe(_) => PacketType::Subscribe,
            P::SubAck(_) => PacketType::SubAck,
            P::Unsubscribe(_) => PacketType::Unsubscribe,
            P::UnsubAck(_) => PacketType::UnsubAck,
            P::PingReq => PacketType::PingReq,
            P::PingResp => PacketType::PingResp,
            P::Disconnect(_) => PacketType::Disconnect,
        }
    }

    fn flags(&self) -> u8 {
        match self {
            ControlPacket::Publish(p) => (p.dup as u8) << 3 | p.qos.level() << 1 | p.retain as u8,
            other => other.packet_type().fixed_flags().unwrap_or(0),
        }
    }

    fn validate(&self) -> Result<(), CodecError> {
        match self {
            ControlPacket::Connect(c) if c.client_id.is_empty() => {
                Err(CodecError::InvariantViolation("client id must not be empty"))
            }
            ControlPacket::Connect(c) if c.password.is_some() && c.username.is_none() => {
                Err(CodecError::InvariantViolation("password without username"))
            }
            ControlPacket::Publish(p) => match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, Some(_)) => Err(CodecError::InvariantViolation("packet id on QoS 0 publish")),
                (QoS::AtMostOnce, None) if p.dup => Err(CodecError::InvariantViolation("dup flag on QoS 0 publish")),
                (QoS::AtLeastOnce | QoS::ExactlyOnce, None) => {
                    Err(CodecError::InvariantViolation("missing packet id for QoS >= 1"))
                }
                (_, Some(0)) => Err(CodecError::InvariantViolation("packet id 0")),
                _ => Ok(()),
            },
            ControlPacket::Subscribe(s) if s.filters.is_empty() => {
                Err(CodecError::InvariantViolation("SUBSCRIBE without filters"))
            }
            ControlPacket::Unsubscribe(s) if s.filters.is_empty() => {
                Err(CodecError::InvariantViolation("UNSUBSCRIBE without filters"))
            }
            _ => Ok(()),
        }?;
        let props = match self {
            ControlPacket::Publish(_) => return Ok(()),
            ControlPacket::Connect(c) => &c.properties,
            ControlPacket::ConnAck(c) => &c.properties,
            ControlPacket::PubAck(a)
            | ControlPacket::PubRec(a)
            | ControlPacket::PubRel(a)
            | ControlPacket::PubComp(a) => &a.properties,
            ControlPacket::Subscribe(s) => &s.properties,
            ControlPacket::SubAck(s) => &s.properties,
            ControlPacket::Unsubscribe(s) => &s.properties,
            ControlPacket::UnsubAck(s) => &s.properties,
            ControlPacket::Disconnect(d) => &d.properties,
            ControlPacket::PingReq | ControlPacket::PingResp => return Ok(()),
        };
        if props.message_expiry.is_some() {
            return Err(CodecError::InvariantViolation("message expiry outside PUBLISH"));
        }
        Ok(())
    }
}

/// Destination for encoded bytes; a counter implements it for sizing.
pub trait Sink {
    fn put(&mut self, bytes: &[u8]);
}

impl Sink for Vec<u8> {
    fn put(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }
}

impl Sink for bytes::BytesMut {
    fn put(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }
}

#[derive(Default)]
struct Counter(usize);

impl Sink for Counter {
    fn put(&mut self, bytes: &[u8]) {
        self.0 += bytes.len();
    }
}

fn put_u16(out: &mut impl Sink, v: u16) {
    out.put(&v.to_be_bytes());
}

fn put_str(out: &mut impl Sink, s: &str) -> Result<(), CodecError> {
    put_binary(out, s.as_bytes())
}

fn put_binary(out: &mut impl Sink, b: &[u8]) -> Result<(), CodecError> {
    let len = u16::try_from(b.len()).map_err(|_| CodecError::InvariantViolation("string longer than 65535 bytes"))?;
    put_u16(out, len);
    out.put(b);
    Ok(())
}

fn properties_len(p: &Properties) -> usize {
    let mut c = Counter::default();
    write_properties_body(&mut c, p).expect("sizing never fails");
    c.0
}

fn write_properties_body(out: &mut impl Sink, p: &Properties) -> Result<(), CodecError> {
    if let Some(expiry) = p.message_expiry {
        out.put(&[PROP_MESSAGE_EXPIRY]);
        out.put(&expiry.to_be_bytes());
    }
    for (k, v) in &p.user {
        out.put(&[PROP_USER]);
        put_str(out, k)?;
        put_str(out, v)?;
    }
    Ok(())
}

fn write_properties(out: &mut impl Sink, p: &Properties) -> Result<(), CodecError> {
    let len = properties_len(p);
    encode_varint(u32::try_from(len).map_err(|_| CodecError::OversizePacket(len))?, out)?;
    write_properties_body(out, p)
}

fn write_ack(out: &mut impl Sink, a: &Ack) -> Result<(), CodecError> {
    put_u16(out, a.packet_id);
    if a.reason != reason::SUCCESS || !a.properties.is_empty() {
        out.put(&[a.reason]);
        if !a.properties.is_empty() {
            write_properties(out, &a.properties)?;
        }
    }
    Ok(())
}

fn write_body(out: &mut impl Sink, packet: &ControlPacket) -> Result<(), CodecError> {
    use ControlPacket as P;
    match packet {
        P::Connect(c) => {
            put_binary(out, PROTOCOL_NAME)?;
            out.put(&[PROTOCOL_LEVEL]);
            let flags =
                (c.username.is_some() as u8) << 7 | (c.password.is_some() as u8) << 6 | (c.clean_start as u8) << 1;
            out.put(&[flags]);
            put_u16(out, c.keep_alive);
            write_properties(out, &c.properties)?;
            put_str(out, &c.client_id)?;
            if let Some(u) = &c.username {
                put_str(out, u)?;
            }
            if let Some(p) = &c.password {
                put_binary(out, p)?;
            }
        }
        P::ConnAck(c) => {
            out.put(&[c.session_present as u8, c.reason]);
            write_properties(out, &c.properties)?;
        }
        P::Publish(p) => {
            put_str(out, p.topic.as_str())?;
            if let Some(id) = p.packet_id {
                put_u16(out, id);
            }
            write_properties(out, &p.properties)?;
            out.put(&p.payload);
        }
        P::PubAck(a) | P::PubRec(a) | P::PubRel(a) | P::PubComp(a) => write_ack(out, a)?,
        P::Subscribe(s) => {
            put_u16(out, s.packet_id);
            write_properties(out, &s.properties)?;
            for (f, o) in &s.filters {
                put_str(out, f.as_str())?;
                out.put(&[o.to_byte()]);
            }
        }
        P::SubAck(s) => {
            put_u16(out, s.packet_id);
            write_properties(out, &s.properties)?;
            out.put(&s.reasons);
        }
        P::Unsubscribe(s) => {
            put_u16(out, s.packet_id);
            write_properties(out, &s.properties)?;
            for f in &s.filters {
                put_str(out, f.as_str())?;
            }
        }
        P::UnsubAck(s) => {
            put_u16(out, s.packet_id);
            write_properties(out, &s.properties)?;
            out.put(&s.reasons);
        }
        P::PingReq | P::PingResp => {}
        P::Disconnect(d) => {
            if d.reason != reason::SUCCESS || !d.properties.is_empty() {
                out.put(&[d.reason]);
                if !d.properties.is_empty() {
                    write_properties(out, &d.properties)?;
                }
            }
        }
    }
    Ok(())
}

fn header_for(packet: &ControlPacket) -> Result<FixedHeader, CodecError> {
    packet.validate()?;
    let mut c = Counter::default();
    write_body(&mut c, packet)?;
    if c.0 > MAX_VARINT as usize {
        return Err(CodecError::OversizePacket(c.0));
    }
    Ok(FixedHeader {
        packet_type: packet.packet_type(),
        flags: packet.flags(),
        remaining_length: c.0 as u32,
    })
}

/// Appends the wire encoding of `packet` to `out`, returning the byte count.
pub fn encode_to(packet: &ControlPacket, out: &mut impl Sink) -> Result<usize, CodecError> {
    let header = header_for(packet)?;
    out.put(&[(header.packet_type as u8) << 4 | header.flags]);
    encode_varint(header.remaining_length, out)?;
    write_body(out, packet)?;
    Ok(header.encoded_len() + header.remaining_length as usize)
}

pub fn encode(packet: &ControlPacket) -> Result<Vec<u8>, CodecError> {
    let size = packet_size(packet)?;
    let mut out = Vec::with_capacity(size);
    encode_to(packet, &mut out)?;
    Ok(out)
}

/// Encoded length of `packet` in bytes, computed without materialising it.
pub fn packet_size(packet: &ControlPacket) -> Result<usize, CodecError> {
    let header = header_for(packet)?;
    Ok(header.encoded_len() + header.remaining_length as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Complete {
        packet: ControlPacket,
        consumed: usize,
    },
    /// At least `needed` more bytes are required before anything can be decided.
    Incomplete {
        needed: usize,
    },
}

/// Reads the fixed header and reports the total frame length, if available.
pub fn frame_length(buf: &[u8], limit: usize) -> Result<Option<(FixedHeader, usize)>, CodecError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let packet_type = PacketType::from_code(first >> 4).ok_or(CodecError::MalformedPacket("reserved packet type 0"))?;
    let flags = first & 0x0F;
    if let Some(required) = packet_type.fixed_flags() {
        if flags != required {
            return Err(CodecError::MalformedPacket("invalid fixed header flags"));
        }
    }
    let Some((remaining_length, vlen)) = decode_varint(&buf[1..])? else {
        return Ok(None);
    };
    let header = FixedHeader {
        packet_type,
        flags,
        remaining_length,
    };
    let total = 1 + vlen + remaining_length as usize;
    if total > limit {
        return Err(CodecError::PacketTooLarge { size: total, limit });
    }
    Ok(Some((header, total)))
}

pub fn decode(buf: &[u8]) -> Result<Decoded, CodecError> {
    decode_with_limit(buf, usize::MAX)
}

pub fn decode_with_limit(buf: &[u8], limit: usize) -> Result<Decoded, CodecError> {
    let Some((header, total)) = frame_length(buf, limit)? else {
        let needed = if buf.is_empty() { 2 } else { 1 };
        return Ok(Decoded::Incomplete { needed });
    };
    if buf.len() < total {
        return Ok(Decoded::Incomplete {
            needed: total - buf.len(),
        });
    }
    let body = &buf[header.encoded_len()..total];
    let packet = decode_body(&header, body)?;
    Ok(Decoded::Complete {
        packet,
        consumed: total,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::MalformedPacket("field runs past end of packet"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn binary(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(raw).map_err(|_| CodecError::MalformedPacket("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return Err(CodecError::MalformedPacket("NUL in UTF-8 string"));
        }
        Ok(s.to_owned())
    }

    fn varint(&mut self) -> Result<u32, CodecError> {
        match decode_varint(self.buf)? {
            Some((v, n)) => {
                self.buf = &self.buf[n..];
                Ok(v)
            }
            None => Err(CodecError::MalformedPacket("truncated variable byte integer")),
        }
    }

    fn properties(&mut self, allow_expiry: bool) -> Result<Properties, CodecError> {
        let len = self.varint()? as usize;
        let mut inner = Reader { buf: self.take(len)? };
        let mut props = Properties::default();
        while !inner.buf.is_empty() {
            match inner.varint()? {
                0x02 if allow_expiry => {
                    if props.message_expiry.is_some() {
                        return Err(CodecError::MalformedPacket("duplicate message expiry property"));
                    }
                    props.message_expiry = Some(inner.u32()?);
                }
                0x26 => {
                    let k = inner.string()?;
                    let v = inner.string()?;
                    props.user.push((k, v));
                }
                _ => return Err(CodecError::MalformedPacket("unsupported property identifier")),
            }
        }
        Ok(props)
    }

    fn packet_id(&mut self) -> Result<u16, CodecError> {
        match self.u16()? {
            0 => Err(CodecError::MalformedPacket("packet id 0")),
            id => Ok(id),
        }
    }

    fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::MalformedPacket("trailing bytes after packet"))
        }
    }
}

fn decode_ack(r: &mut Reader<'_>) -> Result<Ack, CodecError> {
    let packet_id = r.packet_id()?;
    let reason = if r.buf.is_empty() { reason::SUCCESS } else { r.u8()? };
    let properties = if r.buf.is_empty() {
        Properties::default()
    } else {
        r.properties(false)?
    };
    Ok(Ack {
        packet_id,
        reason,
        properties,
    })
}

fn decode_body(header: &FixedHeader, body: &[u8]) -> Result<ControlPacket, CodecError> {
    use ControlPacket as P;
    let mut r = Reader { buf: body };
    let packet = match header.packet_type {
        PacketType::Connect => {
            if r.binary()? != PROTOCOL_NAME {
                return Err(CodecError::MalformedPacket("protocol name is not MQTT"));
            }
            if r.u8()? != PROTOCOL_LEVEL {
                return Err(CodecError::MalformedPacket("unsupported protocol level"));
            }
            let flags = r.u8()?;
            if flags & 0x01 != 0 {
                return Err(CodecError::MalformedPacket("reserved connect flag set"));
            }
            if flags & 0x3C != 0 {
                return Err(CodecError::MalformedPacket("will messages are not supported"));
            }
            let has_user = flags & 0x80 != 0;
            let has_pass = flags & 0x40 != 0;
            let keep_alive = r.u16()?;
            let properties = r.properties(false)?;
            let client_id = r.string()?;
            if client_id.is_empty() {
                return Err(CodecError::MalformedPacket("empty client id"));
            }
            let username = if has_user { Some(r.string()?) } else { None };
            let password = if has_pass {
                Some(Bytes::copy_from_slice(r.binary()?))
            } else {
                None
            };
            if password.is_some() && username.is_none() {
                return Err(CodecError::MalformedPacket("password without username"));
            }
            P::Connect(Connect {
                client_id,
                clean_start: flags & 0x02 != 0,
                keep_alive,
                username,
                password,
                properties,
            })
        }
        PacketType::ConnAck => {
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(CodecError::MalformedPacket("reserved connack flags set"));
            }
            let reason = r.u8()?;
            let properties = r.properties(false)?;
            P::ConnAck(ConnAck {
                session_present: ack_flags & 1 != 0,
                reason,
                properties,
            })
        }
        PacketType::Publish => {
            let qos = QoS::from_u8((header.flags >> 1) & 0x03).ok_or(CodecError::MalformedPacket("publish QoS 3"))?;
            let dup = header.flags & 0x08 != 0;
            if dup && qos == QoS::AtMostOnce {
                return Err(CodecError::MalformedPacket("dup flag on QoS 0 publish"));
            }
            let topic = TopicName::new(r.string()?).map_err(|_| CodecError::MalformedPacket("invalid topic name"))?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                _ => Some(r.packet_id()?),
            };
            let properties = r.properties(true)?;
            let payload = Bytes::copy_from_slice(r.take(r.buf.len())?);
            P::Publish(Publish {
                topic,
                qos,
                dup,
                retain: header.flags & 0x01 != 0,
                packet_id,
                properties,
                payload,
            })
        }
        PacketType::PubAck => P::PubAck(decode_ack(&mut r)?),
        PacketType::PubRec => P::PubRec(decode_ack(&mut r)?),
        PacketType::PubRel => P::PubRel(decode_ack(&mut r)?),
        PacketType::PubComp => P::PubComp(decode_ack(&mut r)?),
        PacketType::Subscribe => {
            let packet_id = r.packet_id()?;
            let properties = r.properties(false)?;
            let mut filters = Vec::new();
            while !r.buf.is_empty() {
                let f =
                    TopicFilter::new(r.string()?).map_err(|_| CodecError::MalformedPacket("invalid topic filter"))?;
                filters.push((f, SubscribeOptions::from_byte(r.u8()?)?));
            }
            if filters.is_empty() {
                return Err(CodecError::MalformedPacket("SUBSCRIBE without filters"));
            }
            P::Subscribe(Subscribe {
                packet_id,
                properties,
                filters,
            })
        }
        PacketType::SubAck | PacketType::UnsubAck => {
            let packet_id = r.packet_id()?;
            let properties = r.properties(false)?;
            let reasons = r.take(r.buf.len())?.to_vec();
            if header.packet_type == PacketType::SubAck {
                P::SubAck(SubAck {
                    packet_id,
                    properties,
                    reasons,
                })
            } else {
                P::UnsubAck(UnsubAck {
                    packet_id,
                    properties,
                    reasons,
                })
            }
        }
        PacketType::Unsubscribe => {
            let packet_id = r.packet_id()?;
            let properties = r.properties(false)?;
            let mut filters = Vec::new();
            while !r.buf.is_empty() {
                filters.push(
                    TopicFilter::new(r.string()?).map_err(|_| CodecError::MalformedPacket("invalid topic filter"))?,
                );
            }
            if filters.is_empty() {
                return Err(CodecError::MalformedPacket("UNSUBSCRIBE without filters"));
            }
            P::Unsubscribe(Unsubscribe {
                packet_id,
                properties,
                filters,
            })
        }
        PacketType::PingReq => P::PingReq,
        PacketType::PingResp => P::PingResp,
        PacketType::Disconnect => {
            let reason = if r.buf.is_empty() { reason::SUCCESS } else { r.u8()? };
            let properties = if r.buf.is_empty() {
                Properties::default()
            } else {
                r.properties(false)?
            };
            P::Disconnect(Disconnect { reason, properties })
        }
        PacketType::Auth => return Err(CodecError::UnsupportedPacket(PacketType::Auth)),
    };
    r.finish()?;
    Ok(packet)
}
