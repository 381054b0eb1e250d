//! BER-TLV and ISO 7816-4 APDU encoding.
//!
//! Everything the card and terminal exchange is built out of these two
//! layers: TLV data objects inside APDU bodies, and the APDU framing
//! itself. Both codecs are total: any input byte string maps to a value
//! or a typed error, never a panic.

use std::fmt;

use thiserror::Error;

/// Maximum nesting depth accepted by the TLV decoder.
const MAX_TLV_DEPTH: usize = 48;

/// Maximum encodable TLV value length (definite form, up to 3 length bytes).
const MAX_TLV_LEN: usize = 1 << 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated TLV: {0}")]
    Truncated(&'static str),
    #[error("indefinite-length encoding is not supported")]
    IndefiniteLength,
    #[error("tag encodings longer than two bytes are not supported")]
    TagTooLong,
    #[error("invalid tag 0x{0:04X}")]
    InvalidTag(u16),
    #[error("length field not in canonical form")]
    NonCanonicalLength,
    #[error("declared length exceeds supported maximum")]
    LengthTooLarge,
    #[error("TLV nesting deeper than {MAX_TLV_DEPTH} levels")]
    NestingTooDeep,
    #[error("constructed bit inconsistent with node kind for tag 0x{0:04X}")]
    ConstructedBitMismatch(u16),
    #[error("malformed APDU: {0}")]
    MalformedApdu(&'static str),
}

/// ISO 7816-4 status words used as the error ABI across the lab.
pub mod sw {
    pub const OK: u16 = 0x9000;
    /// Warning: authentication failed (no further detail).
    pub const AUTH_FAILED: u16 = 0x6300;
    /// Reference data blocked (retry counter exhausted).
    pub const BLOCKED: u16 = 0x6983;
    pub const SECURITY_STATUS_NOT_SATISFIED: u16 = 0x6982;
    /// Expected secure-messaging objects missing (plaintext on an open channel).
    pub const SM_EXPECTED: u16 = 0x6987;
    /// Secure-messaging objects incorrect (MAC or structure failure).
    pub const SM_INCORRECT: u16 = 0x6988;
    pub const WRONG_DATA: u16 = 0x6A80;
    pub const FILE_NOT_FOUND: u16 = 0x6A82;
    pub const WRONG_LENGTH: u16 = 0x6700;
    pub const INS_NOT_SUPPORTED: u16 = 0x6D00;
    pub const CLA_NOT_SUPPORTED: u16 = 0x6E00;

    /// 63CX: verification failed, X attempts remaining.
    pub fn retries_remaining(n: u8) -> u16 {
        0x63C0 | u16::from(n & 0x0F)
    }
}

fn first_tag_byte(tag: u16) -> u8 {
    if tag > 0xFF {
        (tag >> 8) as u8
    } else {
        tag as u8
    }
}

/// True if the tag's constructed bit (0x20 of the first byte) is set.
pub fn tag_is_constructed(tag: u16) -> bool {
    first_tag_byte(tag) & 0x20 != 0
}

fn validate_tag(tag: u16) -> Result<(), CodecError> {
    if tag <= 0xFF {
        // Single-byte tag: 0x00 is reserved, and low bits 11111 announce a
        // multi-byte tag, so neither may stand alone.
        if tag == 0 || tag & 0x1F == 0x1F {
            return Err(CodecError::InvalidTag(tag));
        }
    } else {
        let hi = (tag >> 8) as u8;
        let lo = (tag & 0xFF) as u8;
        if hi & 0x1F != 0x1F || lo & 0x80 != 0 {
            return Err(CodecError::InvalidTag(tag));
        }
    }
    Ok(())
}

/// A BER-TLV data object: either a primitive carrying raw bytes or a
/// constructed object carrying an ordered child list.
#[derive(Clone, PartialEq, Eq)]
pub enum TlvNode {
    Primitive { tag: u16, value: Vec<u8> },
    Constructed { tag: u16, children: Vec<TlvNode> },
}

impl fmt::Debug for TlvNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TlvNode::Primitive { tag, value } => {
                write!(f, "Tlv({:02X}: {})", tag, hex::encode(value))
            }
            TlvNode::Constructed { tag, children } => {
                write!(f, "Tlv({:02X}: {:?})", tag, children)
            }
        }
    }
}

impl TlvNode {
    pub fn primitive(tag: u16, value: impl Into<Vec<u8>>) -> Result<TlvNode, CodecError> {
        validate_tag(tag)?;
        if tag_is_constructed(tag) {
            return Err(CodecError::ConstructedBitMismatch(tag));
        }
        Ok(TlvNode::Primitive { tag, value: value.into() })
    }

    pub fn constructed(tag: u16, children: Vec<TlvNode>) -> Result<TlvNode, CodecError> {
        validate_tag(tag)?;
        if !tag_is_constructed(tag) {
            return Err(CodecError::ConstructedBitMismatch(tag));
        }
        Ok(TlvNode::Constructed { tag, children })
    }

    pub fn tag(&self) -> u16 {
        match self {
            TlvNode::Primitive { tag, .. } | TlvNode::Constructed { tag, .. } => *tag,
        }
    }

    /// Raw value of a primitive node.
    pub fn value(&self) -> Option<&[u8]> {
        match self {
            TlvNode::Primitive { value, .. } => Some(value),
            TlvNode::Constructed { .. } => None,
        }
    }

    pub fn children(&self) -> Option<&[TlvNode]> {
        match self {
            TlvNode::Constructed { children, .. } => Some(children),
            TlvNode::Primitive { .. } => None,
        }
    }

    /// First direct child with the given tag.
    pub fn find(&self, tag: u16) -> Option<&TlvNode> {
        self.children()?.iter().find(|c| c.tag() == tag)
    }

    /// Value bytes of the first direct child with the given tag.
    pub fn find_value(&self, tag: u16) -> Option<&[u8]> {
        self.find(tag)?.value()
    }
}

fn encode_tag(tag: u16, out: &mut Vec<u8>) {
    if tag > 0xFF {
        out.push((tag >> 8) as u8);
        out.push((tag & 0xFF) as u8);
    } else {
        out.push(tag as u8);
    }
}

fn encode_length(len: usize, out: &mut Vec<u8>) -> Result<(), CodecError> {
    if len >= MAX_TLV_LEN {
        return Err(CodecError::LengthTooLarge);
    }
    if len <= 0x7F {
        out.push(len as u8);
    } else if len <= 0xFF {
        out.push(0x81);
        out.push(len as u8);
    } else if len <= 0xFFFF {
        out.push(0x82);
        out.extend_from_slice(&(len as u16).to_be_bytes());
    } else {
        out.push(0x83);
        out.push((len >> 16) as u8);
        out.push((len >> 8) as u8);
        out.push(len as u8);
    }
    Ok(())
}

/// Encode one node as definite-length BER. Long-form length is used
/// exactly when the value exceeds 127 bytes.
pub fn tlv_encode(node: &TlvNode) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    encode_into(node, &mut out)?;
    Ok(out)
}

fn encode_into(node: &TlvNode, out: &mut Vec<u8>) -> Result<(), CodecError> {
    validate_tag(node.tag())?;
    match node {
        TlvNode::Primitive { tag, value } => {
            encode_tag(*tag, out);
            encode_length(value.len(), out)?;
            out.extend_from_slice(value);
        }
        TlvNode::Constructed { tag, children } => {
            let mut body = Vec::new();
            for child in children {
                encode_into(child, &mut body)?;
            }
            encode_tag(*tag, out);
            encode_length(body.len(), out)?;
            out.extend_from_slice(&body);
        }
    }
    Ok(())
}

/// Decode exactly one TLV object from the front of `input`, returning the
/// node and the unconsumed suffix. Constructed values are parsed
/// recursively and must fill their declared length exactly.
pub fn tlv_decode(input: &[u8]) -> Result<(TlvNode, &[u8]), CodecError> {
    decode_at_depth(input, 0)
}

/// Decode a sequence of TLV objects that must consume `input` exactly.
pub fn tlv_decode_all(mut input: &[u8]) -> Result<Vec<TlvNode>, CodecError> {
    let mut nodes = Vec::new();
    while !input.is_empty() {
        let (node, rest) = tlv_decode(input)?;
        nodes.push(node);
        input = rest;
    }
    Ok(nodes)
}

fn decode_at_depth(input: &[u8], depth: usize) -> Result<(TlvNode, &[u8]), CodecError> {
    if depth > MAX_TLV_DEPTH {
        return Err(CodecError::NestingTooDeep);
    }
    let (tag, rest) = decode_tag(input)?;
    let (len, rest) = decode_length(rest)?;
    if rest.len() < len {
        return Err(CodecError::Truncated("value shorter than declared length"));
    }
    let (value, remaining) = rest.split_at(len);
    let node = if tag_is_constructed(tag) {
        let mut children = Vec::new();
        let mut inner = value;
        while !inner.is_empty() {
            let (child, next) = decode_at_depth(inner, depth + 1)?;
            children.push(child);
            inner = next;
        }
        TlvNode::Constructed { tag, children }
    } else {
        TlvNode::Primitive { tag, value: value.to_vec() }
    };
    Ok((node, remaining))
}

fn decode_tag(input: &[u8]) -> Result<(u16, &[u8]), CodecError> {
    let (&first, rest) = input.split_first().ok_or(CodecError::Truncated("empty input"))?;
    if first == 0 {
        return Err(CodecError::InvalidTag(0));
    }
    if first & 0x1F != 0x1F {
        return Ok((u16::from(first), rest));
    }
    let (&second, rest) = rest.split_first().ok_or(CodecError::Truncated("tag"))?;
    if second & 0x80 != 0 {
        return Err(CodecError::TagTooLong);
    }
    Ok((u16::from(first) << 8 | u16::from(second), rest))
}

fn decode_length(input: &[u8]) -> Result<(usize, &[u8]), CodecError> {
    let (&first, rest) = input.split_first().ok_or(CodecError::Truncated("length"))?;
    if first <= 0x7F {
        return Ok((usize::from(first), rest));
    }
    if first == 0x80 {
        return Err(CodecError::IndefiniteLength);
    }
    let count = usize::from(first & 0x7F);
    if count > 3 {
        return Err(CodecError::LengthTooLarge);
    }
    if rest.len() < count {
        return Err(CodecError::Truncated("length bytes"));
    }
    let mut len = 0usize;
    for &b in &rest[..count] {
        len = len << 8 | usize::from(b);
    }
    // Require the canonical (minimal) form so encode and decode stay exact
    // inverses of each other.
    let minimal = match len {
        0..=0x7F => 0,
        0x80..=0xFF => 1,
        0x100..=0xFFFF => 2,
        _ => 3,
    };
    if minimal != count {
        return Err(CodecError::NonCanonicalLength);
    }
    Ok((len, &rest[count..]))
}

/// An ISO 7816-4 command APDU. `le` is the expected response length, with
/// 0 meaning "as much as available".
#[derive(Clone, PartialEq, Eq)]
pub struct CommandApdu {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    pub le: Option<u16>,
}

impl fmt::Debug for CommandApdu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Apdu({:02X} {:02X} {:02X} {:02X}, data={}, le={:?})",
            self.cla,
            self.ins,
            self.p1,
            self.p2,
            hex::encode(&self.data),
            self.le
        )
    }
}

impl CommandApdu {
    pub fn new(cla: u8, ins: u8, p1: u8, p2: u8) -> Self {
        CommandApdu { cla, ins, p1, p2, data: Vec::new(), le: None }
    }

    pub fn with_data(mut self, data: impl Into<Vec<u8>>) -> Self {
        self.data = data.into();
        self
    }

    pub fn with_le(mut self, le: u16) -> Self {
        self.le = Some(le);
        self
    }

    /// ISO 7816-4 case (1-4), determined by data and le presence.
    pub fn case(&self) -> u8 {
        match (self.data.is_empty(), self.le.is_some()) {
            (true, false) => 1,
            (true, true) => 2,
            (false, false) => 3,
            (false, true) => 4,
        }
    }
}

/// Serialize a command APDU, preferring the short form whenever both the
/// data length and le fit in it.
pub fn encode_command(cmd: &CommandApdu) -> Vec<u8> {
    assert!(cmd.data.len() <= 0xFFFF, "command data exceeds 65535 bytes");
    let mut out = vec![cmd.cla, cmd.ins, cmd.p1, cmd.p2];
    let short = cmd.data.len() <= 0xFF && cmd.le.map_or(true, |le| le <= 0xFF);
    if short {
        if !cmd.data.is_empty() {
            out.push(cmd.data.len() as u8);
            out.extend_from_slice(&cmd.data);
        }
        if let Some(le) = cmd.le {
            out.push(le as u8);
        }
    } else {
        if !cmd.data.is_empty() {
            out.push(0x00);
            out.extend_from_slice(&(cmd.data.len() as u16).to_be_bytes());
            out.extend_from_slice(&cmd.data);
            if let Some(le) = cmd.le {
                out.extend_from_slice(&le.to_be_bytes());
            }
        } else if let Some(le) = cmd.le {
            out.push(0x00);
            out.extend_from_slice(&le.to_be_bytes());
        }
    }
    out
}

/// Parse a command APDU. Inverse of [`encode_command`] on well-formed
/// input; anything inconsistent is a [`CodecError::MalformedApdu`].
pub fn decode_command(input: &[u8]) -> Result<CommandApdu, CodecError> {
    if input.len() < 4 {
        return Err(CodecError::MalformedApdu("header shorter than 4 bytes"));
    }
    let (cla, ins, p1, p2) = (input[0], input[1], input[2], input[3]);
    let body = &input[4..];
    let mut cmd = CommandApdu::new(cla, ins, p1, p2);
    match body.len() {
        0 => {}
        1 => {
            cmd.le = Some(u16::from(body[0]));
        }
        _ if body[0] != 0 => {
            let lc = usize::from(body[0]);
            if body.len() == 1 + lc {
                cmd.data = body[1..].to_vec();
            } else if body.len() == 1 + lc + 1 {
                cmd.data = body[1..1 + lc].to_vec();
                cmd.le = Some(u16::from(body[1 + lc]));
            } else {
                return Err(CodecError::MalformedApdu("Lc inconsistent with body length"));
            }
        }
        3 => {
            // Extended case 2: 00 || two-byte le.
            cmd.le = Some(u16::from_be_bytes([body[1], body[2]]));
        }
        _ => {
            // Extended cases 3/4: 00 || two-byte Lc || data [|| two-byte le].
            if body.len() < 4 {
                return Err(CodecError::MalformedApdu("extended body too short"));
            }
            let lc = usize::from(u16::from_be_bytes([body[1], body[2]]));
            if lc == 0 {
                return Err(CodecError::MalformedApdu("extended Lc of zero"));
            }
            if body.len() == 3 + lc {
                cmd.data = body[3..].to_vec();
            } else if body.len() == 3 + lc + 2 {
                cmd.data = body[3..3 + lc].to_vec();
                cmd.le = Some(u16::from_be_bytes([body[3 + lc], body[4 + lc]]));
            } else {
                return Err(CodecError::MalformedApdu("extended Lc inconsistent with body"));
            }
        }
    }
    Ok(cmd)
}

/// An ISO 7816-4 response APDU: optional data followed by the status word.
#[derive(Clone, PartialEq, Eq)]
pub struct ResponseApdu {
    pub data: Vec<u8>,
    pub sw: u16,
}

impl fmt::Debug for ResponseApdu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Resp({}, sw={:04X})", hex::encode(&self.data), self.sw)
    }
}

impl ResponseApdu {
    pub fn ok(data: impl Into<Vec<u8>>) -> Self {
        ResponseApdu { data: data.into(), sw: sw::OK }
    }

    pub fn status(sw: u16) -> Self {
        ResponseApdu { data: Vec::new(), sw }
    }

    pub fn is_success(&self) -> bool {
        self.sw == sw::OK
    }
}

pub fn encode_response(resp: &ResponseApdu) -> Vec<u8> {
    let mut out = resp.data.clone();
    out.extend_from_slice(&resp.sw.to_be_bytes());
    out
}

pub fn decode_response(input: &[u8]) -> Result<ResponseApdu, CodecError> {
    if input.len() < 2 {
        return Err(CodecError::MalformedApdu("response shorter than status word"));
    }
    let (data, sw) = input.split_at(input.len() - 2);
    Ok(ResponseApdu { data: data.to_vec(), sw: u16::from_be_bytes([sw[0], sw[1]]) })
}
