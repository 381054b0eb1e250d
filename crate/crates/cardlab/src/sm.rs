//! Secure messaging: wrapping and unwrapping of APDUs under an
//! established channel. Commands carry the encrypted payload in DO'87,
//! the expected length in DO'97 and an 8-byte MAC in DO'8E; responses
//! carry DO'87 (when data is present), the status word in DO'99 and the
//! MAC in DO'8E. The send sequence counter increments before every
//! wrapped command and again before every wrapped response, and is bound
//! into each MAC, so replays and reordering surface as MAC failures.

use thiserror::Error;

use crate::codec::{CommandApdu, ResponseApdu};
use crate::cryptokit::{cbc_decrypt, cbc_encrypt, mac, pad, unpad, CipherSuite, SessionKeys};

/// Class byte bits announcing secure messaging with an authenticated header.
pub const CLA_SM: u8 = 0x0C;

const DO_CRYPTOGRAM: u8 = 0x87;
const DO_LE: u8 = 0x97;
const DO_STATUS: u8 = 0x99;
const DO_MAC: u8 = 0x8E;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmError {
    #[error("protected APDU structure invalid: {0}")]
    BadStructure(&'static str),
    #[error("message authentication code mismatch")]
    MacMismatch,
    #[error("cryptogram padding invalid")]
    BadCryptogram,
}

/// Is this command secure-messaging protected, per its class byte?
pub fn is_protected(cla: u8) -> bool {
    cla & CLA_SM == CLA_SM
}

fn encrypt_iv(keys: &SessionKeys) -> Vec<u8> {
    match keys.suite {
        // The 3DES profile encrypts with a zero IV; the AES profile uses
        // the encrypted counter so identical payloads never align.
        CipherSuite::TdesRetail => vec![0u8; 8],
        CipherSuite::Aes128Cmac => {
            cbc_encrypt(keys.suite, &keys.k_enc, &vec![0u8; 16], &keys.ssc).expect("ssc is one block")
        }
    }
}

fn encode_do(tag: u8, value: &[u8]) -> Vec<u8> {
    // Values here are at most a few hundred bytes; one- or two-byte
    // lengths suffice.
    let mut out = vec![tag];
    if value.len() <= 0x7F {
        out.push(value.len() as u8);
    } else {
        out.push(0x81);
        out.push(value.len() as u8);
    }
    out.extend_from_slice(value);
    out
}

/// Protect a command: encrypt the data field into DO'87, carry le in
/// DO'97, and MAC the masked header plus payload objects under the
/// incremented counter.
pub fn wrap_command(keys: &mut SessionKeys, cmd: &CommandApdu) -> CommandApdu {
    keys.increment_ssc();
    let block = keys.suite.block_size();
    let header = [cmd.cla | CLA_SM, cmd.ins, cmd.p1, cmd.p2];

    let mut payload = Vec::new();
    if !cmd.data.is_empty() {
        let ct = cbc_encrypt(keys.suite, &keys.k_enc, &encrypt_iv(keys), &pad(&cmd.data, block))
            .expect("padded data");
        let mut content = vec![0x01];
        content.extend(ct);
        payload.extend(encode_do(DO_CRYPTOGRAM, &content));
    }
    if let Some(le) = cmd.le {
        let le_bytes = if le <= 0xFF { vec![le as u8] } else { le.to_be_bytes().to_vec() };
        payload.extend(encode_do(DO_LE, &le_bytes));
    }

    let mut mac_input = keys.ssc.clone();
    mac_input.extend(pad(&header, block));
    mac_input.extend(&payload);
    let tag = mac(keys.suite, &keys.k_mac, &pad(&mac_input, block));
    payload.extend(encode_do(DO_MAC, &tag));

    CommandApdu {
        cla: header[0],
        ins: cmd.ins,
        p1: cmd.p1,
        p2: cmd.p2,
        data: payload,
        le: Some(0),
    }
}

/// Card-side inverse of [`wrap_command`]. Any structural deviation, MAC
/// mismatch or padding failure is an error; the counter still advances,
/// so a failed frame desynchronizes the channel by design.
pub fn unwrap_command(keys: &mut SessionKeys, wrapped: &CommandApdu) -> Result<CommandApdu, SmError> {
    keys.increment_ssc();
    if !is_protected(wrapped.cla) {
        return Err(SmError::BadStructure("class byte lacks secure-messaging bits"));
    }
    // The protected command always requests the full response and its
    // trailing le byte is outside the MAC; pin it to zero so tampering
    // there cannot go unnoticed.
    if wrapped.le != Some(0) {
        return Err(SmError::BadStructure("protected command le must be zero"));
    }
    let block = keys.suite.block_size();
    let (cryptogram, le, mac_region, received_mac) = split_dos(&wrapped.data)?;

    let header = [wrapped.cla, wrapped.ins, wrapped.p1, wrapped.p2];
    let mut mac_input = keys.ssc.clone();
    mac_input.extend(pad(&header, block));
    mac_input.extend(mac_region);
    let expected = mac(keys.suite, &keys.k_mac, &pad(&mac_input, block));
    if expected != received_mac {
        return Err(SmError::MacMismatch);
    }

    let data = match cryptogram {
        None => Vec::new(),
        Some(content) => {
            if content.first() != Some(&0x01) {
                return Err(SmError::BadStructure("cryptogram marker"));
            }
            let pt = cbc_decrypt(keys.suite, &keys.k_enc, &encrypt_iv(keys), &content[1..])
                .map_err(|_| SmError::BadCryptogram)?;
            unpad(&pt).map_err(|_| SmError::BadCryptogram)?.to_vec()
        }
    };
    Ok(CommandApdu {
        cla: wrapped.cla & !CLA_SM,
        ins: wrapped.ins,
        p1: wrapped.p1,
        p2: wrapped.p2,
        data,
        le,
    })
}

/// Protect a response: optional DO'87 cryptogram, DO'99 status, DO'8E MAC.
pub fn wrap_response(keys: &mut SessionKeys, resp: &ResponseApdu) -> ResponseApdu {
    keys.increment_ssc();
    let block = keys.suite.block_size();
    let mut payload = Vec::new();
    if !resp.data.is_empty() {
        let ct = cbc_encrypt(keys.suite, &keys.k_enc, &encrypt_iv(keys), &pad(&resp.data, block))
            .expect("padded data");
        let mut content = vec![0x01];
        content.extend(ct);
        payload.extend(encode_do(DO_CRYPTOGRAM, &content));
    }
    payload.extend(encode_do(DO_STATUS, &resp.sw.to_be_bytes()));

    let mut mac_input = keys.ssc.clone();
    mac_input.extend(&payload);
    let tag = mac(keys.suite, &keys.k_mac, &pad(&mac_input, block));
    payload.extend(encode_do(DO_MAC, &tag));

    ResponseApdu { data: payload, sw: resp.sw }
}

/// Terminal-side inverse of [`wrap_response`].
pub fn unwrap_response(keys: &mut SessionKeys, wrapped: &ResponseApdu) -> Result<ResponseApdu, SmError> {
    keys.increment_ssc();
    let block = keys.suite.block_size();
    let (cryptogram, sw_bytes, mac_region, received_mac) = split_response_dos(&wrapped.data)?;

    let mut mac_input = keys.ssc.clone();
    mac_input.extend(mac_region);
    let expected = mac(keys.suite, &keys.k_mac, &pad(&mac_input, block));
    if expected != received_mac {
        return Err(SmError::MacMismatch);
    }
    let sw = u16::from_be_bytes(sw_bytes);
    if sw != wrapped.sw {
        return Err(SmError::BadStructure("outer status word disagrees with DO'99"));
    }
    let data = match cryptogram {
        None => Vec::new(),
        Some(content) => {
            if content.first() != Some(&0x01) {
                return Err(SmError::BadStructure("cryptogram marker"));
            }
            let pt = cbc_decrypt(keys.suite, &keys.k_enc, &encrypt_iv(keys), &content[1..])
                .map_err(|_| SmError::BadCryptogram)?;
            unpad(&pt).map_err(|_| SmError::BadCryptogram)?.to_vec()
        }
    };
    Ok(ResponseApdu { data, sw })
}

/// Scan one secure-messaging data object, returning (tag, value, rest).
fn scan_do(input: &[u8]) -> Result<(u8, &[u8], &[u8]), SmError> {
    let (&tag, rest) = input.split_first().ok_or(SmError::BadStructure("empty object"))?;
    let (&first_len, rest) = rest.split_first().ok_or(SmError::BadStructure("missing length"))?;
    let (len, rest) = if first_len <= 0x7F {
        (usize::from(first_len), rest)
    } else if first_len == 0x81 {
        let (&l, rest) = rest.split_first().ok_or(SmError::BadStructure("truncated length"))?;
        if l <= 0x7F {
            return Err(SmError::BadStructure("non-canonical length"));
        }
        (usize::from(l), rest)
    } else {
        return Err(SmError::BadStructure("oversized length"));
    };
    if rest.len() < len {
        return Err(SmError::BadStructure("truncated value"));
    }
    let (value, rest) = rest.split_at(len);
    Ok((tag, value, rest))
}

/// Parse the DO sequence of a protected command: optional DO'87,
/// optional DO'97, mandatory trailing DO'8E. Returns the cryptogram, the
/// decoded le, the raw byte region the MAC covers, and the MAC itself.
fn split_dos(data: &[u8]) -> Result<(Option<Vec<u8>>, Option<u16>, &[u8], [u8; 8]), SmError> {
    let mut rest = data;
    let mut cryptogram = None;
    let mut le = None;

    let (tag, value, after) = scan_do(rest)?;
    let mut consumed = data.len() - after.len();
    if tag == DO_CRYPTOGRAM {
        cryptogram = Some(value.to_vec());
        rest = after;
        let (tag2, value2, after2) = scan_do(rest)?;
        if tag2 == DO_LE {
            le = Some(decode_le(value2)?);
            consumed = data.len() - after2.len();
            rest = after2;
        } else if tag2 == DO_MAC {
            return finish_mac(data, consumed, value2, after2, cryptogram, le);
        } else {
            return Err(SmError::BadStructure("unexpected object after cryptogram"));
        }
    } else if tag == DO_LE {
        le = Some(decode_le(value)?);
        rest = after;
    } else if tag == DO_MAC {
        return finish_mac(data, 0, value, after, cryptogram, le);
    } else {
        return Err(SmError::BadStructure("unexpected leading object"));
    }

    let (tag3, value3, after3) = scan_do(rest)?;
    if tag3 != DO_MAC {
        return Err(SmError::BadStructure("missing MAC object"));
    }
    finish_mac(data, consumed, value3, after3, cryptogram, le)
}

fn decode_le(value: &[u8]) -> Result<u16, SmError> {
    match value {
        [b] => Ok(u16::from(*b)),
        [hi, lo] => Ok(u16::from_be_bytes([*hi, *lo])),
        _ => Err(SmError::BadStructure("le width")),
    }
}

fn finish_mac<'a>(
    data: &'a [u8],
    mac_region_len: usize,
    mac_value: &[u8],
    after: &[u8],
    cryptogram: Option<Vec<u8>>,
    le: Option<u16>,
) -> Result<(Option<Vec<u8>>, Option<u16>, &'a [u8], [u8; 8]), SmError> {
    if !after.is_empty() {
        return Err(SmError::BadStructure("trailing bytes after MAC"));
    }
    let mac: [u8; 8] = mac_value.try_into().map_err(|_| SmError::BadStructure("MAC width"))?;
    Ok((cryptogram, le, &data[..mac_region_len], mac))
}

/// Parse the DO sequence of a protected response: optional DO'87,
/// mandatory DO'99, mandatory trailing DO'8E.
fn split_response_dos(data: &[u8]) -> Result<(Option<Vec<u8>>, [u8; 2], &[u8], [u8; 8]), SmError> {
    let mut rest = data;
    let mut cryptogram = None;

    let (tag, value, after) = scan_do(rest)?;
    if tag == DO_CRYPTOGRAM {
        cryptogram = Some(value.to_vec());
        rest = after;
    }
    let (tag, value, after) = if cryptogram.is_some() {
        scan_do(rest)?
    } else {
        (tag, value, after)
    };
    if tag != DO_STATUS {
        return Err(SmError::BadStructure("missing status object"));
    }
    let sw: [u8; 2] = value.try_into().map_err(|_| SmError::BadStructure("status width"))?;
    let mac_region_len = data.len() - after.len();

    let (tag, value, after) = scan_do(after)?;
    if tag != DO_MAC {
        return Err(SmError::BadStructure("missing MAC object"));
    }
    if !after.is_empty() {
        return Err(SmError::BadStructure("trailing bytes after MAC"));
    }
    let mac: [u8; 8] = value.try_into().map_err(|_| SmError::BadStructure("MAC width"))?;
    Ok((cryptogram, sw, &data[..mac_region_len], mac))
}
