//! The inspection system: initiator side of the access, authentication
//! and verification protocols, plus the composite document inspection
//! flow that produces a verdict report.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::card::{
    PasswordType, EPASSPORT_AID, INS_EXTERNAL_AUTHENTICATE, INS_GENERAL_AUTHENTICATE,
    INS_GET_CHALLENGE, INS_INTERNAL_AUTHENTICATE, INS_MSE_SET, INS_PSO, INS_READ_BINARY,
    INS_SELECT, READ_CHUNK, TAG_DYNAMIC_AUTH, TAG_ENCRYPTED_NONCE,
    TAG_EPHEMERAL_KEY_CARD, TAG_EPHEMERAL_KEY_TERMINAL, TAG_MAPPING_KEY_CARD,
    TAG_MAPPING_KEY_TERMINAL, TAG_MSE_PASSWORD, TAG_MSE_SUITE, TAG_TOKEN_CARD, TAG_TOKEN_TERMINAL,
};
use crate::codec::{
    decode_response, encode_command, sw, tlv_decode, tlv_encode, CommandApdu, ResponseApdu, TlvNode,
};
use crate::cryptokit::{
    cbc_decrypt, cbc_encrypt, ecdh, ecdh_point, kdf, mac, pad, scalar_from_bytes, sign,
    CipherSuite, Drbg, EcKeyPair, KdfPurpose, SessionKeys,
};
use crate::lds::{
    dg_fid, dg_number_for_tag, parse_chip_key, verify_sod_raw, PaReport, EF_COM_FID, EF_SOD_FID,
};
use crate::pki::{SimpleCert, TrustStore, LAB_EPOCH};
use crate::relay::{distance_bound_check, measure_rtt, DistanceVerdict, RttStats};
use crate::sm;
use crate::transport::{Channel, TransportError};
use p256::ProjectivePoint;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("authentication failed: {0}")]
    AuthenticationFailed(String),
    #[error("reference data blocked")]
    Blocked,
    #[error("access denied")]
    AccessDenied,
    #[error("file not found")]
    NotFound,
    #[error("secure channel lost")]
    SessionLost,
    #[error("card answered {0:04X}")]
    Card(u16),
    #[error("malformed response: {0}")]
    Malformed(&'static str),
}

/// Which protocol produced a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionKind {
    Bac,
    Pace(PasswordType),
    ChipAuth,
}

/// Terminal half of an established secure channel. The counter mirrors
/// the card's exactly; any divergence surfaces as a MAC failure and the
/// session is declared lost, never resynchronized.
#[derive(Debug)]
pub struct SecureSession {
    keys: SessionKeys,
    pub kind: SessionKind,
    alive: bool,
}

impl SecureSession {
    pub fn suite(&self) -> CipherSuite {
        self.keys.suite
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    /// Test hook: expose the session keys so white-box checks can
    /// compare both sides of a channel.
    pub fn keys(&self) -> &SessionKeys {
        &self.keys
    }

    /// Protect one command under this session without sending it,
    /// advancing the counter exactly as a send would.
    pub fn protect(&mut self, cmd: &CommandApdu) -> CommandApdu {
        sm::wrap_command(&mut self.keys, cmd)
    }

    /// Send one command under secure messaging and unwrap the reply.
    pub fn transceive(
        &mut self,
        channel: &mut dyn Channel,
        cmd: &CommandApdu,
    ) -> Result<ResponseApdu, ProtocolError> {
        if !self.alive {
            return Err(ProtocolError::SessionLost);
        }
        let wrapped = self.protect(cmd);
        let (raw, _) = channel.exchange(&encode_command(&wrapped))?;
        let response = decode_response(&raw).map_err(|_| ProtocolError::Malformed("response"))?;
        if response.data.is_empty()
            && (response.sw == sw::SM_INCORRECT || response.sw == sw::SM_EXPECTED)
        {
            // The card refused the frame in plaintext: its channel is gone.
            self.alive = false;
            return Err(ProtocolError::SessionLost);
        }
        let inner = match sm::unwrap_response(&mut self.keys, &response) {
            Ok(inner) => inner,
            Err(_) => {
                self.alive = false;
                return Err(ProtocolError::SessionLost);
            }
        };
        // Authentication failures reset the card side; mirror that here.
        if inner.sw == sw::AUTH_FAILED || inner.sw == sw::BLOCKED || inner.sw & 0xFFF0 == 0x63C0 {
            self.alive = false;
        }
        Ok(inner)
    }
}

fn plain_exchange(
    channel: &mut dyn Channel,
    cmd: &CommandApdu,
) -> Result<ResponseApdu, ProtocolError> {
    let (raw, _) = channel.exchange(&encode_command(cmd))?;
    decode_response(&raw).map_err(|_| ProtocolError::Malformed("response"))
}

/// Select the travel-document application.
pub fn select_application(channel: &mut dyn Channel) -> Result<(), ProtocolError> {
    let cmd = CommandApdu::new(0, INS_SELECT, 0x04, 0x0C).with_data(EPASSPORT_AID.to_vec());
    let resp = plain_exchange(channel, &cmd)?;
    if resp.is_success() {
        Ok(())
    } else {
        Err(ProtocolError::Card(resp.sw))
    }
}

/// Run basic access control as initiator: challenge the card, prove
/// knowledge of the MRZ-derived keys, and derive the session.
pub fn run_bac(
    channel: &mut dyn Channel,
    bac_seed: &[u8; 16],
    rng: &mut Drbg,
) -> Result<SecureSession, ProtocolError> {
    select_application(channel)?;
    let suite = CipherSuite::TdesRetail;
    let k_enc = kdf(bac_seed, KdfPurpose::Encryption, suite);
    let k_mac = kdf(bac_seed, KdfPurpose::Mac, suite);

    let challenge = plain_exchange(channel, &CommandApdu::new(0, INS_GET_CHALLENGE, 0, 0).with_le(8))?;
    if !challenge.is_success() || challenge.data.len() != 8 {
        return Err(ProtocolError::AuthenticationFailed("challenge refused".into()));
    }
    let rnd_ic: [u8; 8] = challenge.data.as_slice().try_into().unwrap();
    let mut rnd_ifd = [0u8; 8];
    rng.fill(&mut rnd_ifd);
    let mut k_ifd = [0u8; 16];
    rng.fill(&mut k_ifd);

    let mut s = Vec::with_capacity(32);
    s.extend_from_slice(&rnd_ifd);
    s.extend_from_slice(&rnd_ic);
    s.extend_from_slice(&k_ifd);
    let e_ifd = cbc_encrypt(suite, &k_enc, &[0u8; 8], &s).expect("aligned");
    let m_ifd = mac(suite, &k_mac, &pad(&e_ifd, 8));
    let mut payload = e_ifd;
    payload.extend_from_slice(&m_ifd);

    let cmd = CommandApdu::new(0, INS_EXTERNAL_AUTHENTICATE, 0, 0).with_data(payload).with_le(40);
    let resp = plain_exchange(channel, &cmd)?;
    if resp.sw != sw::OK {
        return Err(ProtocolError::AuthenticationFailed(format!("card answered {:04X}", resp.sw)));
    }
    if resp.data.len() != 40 {
        return Err(ProtocolError::AuthenticationFailed("step-2 response malformed".into()));
    }
    // Authenticate the card's response before trusting any of it.
    let (e_ic, m_ic) = resp.data.split_at(32);
    if mac(suite, &k_mac, &pad(e_ic, 8)) != m_ic {
        return Err(ProtocolError::AuthenticationFailed("step-2 response MAC invalid".into()));
    }
    let r = cbc_decrypt(suite, &k_enc, &[0u8; 8], e_ic).expect("aligned");
    if r[0..8] != rnd_ic || r[8..16] != rnd_ifd {
        return Err(ProtocolError::AuthenticationFailed("nonce echo mismatch".into()));
    }
    let k_ic: [u8; 16] = r[16..32].try_into().unwrap();

    let mut seed = [0u8; 16];
    for i in 0..16 {
        seed[i] = k_ifd[i] ^ k_ic[i];
    }
    let mut ssc = Vec::with_capacity(8);
    ssc.extend_from_slice(&rnd_ic[4..]);
    ssc.extend_from_slice(&rnd_ifd[4..]);
    Ok(SecureSession {
        keys: SessionKeys::derive(&seed, suite, ssc),
        kind: SessionKind::Bac,
        alive: true,
    })
}

fn general_authenticate(
    channel: &mut dyn Channel,
    children: Vec<TlvNode>,
) -> Result<TlvNode, ProtocolError> {
    let data = tlv_encode(&TlvNode::constructed(TAG_DYNAMIC_AUTH, children).unwrap()).unwrap();
    let cmd = CommandApdu::new(0, INS_GENERAL_AUTHENTICATE, 0, 0).with_data(data).with_le(0);
    let resp = plain_exchange(channel, &cmd)?;
    match resp.sw {
        sw::OK => {}
        sw::BLOCKED => return Err(ProtocolError::Blocked),
        other if other == sw::AUTH_FAILED || other & 0xFFF0 == 0x63C0 => {
            return Err(ProtocolError::AuthenticationFailed(format!("card answered {other:04X}")));
        }
        other => return Err(ProtocolError::Card(other)),
    }
    let (node, _) = tlv_decode(&resp.data).map_err(|_| ProtocolError::Malformed("dynamic data"))?;
    if node.tag() != TAG_DYNAMIC_AUTH {
        return Err(ProtocolError::Malformed("dynamic data tag"));
    }
    Ok(node)
}

/// Run password-authenticated establishment as initiator. The final
/// token check is the only place a wrong password can show, and on
/// failure no protected command is ever sent.
pub fn run_pace(
    channel: &mut dyn Channel,
    password: &[u8],
    password_type: PasswordType,
    suite: CipherSuite,
    rng: &mut Drbg,
) -> Result<SecureSession, ProtocolError> {
    select_application(channel)?;
    let block = suite.block_size();

    // Select authentication parameters.
    let mut mse_data = tlv_encode(&TlvNode::primitive(TAG_MSE_SUITE, [suite.id_byte()]).unwrap()).unwrap();
    mse_data.extend(
        tlv_encode(&TlvNode::primitive(TAG_MSE_PASSWORD, [password_type.id_byte()]).unwrap())
            .unwrap(),
    );
    let resp =
        plain_exchange(channel, &CommandApdu::new(0, INS_MSE_SET, 0xC1, 0xA4).with_data(mse_data))?;
    match resp.sw {
        sw::OK => {}
        sw::BLOCKED => return Err(ProtocolError::Blocked),
        other => return Err(ProtocolError::Card(other)),
    }

    // Round 1: fetch the encrypted nonce and decrypt it with the
    // password key.
    let round1 = general_authenticate(channel, vec![])?;
    let encrypted_nonce = round1
        .find_value(TAG_ENCRYPTED_NONCE)
        .ok_or(ProtocolError::Malformed("encrypted nonce"))?;
    let k_pi = kdf(password, KdfPurpose::Password, suite);
    let nonce = cbc_decrypt(suite, &k_pi, &vec![0u8; block], encrypted_nonce)
        .map_err(|_| ProtocolError::Malformed("nonce width"))?;

    // Round 2: generic mapping to G' = s*G + H.
    let mapping_key = EcKeyPair::generate(rng);
    let round2 = general_authenticate(
        channel,
        vec![TlvNode::primitive(TAG_MAPPING_KEY_TERMINAL, mapping_key.public_bytes()).unwrap()],
    )?;
    let card_mapping = round2
        .find_value(TAG_MAPPING_KEY_CARD)
        .ok_or(ProtocolError::Malformed("card mapping key"))?;
    let h = ecdh_point(mapping_key.secret(), card_mapping)
        .map_err(|_| ProtocolError::Malformed("card mapping point"))?;
    let mapped_generator = ProjectivePoint::GENERATOR * scalar_from_bytes(&nonce) + h;

    // Round 3: ephemeral agreement on the mapped generator.
    let ephemeral = EcKeyPair::generate_on(rng, &mapped_generator);
    let my_public = ephemeral.public_bytes();
    let round3 = general_authenticate(
        channel,
        vec![TlvNode::primitive(TAG_EPHEMERAL_KEY_TERMINAL, my_public.clone()).unwrap()],
    )?;
    let card_public = round3
        .find_value(TAG_EPHEMERAL_KEY_CARD)
        .ok_or(ProtocolError::Malformed("card ephemeral key"))?
        .to_vec();
    if card_public == my_public {
        return Err(ProtocolError::AuthenticationFailed("reflected ephemeral key".into()));
    }
    let shared = ecdh(ephemeral.secret(), &card_public)
        .map_err(|_| ProtocolError::Malformed("card ephemeral point"))?;
    let keys = SessionKeys::derive(&shared, suite, SessionKeys::zero_ssc(suite));

    // Round 4: exchange and verify authentication tokens. The card's
    // token must verify before the session is used for anything.
    let my_token = mac(suite, &keys.k_mac, &pad(&card_public, block));
    let round4 = general_authenticate(
        channel,
        vec![TlvNode::primitive(TAG_TOKEN_TERMINAL, my_token.to_vec()).unwrap()],
    )?;
    let card_token =
        round4.find_value(TAG_TOKEN_CARD).ok_or(ProtocolError::Malformed("card token"))?;
    let expected = mac(suite, &keys.k_mac, &pad(&my_public, block));
    if card_token != expected {
        return Err(ProtocolError::AuthenticationFailed("card token mismatch".into()));
    }

    Ok(SecureSession { keys, kind: SessionKind::Pace(password_type), alive: true })
}

/// Select and read a complete elementary file through the channel,
/// reassembling it chunk by chunk.
pub fn read_ef(
    channel: &mut dyn Channel,
    session: &mut SecureSession,
    fid: u16,
) -> Result<Vec<u8>, ProtocolError> {
    let select = CommandApdu::new(0, INS_SELECT, 0x02, 0x0C).with_data(fid.to_be_bytes().to_vec());
    let resp = session.transceive(channel, &select)?;
    match resp.sw {
        sw::OK => {}
        sw::SECURITY_STATUS_NOT_SATISFIED => return Err(ProtocolError::AccessDenied),
        sw::FILE_NOT_FOUND => return Err(ProtocolError::NotFound),
        other => return Err(ProtocolError::Card(other)),
    }
    let mut content = Vec::new();
    loop {
        let offset = content.len();
        if offset > 0x7FFF {
            return Err(ProtocolError::Malformed("file exceeds addressable range"));
        }
        let [p1, p2] = (offset as u16).to_be_bytes();
        let read = CommandApdu::new(0, INS_READ_BINARY, p1, p2).with_le(READ_CHUNK);
        let resp = session.transceive(channel, &read)?;
        match resp.sw {
            sw::OK => {}
            sw::SECURITY_STATUS_NOT_SATISFIED => return Err(ProtocolError::AccessDenied),
            sw::FILE_NOT_FOUND => return Err(ProtocolError::NotFound),
            other => return Err(ProtocolError::Card(other)),
        }
        let n = resp.data.len();
        content.extend(resp.data);
        if n < usize::from(READ_CHUNK) {
            return Ok(content);
        }
    }
}

/// Read manifest, security object and every listed (readable) data
/// group, then verify the image against the trust store. Verification
/// runs over the raw file bytes, so a group too damaged to parse still
/// gets its hash verdict.
pub fn passive_auth(
    channel: &mut dyn Channel,
    session: &mut SecureSession,
    store: &TrustStore,
    now: u64,
) -> Result<(PaReport, BTreeMap<u8, Vec<u8>>), ProtocolError> {
    let ef_com = read_ef(channel, session, EF_COM_FID)?;
    let ef_sod = read_ef(channel, session, EF_SOD_FID)?;
    let com = crate::lds::EfCom::decode(&ef_com).map_err(|_| ProtocolError::Malformed("EF.COM"))?;
    let sod = crate::lds::EfSod::decode(&ef_sod).map_err(|_| ProtocolError::Malformed("EF.SOD"))?;
    let mut data_groups = BTreeMap::new();
    for tag in &com.dg_tags {
        let Some(number) = dg_number_for_tag(*tag) else {
            continue;
        };
        match read_ef(channel, session, dg_fid(number)) {
            Ok(bytes) => {
                data_groups.insert(number, bytes);
            }
            // Groups gated behind terminal authorization simply stay
            // unread at this stage.
            Err(ProtocolError::AccessDenied) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((verify_sod_raw(&sod, &data_groups, store, now), data_groups))
}

/// Challenge-response against the key published in DG15: a clone
/// without the chip's private key cannot answer.
pub fn active_auth(
    channel: &mut dyn Channel,
    session: &mut SecureSession,
    dg15_bytes: &[u8],
    rng: &mut Drbg,
) -> Result<bool, ProtocolError> {
    let public = parse_chip_key(dg15_bytes).map_err(|_| ProtocolError::Malformed("DG15"))?;
    let mut challenge = [0u8; 8];
    rng.fill(&mut challenge);
    let cmd = CommandApdu::new(0, INS_INTERNAL_AUTHENTICATE, 0, 0)
        .with_data(challenge.to_vec())
        .with_le(0);
    let resp = session.transceive(channel, &cmd)?;
    if resp.sw != sw::OK {
        return Ok(false);
    }
    Ok(crate::cryptokit::verify(&public, &challenge, &resp.data))
}

/// Chip authentication: ephemeral-static agreement against the key in
/// DG14, rekeying the channel. Consumes the old session; the rekeyed
/// channel is confirmed with a protected read before it is returned.
pub fn chip_auth(
    channel: &mut dyn Channel,
    mut session: SecureSession,
    dg14_bytes: &[u8],
    rng: &mut Drbg,
) -> Result<SecureSession, ProtocolError> {
    let card_public = parse_chip_key(dg14_bytes).map_err(|_| ProtocolError::Malformed("DG14"))?;
    let resp = session.transceive(channel, &CommandApdu::new(0, INS_MSE_SET, 0x41, 0xA6))?;
    if resp.sw != sw::OK {
        return Err(ProtocolError::Card(resp.sw));
    }
    let ephemeral = EcKeyPair::generate(rng);
    let data = tlv_encode(
        &TlvNode::constructed(
            TAG_DYNAMIC_AUTH,
            vec![TlvNode::primitive(TAG_ENCRYPTED_NONCE, ephemeral.public_bytes()).unwrap()],
        )
        .unwrap(),
    )
    .unwrap();
    let cmd = CommandApdu::new(0, INS_GENERAL_AUTHENTICATE, 0, 0).with_data(data).with_le(0);
    let resp = session.transceive(channel, &cmd)?;
    if resp.sw != sw::OK {
        return Err(ProtocolError::AuthenticationFailed(format!("card answered {:04X}", resp.sw)));
    }
    let shared = ecdh(ephemeral.secret(), &card_public)
        .map_err(|_| ProtocolError::Malformed("DG14 key invalid"))?;
    let suite = CipherSuite::Aes128Cmac;
    let mut rekeyed = SecureSession {
        keys: SessionKeys::derive(&shared, suite, SessionKeys::zero_ssc(suite)),
        kind: SessionKind::ChipAuth,
        alive: true,
    };
    // Implicit authentication: only the genuine chip can continue the
    // conversation under the new keys.
    read_ef(channel, &mut rekeyed, EF_COM_FID).map_err(|_| ProtocolError::SessionLost)?;
    Ok(rekeyed)
}

/// The verifying-authority chain a terminal presents for authorization.
#[derive(Debug, Clone)]
pub struct TerminalChain {
    pub dv: SimpleCert,
    pub terminal: SimpleCert,
    pub terminal_key: EcKeyPair,
}

/// Terminal authentication: present the chain, then sign the card's
/// challenge. True means the card granted extended read rights.
pub fn terminal_auth(
    channel: &mut dyn Channel,
    session: &mut SecureSession,
    chain: &TerminalChain,
    _rng: &mut Drbg,
) -> Result<bool, ProtocolError> {
    for cert in [&chain.dv, &chain.terminal] {
        let cmd = CommandApdu::new(0, INS_PSO, 0x00, 0xBE).with_data(cert.encode());
        let resp = session.transceive(channel, &cmd)?;
        if resp.sw != sw::OK {
            return Ok(false);
        }
    }
    let resp =
        session.transceive(channel, &CommandApdu::new(0, INS_GET_CHALLENGE, 0, 0).with_le(8))?;
    if resp.sw != sw::OK || resp.data.len() != 8 {
        return Ok(false);
    }
    let signature = sign(&chain.terminal_key, &resp.data);
    let cmd =
        CommandApdu::new(0, INS_EXTERNAL_AUTHENTICATE, 0, 0).with_data(signature.to_vec());
    let resp = session.transceive(channel, &cmd)?;
    Ok(resp.sw == sw::OK)
}

/// What the operator knows about the document.
#[derive(Debug, Clone, Default)]
pub struct Credentials {
    pub bac_seed: Option<[u8; 16]>,
    pub can: Option<String>,
    pub pin: Option<String>,
}

impl Credentials {
    /// Preferred password for password-authenticated establishment.
    fn pace_password(&self) -> Option<(Vec<u8>, PasswordType)> {
        if let Some(pin) = &self.pin {
            return Some((pin.as_bytes().to_vec(), PasswordType::Pin));
        }
        if let Some(can) = &self.can {
            return Some((can.as_bytes().to_vec(), PasswordType::Can));
        }
        self.bac_seed.map(|seed| (seed.to_vec(), PasswordType::Mrz))
    }
}

/// Inspection behaviour switches.
#[derive(Debug, Clone)]
pub struct InspectPolicy {
    pub prefer_pace: bool,
    pub allow_bac_fallback: bool,
    pub do_active_auth: bool,
    pub do_chip_auth: bool,
    pub do_terminal_auth: bool,
    pub rtt_samples: usize,
    pub rtt_threshold_ms: u64,
    pub pace_suite: CipherSuite,
    pub connection_label: String,
}

impl Default for InspectPolicy {
    fn default() -> Self {
        InspectPolicy {
            prefer_pace: true,
            allow_bac_fallback: true,
            do_active_auth: false,
            do_chip_auth: false,
            do_terminal_auth: false,
            rtt_samples: 5,
            rtt_threshold_ms: 20,
            pace_suite: CipherSuite::Aes128Cmac,
            connection_label: "loopback".into(),
        }
    }
}

/// Trust material available to the inspection system.
#[derive(Debug, Clone)]
pub struct InspectionTrust {
    pub store: TrustStore,
    pub ta_chain: Option<TerminalChain>,
}

/// Everything the inspection observed, plus the verdict flags derived
/// from it.
#[derive(Debug, Clone)]
pub struct InspectionReport {
    pub connection: String,
    pub protocol: String,
    pub rtt: Option<RttStats>,
    pub rtt_threshold_ms: u64,
    pub relay_suspected: bool,
    pub access_error: Option<String>,
    pub pa: Option<PaReport>,
    pub active_auth: Option<bool>,
    pub chip_auth: Option<bool>,
    pub terminal_auth: Option<bool>,
    pub dgs_read: Vec<u8>,
    pub authentic: bool,
    pub unaltered: bool,
    pub not_cloned: Option<bool>,
}

impl InspectionReport {
    /// Overall pass: the document verified and nothing suspicious was
    /// observed.
    pub fn verdict_ok(&self) -> bool {
        self.access_error.is_none()
            && self.authentic
            && self.unaltered
            && self.not_cloned != Some(false)
            && !self.relay_suspected
    }

    /// Stable text rendering. Timing lines carry the `rtt_` prefix and
    /// are the only fields that vary across identically seeded runs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("inspection_report:\n");
        out.push_str(&format!("  connection: {}\n", self.connection));
        out.push_str(&format!("  protocol: {}\n", self.protocol));
        if let Some(rtt) = &self.rtt {
            let samples: Vec<String> =
                rtt.samples_us().iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("  rtt_samples_us: {}\n", samples.join(" ")));
            out.push_str(&format!("  rtt_median_us: {}\n", rtt.median_us()));
            out.push_str(&format!("  rtt_min_us: {}\n", rtt.min_us()));
            out.push_str(&format!("  rtt_max_us: {}\n", rtt.max_us()));
        }
        out.push_str(&format!("  rtt_threshold_ms: {}\n", self.rtt_threshold_ms));
        if let Some(err) = &self.access_error {
            out.push_str(&format!("  access_error: {err}\n"));
        }
        match &self.pa {
            Some(pa) => {
                out.push_str(&format!("  pa_signature: {}\n", ok_fail(pa.signature_ok)));
                out.push_str(&format!("  pa_chain: {}\n", ok_fail(pa.chain_ok)));
                let hashes: Vec<String> = pa
                    .dg_hash_ok
                    .iter()
                    .map(|(dg, ok)| format!("DG{dg}={}", ok_fail(*ok)))
                    .collect();
                out.push_str(&format!("  pa_dg_hashes: {}\n", hashes.join(" ")));
            }
            None => out.push_str("  pa_signature: skipped\n"),
        }
        out.push_str(&format!("  active_auth: {}\n", opt_ok_fail(self.active_auth)));
        out.push_str(&format!("  chip_auth: {}\n", opt_ok_fail(self.chip_auth)));
        out.push_str(&format!("  terminal_auth: {}\n", opt_ok_fail(self.terminal_auth)));
        let dgs: Vec<String> = self.dgs_read.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("  dgs_read: {}\n", dgs.join(",")));
        out.push_str(&format!("  verdict_authentic: {}\n", self.authentic));
        out.push_str(&format!("  verdict_unaltered: {}\n", self.unaltered));
        out.push_str(&format!(
            "  verdict_not_cloned: {}\n",
            match self.not_cloned {
                Some(v) => v.to_string(),
                None => "not-checked".into(),
            }
        ));
        out.push_str(&format!("  verdict_relay_suspected: {}\n", self.relay_suspected));
        out
    }
}

fn ok_fail(v: bool) -> &'static str {
    if v {
        "ok"
    } else {
        "fail"
    }
}

fn opt_ok_fail(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "ok",
        Some(false) => "fail",
        None => "skipped",
    }
}

/// Full inspection: distance bounding, access establishment, passive
/// authentication, then the optional chip/terminal protocols, feeding
/// one report. Every stage failure is recorded; a report always comes
/// back.
pub fn inspect(
    channel: &mut dyn Channel,
    credentials: &Credentials,
    policy: &InspectPolicy,
    trust: &InspectionTrust,
    rng: &mut Drbg,
) -> InspectionReport {
    let mut report = InspectionReport {
        connection: policy.connection_label.clone(),
        protocol: "none".into(),
        rtt: None,
        rtt_threshold_ms: policy.rtt_threshold_ms,
        relay_suspected: false,
        access_error: None,
        pa: None,
        active_auth: None,
        chip_auth: None,
        terminal_auth: None,
        dgs_read: Vec::new(),
        authentic: false,
        unaltered: false,
        not_cloned: None,
    };

    // Distance bounding runs before any authentication: the challenge
    // exchange is the cheapest probe the card answers cold.
    match measure_rtt(channel, policy.rtt_samples) {
        Ok(stats) => {
            report.relay_suspected =
                distance_bound_check(&stats, policy.rtt_threshold_ms) == DistanceVerdict::Flag;
            report.rtt = Some(stats);
        }
        Err(e) => {
            report.access_error = Some(format!("transport: {e}"));
            return report;
        }
    }

    // Access control: password-authenticated establishment first, the
    // legacy MRZ protocol as fallback.
    let mut session: Option<SecureSession> = None;
    let mut failures: Vec<String> = Vec::new();
    if policy.prefer_pace {
        if let Some((password, password_type)) = credentials.pace_password() {
            match run_pace(channel, &password, password_type, policy.pace_suite, rng) {
                Ok(s) => {
                    report.protocol = format!(
                        "pace-{}",
                        match password_type {
                            PasswordType::Mrz => "mrz",
                            PasswordType::Can => "can",
                            PasswordType::Pin => "pin",
                        }
                    );
                    session = Some(s);
                }
                Err(e) => failures.push(format!("pace: {e}")),
            }
        }
    }
    if session.is_none() && policy.allow_bac_fallback {
        if let Some(seed) = &credentials.bac_seed {
            match run_bac(channel, seed, rng) {
                Ok(s) => {
                    report.protocol = "bac".into();
                    session = Some(s);
                }
                Err(e) => failures.push(format!("bac: {e}")),
            }
        }
    }
    let Some(mut session) = session else {
        report.access_error = Some(if failures.is_empty() {
            "no usable credentials".into()
        } else {
            failures.join("; ")
        });
        return report;
    };

    // Passive authentication over freshly read files.
    let groups = match passive_auth(channel, &mut session, &trust.store, LAB_EPOCH + 1) {
        Ok((pa, groups)) => {
            report.authentic = pa.signature_ok && pa.chain_ok;
            report.unaltered = pa.hashes_ok();
            report.dgs_read = groups.keys().copied().collect();
            report.pa = Some(pa);
            Some(groups)
        }
        Err(e) => {
            report.access_error = Some(format!("passive authentication: {e}"));
            None
        }
    };

    if let Some(groups) = &groups {
        if policy.do_active_auth {
            if let Some(dg15) = groups.get(&15) {
                report.active_auth = match active_auth(channel, &mut session, dg15, rng) {
                    Ok(ok) => Some(ok),
                    Err(_) => Some(false),
                };
            }
        }
        if policy.do_chip_auth && session.is_alive() {
            if let Some(dg14) = groups.get(&14) {
                match chip_auth(channel, session, dg14, rng) {
                    Ok(rekeyed) => {
                        session = rekeyed;
                        report.chip_auth = Some(true);
                    }
                    Err(_) => {
                        report.chip_auth = Some(false);
                        // The channel is unusable; report what we have.
                        finish_verdicts(&mut report);
                        return report;
                    }
                }
            }
        }
        if policy.do_terminal_auth && session.is_alive() {
            if let Some(chain) = &trust.ta_chain {
                if matches!(session.kind, SessionKind::Pace(_) | SessionKind::ChipAuth) {
                    let granted = match terminal_auth(channel, &mut session, chain, rng) {
                        Ok(ok) => ok,
                        Err(_) => false,
                    };
                    report.terminal_auth = Some(granted);
                    if granted {
                        if let Ok(dg3) = read_ef(channel, &mut session, dg_fid(3)) {
                            if !dg3.is_empty() && !report.dgs_read.contains(&3) {
                                report.dgs_read.push(3);
                                report.dgs_read.sort_unstable();
                            }
                        }
                    }
                }
            }
        }
    }

    finish_verdicts(&mut report);
    report
}

fn finish_verdicts(report: &mut InspectionReport) {
    report.not_cloned = match (report.active_auth, report.chip_auth) {
        (None, None) => None,
        (aa, ca) => Some(aa.unwrap_or(true) && ca.unwrap_or(true)),
    };
}
