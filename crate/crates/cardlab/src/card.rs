//! The virtual chip: file system, personalization, and the responder
//! side of every protocol. One APDU in, one response out, and every
//! failure is a status word; the card must never crash on
//! attacker-controlled input.

use std::collections::BTreeMap;

use p256::ProjectivePoint;

use crate::codec::{
    decode_command, encode_response, sw, tlv_decode, tlv_decode_all, tlv_encode, CommandApdu,
    ResponseApdu, TlvNode,
};
use crate::cryptokit::{
    cbc_encrypt, ecdh, ecdh_point, kdf, mac, pad, scalar_from_bytes, sign, sign_prehash, verify,
    CipherSuite, Drbg, EcKeyPair, KdfPurpose, SessionKeys,
};
use crate::lds::{
    build_lds, ChipKeys, LdsError, Profile, dg_fid, EF_COM_FID, EF_SIGN_CERT_FID, EF_SOD_FID,
};
use crate::pki::{issue, Role, SimpleCert, FIVE_YEARS, LAB_EPOCH};
use crate::sm;

/// Application identifier of the travel-document application.
pub const EPASSPORT_AID: [u8; 7] = [0xA0, 0x00, 0x00, 0x02, 0x47, 0x10, 0x01];

pub const INS_SELECT: u8 = 0xA4;
pub const INS_READ_BINARY: u8 = 0xB0;
pub const INS_GET_CHALLENGE: u8 = 0x84;
pub const INS_EXTERNAL_AUTHENTICATE: u8 = 0x82;
pub const INS_MSE_SET: u8 = 0x22;
pub const INS_GENERAL_AUTHENTICATE: u8 = 0x86;
pub const INS_INTERNAL_AUTHENTICATE: u8 = 0x88;
pub const INS_VERIFY: u8 = 0x20;
pub const INS_PSO: u8 = 0x2A;

/// Dynamic authentication data object and its sub-objects, used by the
/// password-authenticated establishment rounds and chip authentication.
pub const TAG_DYNAMIC_AUTH: u16 = 0x7C;
pub const TAG_ENCRYPTED_NONCE: u16 = 0x80;
pub const TAG_MAPPING_KEY_TERMINAL: u16 = 0x81;
pub const TAG_MAPPING_KEY_CARD: u16 = 0x82;
pub const TAG_EPHEMERAL_KEY_TERMINAL: u16 = 0x83;
pub const TAG_EPHEMERAL_KEY_CARD: u16 = 0x84;
pub const TAG_TOKEN_TERMINAL: u16 = 0x85;
pub const TAG_TOKEN_CARD: u16 = 0x86;

/// MSE:SET data objects.
pub const TAG_MSE_SUITE: u16 = 0x80;
pub const TAG_MSE_PASSWORD: u16 = 0x83;

/// Largest slice a single READ BINARY returns.
pub const READ_BINARY_MAX: usize = 256;

/// Maximum plaintext chunk a reader should request per READ BINARY so
/// the protected frame stays within short-APDU bounds.
pub const READ_CHUNK: u16 = 223;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasswordType {
    Mrz,
    Can,
    Pin,
}

impl PasswordType {
    pub fn id_byte(self) -> u8 {
        match self {
            PasswordType::Mrz => 0x01,
            PasswordType::Can => 0x02,
            PasswordType::Pin => 0x03,
        }
    }

    pub fn from_id_byte(b: u8) -> Option<PasswordType> {
        match b {
            0x01 => Some(PasswordType::Mrz),
            0x02 => Some(PasswordType::Can),
            0x03 => Some(PasswordType::Pin),
            _ => None,
        }
    }
}

/// Which protocol, if any, currently protects the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    None,
    Bac,
    Pace(PasswordType),
    ChipAuth,
}

#[derive(Debug, Clone)]
enum PaceStage {
    Selected,
    NonceIssued { nonce: [u8; 16] },
    MappingDone { mapped_generator: ProjectivePoint },
    EphemeralDone { keys: SessionKeys, card_public: Vec<u8>, terminal_public: Vec<u8> },
}

#[derive(Debug, Clone)]
struct PaceState {
    password: PasswordType,
    suite: CipherSuite,
    stage: PaceStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MseSelection {
    None,
    ChipAuthKey,
}

/// Everything the card forgets when the channel collapses.
#[derive(Debug, Clone)]
struct SecurityState {
    channel: ChannelState,
    session: Option<SessionKeys>,
    ta_granted: bool,
    pin_verified: bool,
    bac_challenge: Option<[u8; 8]>,
    pace: Option<PaceState>,
    mse: MseSelection,
    ta_dv_key: Option<Vec<u8>>,
    ta_terminal_key: Option<Vec<u8>>,
    ta_challenge: Option<[u8; 8]>,
    esign_digest: Option<[u8; 32]>,
}

impl SecurityState {
    fn fresh() -> SecurityState {
        SecurityState {
            channel: ChannelState::None,
            session: None,
            ta_granted: false,
            pin_verified: false,
            bac_challenge: None,
            pace: None,
            mse: MseSelection::None,
            ta_dv_key: None,
            ta_terminal_key: None,
            ta_challenge: None,
            esign_digest: None,
        }
    }
}

/// MF-rooted file system: dedicated files keyed by application
/// identifier, elementary files keyed by two-byte identifier.
#[derive(Debug, Clone, Default)]
pub struct FileSystem {
    dfs: BTreeMap<Vec<u8>, BTreeMap<u16, Vec<u8>>>,
}

impl FileSystem {
    pub fn insert_ef(&mut self, aid: &[u8], fid: u16, content: Vec<u8>) {
        self.dfs.entry(aid.to_vec()).or_default().insert(fid, content);
    }

    pub fn has_df(&self, aid: &[u8]) -> bool {
        self.dfs.contains_key(aid)
    }

    pub fn ef(&self, aid: &[u8], fid: u16) -> Option<&[u8]> {
        self.dfs.get(aid)?.get(&fid).map(Vec::as_slice)
    }

    pub fn efs(&self, aid: &[u8]) -> Option<&BTreeMap<u16, Vec<u8>>> {
        self.dfs.get(aid)
    }
}

#[derive(Debug, Clone, Default)]
struct Selection {
    df: Option<Vec<u8>>,
    ef: Option<u16>,
}

/// Session rekeying or teardown requested by a dispatched command,
/// applied only after the response has been protected under the keys
/// that were current when the command arrived.
enum Effect {
    None,
    Install { keys: SessionKeys, channel: ChannelState },
}

/// The emulated identity card.
#[derive(Clone)]
pub struct VirtualCard {
    fs: FileSystem,
    bac_seed: [u8; 16],
    pin: String,
    can: String,
    pin_retries: u8,
    aa_key: EcKeyPair,
    ca_key: EcKeyPair,
    sign_key: EcKeyPair,
    sign_cert: SimpleCert,
    cvca_root: SimpleCert,
    rng: Drbg,
    state: SecurityState,
    selection: Selection,
}

impl std::fmt::Debug for VirtualCard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VirtualCard(channel={:?}, retries={})", self.state.channel, self.pin_retries)
    }
}

impl VirtualCard {
    /// Build a card from a personalization profile: generate its key
    /// material, have the country authority issue the document-signer
    /// and card-signing certificates, construct the data image and lay
    /// it out as elementary files. The image is frozen from here on; no
    /// command path can write it.
    pub fn personalize(
        profile: &Profile,
        csca_cert: &SimpleCert,
        csca_key: &EcKeyPair,
        cvca_root: SimpleCert,
        mut rng: Drbg,
    ) -> Result<VirtualCard, LdsError> {
        let aa_key = EcKeyPair::generate(&mut rng);
        let ca_key = EcKeyPair::generate(&mut rng);
        let sign_key = EcKeyPair::generate(&mut rng);

        let (ds_cert, ds_key) = issue(
            csca_cert,
            csca_key,
            &format!("ds-{}", profile.document_number),
            Role::Ds,
            LAB_EPOCH,
            LAB_EPOCH + FIVE_YEARS,
            &mut rng,
        )
        .map_err(|e| LdsError::Profile(format!("document signer issuance: {e}")))?;

        // The card's signing certificate is issued directly by the CSCA
        // under the document-signer role: signatures made on the card
        // chain to the same national root the data image does.
        let (mut sign_cert, _) = issue(
            csca_cert,
            csca_key,
            &format!("holder-{}", profile.document_number),
            Role::Ds,
            LAB_EPOCH,
            LAB_EPOCH + FIVE_YEARS,
            &mut rng,
        )
        .map_err(|e| LdsError::Profile(format!("sign certificate issuance: {e}")))?;
        // Bind the holder certificate to the on-card signing key rather
        // than the throwaway pair issue() drew.
        sign_cert.public_key = sign_key.public_bytes();
        sign_cert.signature = sign(csca_key, &sign_cert.body_bytes()).to_vec();

        let chip_keys = ChipKeys {
            chip_auth_public: ca_key.public_bytes(),
            active_auth_public: aa_key.public_bytes(),
        };
        let lds = build_lds(profile, &ds_cert, &ds_key, Some(&chip_keys))?;

        let mut fs = FileSystem::default();
        fs.insert_ef(&EPASSPORT_AID, EF_COM_FID, lds.ef_com.encode());
        fs.insert_ef(&EPASSPORT_AID, EF_SOD_FID, lds.ef_sod.encode());
        fs.insert_ef(&EPASSPORT_AID, EF_SIGN_CERT_FID, sign_cert.encode());
        for (&number, bytes) in &lds.data_groups {
            fs.insert_ef(&EPASSPORT_AID, dg_fid(number), bytes.clone());
        }

        Ok(VirtualCard {
            fs,
            bac_seed: lds.mrz.bac_seed(),
            pin: profile.pin.clone(),
            can: profile.can.clone(),
            pin_retries: 3,
            aa_key,
            ca_key,
            sign_key,
            sign_cert,
            cvca_root,
            rng: rng.fork(),
            state: SecurityState::fresh(),
            selection: Selection::default(),
        })
    }

    /// Lab clone: copy the frozen data image byte for byte but draw
    /// fresh private keys, as an attacker without the chip's secrets
    /// would have to.
    pub fn clone_with_fresh_keys(&self, mut rng: Drbg) -> VirtualCard {
        let mut clone = self.clone();
        clone.aa_key = EcKeyPair::generate(&mut rng);
        clone.ca_key = EcKeyPair::generate(&mut rng);
        clone.sign_key = EcKeyPair::generate(&mut rng);
        clone.rng = rng;
        clone.reset_session();
        clone
    }

    /// Replace the runtime randomness source. The fuzz harness uses this
    /// to model a card with broken nonce generation.
    pub fn set_rng(&mut self, rng: Drbg) {
        self.rng = rng;
    }

    /// Lab helper for tamper experiments: corrupt one byte of a stored
    /// elementary file. Returns false when the file or offset does not
    /// exist. No command path reaches this; the image is immutable over
    /// the wire.
    pub fn tamper_ef(&mut self, fid: u16, byte_index: usize, xor_mask: u8) -> bool {
        match self.fs.dfs.get_mut(EPASSPORT_AID.as_slice()) {
            Some(efs) => match efs.get_mut(&fid) {
                Some(content) if byte_index < content.len() => {
                    content[byte_index] ^= xor_mask;
                    true
                }
                _ => false,
            },
            None => false,
        }
    }

    /// Forget all session state, as removing the card from the field
    /// would. The retry counter is persistent and survives.
    pub fn reset_session(&mut self) {
        self.state = SecurityState::fresh();
        self.selection = Selection::default();
    }

    fn reset_security(&mut self) {
        self.state = SecurityState::fresh();
    }

    pub fn file_system(&self) -> &FileSystem {
        &self.fs
    }

    pub fn pin_retries(&self) -> u8 {
        self.pin_retries
    }

    pub fn channel(&self) -> ChannelState {
        self.state.channel
    }

    pub fn sign_certificate(&self) -> &SimpleCert {
        &self.sign_cert
    }

    /// White-box test hook: the card's live session keys.
    #[cfg(test)]
    pub(crate) fn session_keys(&self) -> Option<&SessionKeys> {
        self.state.session.as_ref()
    }

    /// Raw-bytes entry point used by transports. Undecodable traffic on
    /// an open channel is a secure-messaging violation; without a
    /// channel it is merely a malformed command.
    pub fn respond_bytes(&mut self, raw: &[u8]) -> Vec<u8> {
        let response = match decode_command(raw) {
            Ok(cmd) => self.process_apdu(&cmd),
            Err(_) => {
                if self.state.channel != ChannelState::None {
                    self.reset_security();
                    ResponseApdu::status(sw::SM_INCORRECT)
                } else {
                    ResponseApdu::status(sw::WRONG_LENGTH)
                }
            }
        };
        encode_response(&response)
    }

    /// Process one command APDU. Once a channel is up only protected
    /// commands are accepted; a plaintext command tears the channel down.
    pub fn process_apdu(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        if self.state.channel == ChannelState::None {
            if sm::is_protected(cmd.cla) {
                return ResponseApdu::status(sw::SM_EXPECTED);
            }
            let (response, effect) = self.dispatch(cmd, false);
            self.apply_outcome(&response, effect);
            return response;
        }

        if !sm::is_protected(cmd.cla) {
            self.reset_security();
            return ResponseApdu::status(sw::SM_EXPECTED);
        }
        let mut keys = self.state.session.take().expect("open channel carries session keys");
        let inner = match sm::unwrap_command(&mut keys, cmd) {
            Ok(inner) => inner,
            Err(_) => {
                self.reset_security();
                return ResponseApdu::status(sw::SM_INCORRECT);
            }
        };
        let (response, effect) = self.dispatch(&inner, true);
        let wrapped = sm::wrap_response(&mut keys, &response);
        self.state.session = Some(keys);
        self.apply_outcome(&response, effect);
        wrapped
    }

    /// Authentication-failure status words collapse the channel; a
    /// successful establishment or rekey installs its session.
    fn apply_outcome(&mut self, response: &ResponseApdu, effect: Effect) {
        let is_auth_failure = response.sw == sw::AUTH_FAILED
            || response.sw == sw::BLOCKED
            || response.sw & 0xFFF0 == 0x63C0;
        if is_auth_failure {
            self.reset_security();
            return;
        }
        if let Effect::Install { keys, channel } = effect {
            self.state = SecurityState::fresh();
            self.state.session = Some(keys);
            self.state.channel = channel;
        }
    }

    fn dispatch(&mut self, cmd: &CommandApdu, under_sm: bool) -> (ResponseApdu, Effect) {
        if cmd.cla != 0x00 {
            return (ResponseApdu::status(sw::CLA_NOT_SUPPORTED), Effect::None);
        }
        let response = match cmd.ins {
            INS_SELECT => self.handle_select(cmd),
            INS_READ_BINARY => self.handle_read_binary(cmd),
            // Parameter bytes on the authentication instructions are
            // protocol constants; anything else is rejected outright.
            INS_GET_CHALLENGE if (cmd.p1, cmd.p2) != (0, 0) => {
                ResponseApdu::status(sw::WRONG_DATA)
            }
            INS_GET_CHALLENGE => self.handle_get_challenge(under_sm),
            INS_EXTERNAL_AUTHENTICATE if (cmd.p1, cmd.p2) != (0, 0) => {
                ResponseApdu::status(sw::WRONG_DATA)
            }
            INS_EXTERNAL_AUTHENTICATE => {
                if under_sm {
                    self.handle_ta_external_authenticate(cmd)
                } else {
                    return self.handle_bac_external_authenticate(cmd);
                }
            }
            INS_MSE_SET => self.handle_mse_set(cmd, under_sm),
            INS_GENERAL_AUTHENTICATE if (cmd.p1, cmd.p2) != (0, 0) => {
                ResponseApdu::status(sw::WRONG_DATA)
            }
            INS_GENERAL_AUTHENTICATE => {
                if under_sm {
                    return self.handle_chip_auth(cmd);
                }
                return self.handle_pace_round(cmd);
            }
            INS_INTERNAL_AUTHENTICATE if (cmd.p1, cmd.p2) != (0, 0) => {
                ResponseApdu::status(sw::WRONG_DATA)
            }
            INS_INTERNAL_AUTHENTICATE => self.handle_active_auth(cmd, under_sm),
            INS_VERIFY if (cmd.p1, cmd.p2) != (0x00, 0x80) => {
                ResponseApdu::status(sw::WRONG_DATA)
            }
            INS_VERIFY => self.handle_verify(cmd, under_sm),
            INS_PSO => self.handle_pso(cmd, under_sm),
            _ => ResponseApdu::status(sw::INS_NOT_SUPPORTED),
        };
        (response, Effect::None)
    }

    fn handle_select(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        match cmd.p1 {
            0x04 => {
                if self.fs.has_df(&cmd.data) {
                    self.selection.df = Some(cmd.data.clone());
                    self.selection.ef = None;
                    ResponseApdu::ok([])
                } else {
                    ResponseApdu::status(sw::FILE_NOT_FOUND)
                }
            }
            0x02 => {
                let Ok(fid_bytes) = <[u8; 2]>::try_from(cmd.data.as_slice()) else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                let fid = u16::from_be_bytes(fid_bytes);
                let Some(df) = &self.selection.df else {
                    return ResponseApdu::status(sw::FILE_NOT_FOUND);
                };
                if self.fs.ef(df, fid).is_some() {
                    self.selection.ef = Some(fid);
                    ResponseApdu::ok([])
                } else {
                    ResponseApdu::status(sw::FILE_NOT_FOUND)
                }
            }
            0x00 => {
                if cmd.data.is_empty() || cmd.data == [0x3F, 0x00] {
                    self.selection = Selection::default();
                    ResponseApdu::ok([])
                } else {
                    ResponseApdu::status(sw::WRONG_DATA)
                }
            }
            _ => ResponseApdu::status(sw::WRONG_DATA),
        }
    }

    /// Every stored file carries personal data; none is readable before
    /// a channel is up, and the fingerprint groups additionally demand
    /// terminal authorization.
    fn access_allowed(&self, fid: u16) -> bool {
        if self.state.channel == ChannelState::None {
            return false;
        }
        if fid == dg_fid(3) || fid == dg_fid(4) {
            return self.state.ta_granted;
        }
        true
    }

    fn handle_read_binary(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        if cmd.p1 & 0x80 != 0 {
            return ResponseApdu::status(sw::WRONG_DATA);
        }
        let Some(fid) = self.selection.ef else {
            // Access control fires before any file question is answered.
            if self.state.channel == ChannelState::None {
                return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
            }
            return ResponseApdu::status(sw::FILE_NOT_FOUND);
        };
        if !self.access_allowed(fid) {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }
        let df = self.selection.df.clone().expect("selected EF implies selected DF");
        let Some(content) = self.fs.ef(&df, fid) else {
            return ResponseApdu::status(sw::FILE_NOT_FOUND);
        };
        let offset = usize::from(u16::from_be_bytes([cmd.p1, cmd.p2]));
        if offset > content.len() {
            return ResponseApdu::status(sw::WRONG_DATA);
        }
        let requested = match cmd.le {
            Some(0) | None => READ_BINARY_MAX,
            Some(le) => usize::from(le),
        };
        let end = content.len().min(offset + requested.min(READ_BINARY_MAX));
        ResponseApdu::ok(content[offset..end].to_vec())
    }

    fn handle_get_challenge(&mut self, under_sm: bool) -> ResponseApdu {
        let mut challenge = [0u8; 8];
        self.rng.fill(&mut challenge);
        if under_sm {
            if self.state.ta_terminal_key.is_some() {
                self.state.ta_challenge = Some(challenge);
            }
        } else {
            self.state.bac_challenge = Some(challenge);
        }
        ResponseApdu::ok(challenge.to_vec())
    }

    /// Plaintext EXTERNAL AUTHENTICATE: the mutual-authentication step
    /// of basic access control.
    fn handle_bac_external_authenticate(&mut self, cmd: &CommandApdu) -> (ResponseApdu, Effect) {
        let Some(rnd_ic) = self.state.bac_challenge.take() else {
            return (ResponseApdu::status(sw::AUTH_FAILED), Effect::None);
        };
        if cmd.data.len() != 40 {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        }
        let suite = CipherSuite::TdesRetail;
        let k_enc = kdf(&self.bac_seed, KdfPurpose::Encryption, suite);
        let k_mac = kdf(&self.bac_seed, KdfPurpose::Mac, suite);
        let (e_ifd, m_ifd) = cmd.data.split_at(32);
        if mac(suite, &k_mac, &pad(e_ifd, 8)) != m_ifd {
            return (ResponseApdu::status(sw::AUTH_FAILED), Effect::None);
        }
        let s = crate::cryptokit::cbc_decrypt(suite, &k_enc, &[0u8; 8], e_ifd)
            .expect("32 bytes are block aligned");
        let rnd_ifd: [u8; 8] = s[0..8].try_into().unwrap();
        let rnd_ic_echo: &[u8] = &s[8..16];
        let k_ifd: [u8; 16] = s[16..32].try_into().unwrap();
        if rnd_ic_echo != rnd_ic {
            return (ResponseApdu::status(sw::AUTH_FAILED), Effect::None);
        }
        let mut k_ic = [0u8; 16];
        self.rng.fill(&mut k_ic);

        let mut r = Vec::with_capacity(32);
        r.extend_from_slice(&rnd_ic);
        r.extend_from_slice(&rnd_ifd);
        r.extend_from_slice(&k_ic);
        let e_ic = cbc_encrypt(suite, &k_enc, &[0u8; 8], &r).expect("aligned");
        let m_ic = mac(suite, &k_mac, &pad(&e_ic, 8));

        let mut seed = [0u8; 16];
        for i in 0..16 {
            seed[i] = k_ifd[i] ^ k_ic[i];
        }
        let mut ssc = Vec::with_capacity(8);
        ssc.extend_from_slice(&rnd_ic[4..]);
        ssc.extend_from_slice(&rnd_ifd[4..]);
        let keys = SessionKeys::derive(&seed, suite, ssc);

        let mut response = e_ic;
        response.extend_from_slice(&m_ic);
        (
            ResponseApdu::ok(response),
            Effect::Install { keys, channel: ChannelState::Bac },
        )
    }

    fn pace_password_bytes(&self, password: PasswordType) -> Vec<u8> {
        match password {
            PasswordType::Mrz => self.bac_seed.to_vec(),
            PasswordType::Can => self.can.as_bytes().to_vec(),
            PasswordType::Pin => self.pin.as_bytes().to_vec(),
        }
    }

    fn handle_mse_set(&mut self, cmd: &CommandApdu, under_sm: bool) -> ResponseApdu {
        match (cmd.p1, cmd.p2) {
            // SET Authentication Template: select password and suite for
            // password-authenticated establishment.
            (0xC1, 0xA4) => {
                let Ok(dos) = tlv_decode_all(&cmd.data) else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                let find = |tag: u16| {
                    dos.iter().find(|n| n.tag() == tag).and_then(|n| n.value()).map(<[u8]>::to_vec)
                };
                let Some(pwd_byte) = find(TAG_MSE_PASSWORD).and_then(|v| v.first().copied()) else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                let Some(password) = PasswordType::from_id_byte(pwd_byte) else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                let Some(suite_byte) = find(TAG_MSE_SUITE).and_then(|v| v.first().copied())
                else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                let Some(suite) = CipherSuite::from_id_byte(suite_byte) else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                if password == PasswordType::Pin && self.pin_retries == 0 {
                    return ResponseApdu::status(sw::BLOCKED);
                }
                self.state.pace = Some(PaceState { password, suite, stage: PaceStage::Selected });
                ResponseApdu::ok([])
            }
            // SET Key Agreement Template: announce chip authentication.
            (0x41, 0xA6) => {
                if !under_sm {
                    return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
                }
                self.state.mse = MseSelection::ChipAuthKey;
                ResponseApdu::ok([])
            }
            _ => ResponseApdu::status(sw::WRONG_DATA),
        }
    }

    fn pace_fail(&mut self, password: PasswordType) -> ResponseApdu {
        self.state.pace = None;
        if password == PasswordType::Pin {
            self.pin_retries = self.pin_retries.saturating_sub(1);
            if self.pin_retries == 0 {
                return ResponseApdu::status(sw::BLOCKED);
            }
            return ResponseApdu::status(sw::retries_remaining(self.pin_retries));
        }
        ResponseApdu::status(sw::AUTH_FAILED)
    }

    /// One GENERAL AUTHENTICATE round of the password-authenticated
    /// establishment. The round is identified by which dynamic-data
    /// object the terminal sent; every round answers 9000 until the
    /// final token check, so a wrong password is not detectable earlier.
    fn handle_pace_round(&mut self, cmd: &CommandApdu) -> (ResponseApdu, Effect) {
        let Some(mut pace) = self.state.pace.take() else {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        };
        // Strict framing: exactly one dynamic-auth object, nothing after.
        let Ok((dyn_data, rest)) = tlv_decode(&cmd.data) else {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        };
        if dyn_data.tag() != TAG_DYNAMIC_AUTH || !rest.is_empty() {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        }
        let children = dyn_data.children().unwrap_or(&[]);
        let suite = pace.suite;
        let block = suite.block_size();

        // Round 1: empty request; answer the password-encrypted nonce.
        if children.is_empty() {
            if !matches!(pace.stage, PaceStage::Selected) {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            }
            let mut nonce = [0u8; 16];
            self.rng.fill(&mut nonce);
            let k_pi = kdf(&self.pace_password_bytes(pace.password), KdfPurpose::Password, suite);
            let iv = vec![0u8; block];
            let encrypted = cbc_encrypt(suite, &k_pi, &iv, &nonce).expect("nonce is block aligned");
            pace.stage = PaceStage::NonceIssued { nonce };
            self.state.pace = Some(pace);
            let out = dyn_response(TAG_ENCRYPTED_NONCE, &encrypted);
            return (ResponseApdu::ok(out), Effect::None);
        }

        // Round 2: generic mapping. Both sides agree on a mapped
        // generator G' = s*G + H from the nonce and a fresh DH point H.
        if let Some(terminal_mapping) = dyn_data.find_value(TAG_MAPPING_KEY_TERMINAL) {
            let PaceStage::NonceIssued { nonce } = pace.stage else {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            };
            let mapping_key = EcKeyPair::generate(&mut self.rng);
            let Ok(h) = ecdh_point(mapping_key.secret(), terminal_mapping) else {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            };
            let mapped = ProjectivePoint::GENERATOR * scalar_from_bytes(&nonce) + h;
            if bool::from(mapped.to_affine().is_identity()) {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            }
            pace.stage = PaceStage::MappingDone { mapped_generator: mapped };
            self.state.pace = Some(pace);
            let out = dyn_response(TAG_MAPPING_KEY_CARD, &mapping_key.public_bytes());
            return (ResponseApdu::ok(out), Effect::None);
        }

        // Round 3: ephemeral key agreement on the mapped generator.
        if let Some(terminal_ephemeral) = dyn_data.find_value(TAG_EPHEMERAL_KEY_TERMINAL) {
            let PaceStage::MappingDone { mapped_generator } = pace.stage else {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            };
            let ephemeral = EcKeyPair::generate_on(&mut self.rng, &mapped_generator);
            let card_public = ephemeral.public_bytes();
            if terminal_ephemeral == card_public {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            }
            let Ok(shared) = ecdh(ephemeral.secret(), terminal_ephemeral) else {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            };
            let keys = SessionKeys::derive(&shared, suite, SessionKeys::zero_ssc(suite));
            pace.stage = PaceStage::EphemeralDone {
                keys,
                card_public: card_public.clone(),
                terminal_public: terminal_ephemeral.to_vec(),
            };
            self.state.pace = Some(pace);
            let out = dyn_response(TAG_EPHEMERAL_KEY_CARD, &card_public);
            return (ResponseApdu::ok(out), Effect::None);
        }

        // Round 4: token exchange. The card verifies the terminal's
        // token before revealing its own; this is the only point where a
        // wrong password can surface.
        if let Some(terminal_token) = dyn_data.find_value(TAG_TOKEN_TERMINAL) {
            let PaceStage::EphemeralDone { keys, card_public, terminal_public } = pace.stage else {
                return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
            };
            let expected = mac(suite, &keys.k_mac, &pad(&card_public, block));
            if terminal_token != expected {
                return (self.pace_fail(pace.password), Effect::None);
            }
            if pace.password == PasswordType::Pin {
                self.pin_retries = 3;
            }
            let token = mac(suite, &keys.k_mac, &pad(&terminal_public, block));
            let out = dyn_response(TAG_TOKEN_CARD, &token);
            return (
                ResponseApdu::ok(out),
                Effect::Install { keys, channel: ChannelState::Pace(pace.password) },
            );
        }

        (ResponseApdu::status(sw::WRONG_DATA), Effect::None)
    }

    /// Chip authentication: static-key agreement that rekeys the channel.
    /// A clone without the chip key derives different session keys and
    /// cannot speak once this completes.
    fn handle_chip_auth(&mut self, cmd: &CommandApdu) -> (ResponseApdu, Effect) {
        if self.state.mse != MseSelection::ChipAuthKey {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        }
        let Ok((dyn_data, rest)) = tlv_decode(&cmd.data) else {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        };
        if dyn_data.tag() != TAG_DYNAMIC_AUTH || !rest.is_empty() {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        }
        let Some(terminal_public) = dyn_data.find_value(TAG_ENCRYPTED_NONCE) else {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        };
        let Ok(shared) = ecdh(self.ca_key.secret(), terminal_public) else {
            return (ResponseApdu::status(sw::WRONG_DATA), Effect::None);
        };
        self.state.mse = MseSelection::None;
        let suite = CipherSuite::Aes128Cmac;
        let keys = SessionKeys::derive(&shared, suite, SessionKeys::zero_ssc(suite));
        let out = tlv_encode(&TlvNode::constructed(TAG_DYNAMIC_AUTH, vec![]).unwrap()).unwrap();
        (
            ResponseApdu::ok(out),
            Effect::Install { keys, channel: ChannelState::ChipAuth },
        )
    }

    /// Active authentication: sign the terminal's challenge with the
    /// chip's challenge-response key. The matching public key is
    /// published in the data image, so a clone's answer will not verify.
    fn handle_active_auth(&mut self, cmd: &CommandApdu, under_sm: bool) -> ResponseApdu {
        if !under_sm {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }
        if cmd.data.len() != 8 {
            return ResponseApdu::status(sw::WRONG_DATA);
        }
        ResponseApdu::ok(sign(&self.aa_key, &cmd.data).to_vec())
    }

    /// Terminal authentication, certificate step: verify DV then
    /// terminal certificates against the stored CVCA root, in order.
    fn handle_ta_verify_certificate(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        if !matches!(self.state.channel, ChannelState::Pace(_) | ChannelState::ChipAuth) {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }
        let Ok(cert) = SimpleCert::decode(&cmd.data) else {
            return ResponseApdu::status(sw::WRONG_DATA);
        };
        match &self.state.ta_dv_key {
            None => {
                let ok = cert.role == Role::Dv
                    && cert.issuer == self.cvca_root.subject
                    && cert.verify_signed_by(&self.cvca_root.public_key);
                if !ok {
                    self.state.ta_dv_key = None;
                    return ResponseApdu::status(sw::AUTH_FAILED);
                }
                self.state.ta_dv_key = Some(cert.public_key);
                ResponseApdu::ok([])
            }
            Some(dv_key) => {
                let ok = cert.role == Role::Terminal && cert.verify_signed_by(dv_key);
                if !ok {
                    self.state.ta_dv_key = None;
                    self.state.ta_terminal_key = None;
                    return ResponseApdu::status(sw::AUTH_FAILED);
                }
                self.state.ta_terminal_key = Some(cert.public_key);
                ResponseApdu::ok([])
            }
        }
    }

    /// Terminal authentication, challenge step: the terminal proves
    /// possession of the key its verified certificate names.
    fn handle_ta_external_authenticate(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        let (Some(terminal_key), Some(challenge)) =
            (self.state.ta_terminal_key.clone(), self.state.ta_challenge.take())
        else {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        };
        if verify(&terminal_key, &challenge, &cmd.data) {
            self.state.ta_granted = true;
            self.state.ta_dv_key = None;
            self.state.ta_terminal_key = None;
            ResponseApdu::ok([])
        } else {
            ResponseApdu::status(sw::AUTH_FAILED)
        }
    }

    /// PIN comparison happens entirely inside the card.
    fn handle_verify(&mut self, cmd: &CommandApdu, under_sm: bool) -> ResponseApdu {
        if !under_sm || self.state.channel != ChannelState::Pace(PasswordType::Pin) {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }
        if self.pin_retries == 0 {
            return ResponseApdu::status(sw::BLOCKED);
        }
        if cmd.data == self.pin.as_bytes() {
            self.state.pin_verified = true;
            self.pin_retries = 3;
            ResponseApdu::ok([])
        } else {
            self.pin_retries -= 1;
            if self.pin_retries == 0 {
                ResponseApdu::status(sw::BLOCKED)
            } else {
                ResponseApdu::status(sw::retries_remaining(self.pin_retries))
            }
        }
    }

    fn handle_pso(&mut self, cmd: &CommandApdu, under_sm: bool) -> ResponseApdu {
        if !under_sm {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }
        match (cmd.p1, cmd.p2) {
            (0x00, 0xBE) => self.handle_ta_verify_certificate(cmd),
            // Signature operations are reserved to the holder: a
            // PIN-established channel plus a verified PIN.
            (0x90, 0xA0) => {
                if self.state.channel != ChannelState::Pace(PasswordType::Pin)
                    || !self.state.pin_verified
                {
                    return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
                }
                let Ok(digest) = <[u8; 32]>::try_from(cmd.data.as_slice()) else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                self.state.esign_digest = Some(digest);
                ResponseApdu::ok([])
            }
            (0x9E, 0x9A) => {
                if self.state.channel != ChannelState::Pace(PasswordType::Pin)
                    || !self.state.pin_verified
                {
                    return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
                }
                let Some(digest) = self.state.esign_digest.take() else {
                    return ResponseApdu::status(sw::WRONG_DATA);
                };
                ResponseApdu::ok(sign_prehash(&self.sign_key, &digest).to_vec())
            }
            _ => ResponseApdu::status(sw::WRONG_DATA),
        }
    }
}

fn dyn_response(tag: u16, value: &[u8]) -> Vec<u8> {
    let node = TlvNode::constructed(
        TAG_DYNAMIC_AUTH,
        vec![TlvNode::primitive(tag, value.to_vec()).unwrap()],
    )
    .unwrap();
    tlv_encode(&node).unwrap()
}

// ---- card state serialization ----------------------------------------

const TAG_CARD: u16 = 0x7F70;
const TAG_CARD_BAC_SEED: u16 = 0x81;
const TAG_CARD_PIN: u16 = 0x82;
const TAG_CARD_CAN: u16 = 0x83;
const TAG_CARD_RETRIES: u16 = 0x84;
const TAG_CARD_AA_KEY: u16 = 0x85;
const TAG_CARD_CA_KEY: u16 = 0x86;
const TAG_CARD_SIGN_KEY: u16 = 0x87;
const TAG_CARD_RNG_SEED: u16 = 0x88;
const TAG_CARD_SIGN_CERT: u16 = 0xA1;
const TAG_CARD_CVCA: u16 = 0xA2;
const TAG_CARD_FILES: u16 = 0xA3;
const TAG_FILE_ENTRY: u16 = 0x30;
const TAG_FILE_ID: u16 = 0x02;
const TAG_FILE_CONTENT: u16 = 0x04;

impl VirtualCard {
    /// Serialize the persistent card state. Elementary-file images are
    /// stored bit-exact, so a reloaded card serves identical bytes.
    pub fn serialize(&mut self) -> Vec<u8> {
        let mut files = Vec::new();
        if let Some(efs) = self.fs.efs(&EPASSPORT_AID) {
            for (&fid, content) in efs {
                files.push(
                    TlvNode::constructed(
                        TAG_FILE_ENTRY,
                        vec![
                            TlvNode::primitive(TAG_FILE_ID, fid.to_be_bytes()).unwrap(),
                            TlvNode::primitive(TAG_FILE_CONTENT, content.clone()).unwrap(),
                        ],
                    )
                    .unwrap(),
                );
            }
        }
        // Freeze a seed for the reloaded card's randomness so serve runs
        // are reproducible for a given saved file.
        let rng_seed = self.rng.bytes(32);
        let node = TlvNode::constructed(
            TAG_CARD,
            vec![
                TlvNode::primitive(TAG_CARD_BAC_SEED, self.bac_seed).unwrap(),
                TlvNode::primitive(TAG_CARD_PIN, self.pin.as_bytes()).unwrap(),
                TlvNode::primitive(TAG_CARD_CAN, self.can.as_bytes()).unwrap(),
                TlvNode::primitive(TAG_CARD_RETRIES, [self.pin_retries]).unwrap(),
                TlvNode::primitive(TAG_CARD_AA_KEY, self.aa_key.secret_bytes()).unwrap(),
                TlvNode::primitive(TAG_CARD_CA_KEY, self.ca_key.secret_bytes()).unwrap(),
                TlvNode::primitive(TAG_CARD_SIGN_KEY, self.sign_key.secret_bytes()).unwrap(),
                TlvNode::primitive(TAG_CARD_RNG_SEED, rng_seed).unwrap(),
                TlvNode::constructed(TAG_CARD_SIGN_CERT, vec![self.sign_cert.to_node()]).unwrap(),
                TlvNode::constructed(TAG_CARD_CVCA, vec![self.cvca_root.to_node()]).unwrap(),
                TlvNode::constructed(TAG_CARD_FILES, files).unwrap(),
            ],
        )
        .unwrap();
        tlv_encode(&node).unwrap()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<VirtualCard, LdsError> {
        let bad = |what: &'static str| LdsError::BadStructure(what);
        let (node, _) = tlv_decode(bytes).map_err(|_| bad("card TLV"))?;
        if node.tag() != TAG_CARD {
            return Err(bad("card object tag"));
        }
        let field = |tag: u16, what: &'static str| -> Result<Vec<u8>, LdsError> {
            node.find_value(tag).map(<[u8]>::to_vec).ok_or(bad(what))
        };
        let key_field = |tag: u16, what: &'static str| -> Result<EcKeyPair, LdsError> {
            let bytes: [u8; 32] = field(tag, what)?.try_into().map_err(|_| bad(what))?;
            EcKeyPair::from_secret_bytes(&bytes).ok_or(bad(what))
        };
        let cert_field = |tag: u16, what: &'static str| -> Result<SimpleCert, LdsError> {
            let wrapper = node.find(tag).ok_or(bad(what))?;
            let cert_node = wrapper.find(0x7F21).ok_or(bad(what))?;
            SimpleCert::from_node(cert_node).map_err(|_| bad(what))
        };
        let mut fs = FileSystem::default();
        let files = node.find(TAG_CARD_FILES).ok_or(bad("file table"))?;
        for entry in files.children().unwrap_or(&[]) {
            let fid_bytes: [u8; 2] = entry
                .find_value(TAG_FILE_ID)
                .ok_or(bad("file id"))?
                .try_into()
                .map_err(|_| bad("file id width"))?;
            let content = entry.find_value(TAG_FILE_CONTENT).ok_or(bad("file content"))?;
            fs.insert_ef(&EPASSPORT_AID, u16::from_be_bytes(fid_bytes), content.to_vec());
        }
        let rng_seed = field(TAG_CARD_RNG_SEED, "rng seed")?;
        Ok(VirtualCard {
            fs,
            bac_seed: field(TAG_CARD_BAC_SEED, "bac seed")?
                .try_into()
                .map_err(|_| bad("bac seed width"))?,
            pin: String::from_utf8(field(TAG_CARD_PIN, "pin")?).map_err(|_| bad("pin text"))?,
            can: String::from_utf8(field(TAG_CARD_CAN, "can")?).map_err(|_| bad("can text"))?,
            pin_retries: *field(TAG_CARD_RETRIES, "retries")?.first().ok_or(bad("retries"))?,
            aa_key: key_field(TAG_CARD_AA_KEY, "challenge-response key")?,
            ca_key: key_field(TAG_CARD_CA_KEY, "chip key")?,
            sign_key: key_field(TAG_CARD_SIGN_KEY, "signing key")?,
            sign_cert: cert_field(TAG_CARD_SIGN_CERT, "signing certificate")?,
            cvca_root: cert_field(TAG_CARD_CVCA, "verifying root")?,
            rng: Drbg::from_seed_bytes(&rng_seed),
            state: SecurityState::fresh(),
            selection: Selection::default(),
        })
    }
}
