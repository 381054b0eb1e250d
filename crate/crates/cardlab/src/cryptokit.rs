//! Cryptographic primitives shared by the protocol implementations:
//! key derivation, the two secure-channel cipher suites, elliptic-curve
//! key agreement and signatures on P-256, and a seedable byte generator.

use cbc::cipher::{BlockModeDecrypt, BlockModeEncrypt, KeyInit, KeyIvInit};
use cipher::block_padding::NoPadding;
use cipher::{BlockCipherDecrypt, BlockCipherEncrypt};
use cmac::{Cmac, Mac};
use des::{Des, TdesEde2};
use p256::ecdsa::signature::hazmat::{PrehashSigner, PrehashVerifier};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::point::AffineCoordinates;
use p256::elliptic_curve::sec1::{FromSec1Point, ToSec1Point};
use p256::elliptic_curve::PrimeField;
use p256::{AffinePoint, NonZeroScalar, ProjectivePoint, Scalar, Sec1Point};
use sha1::{Digest, Sha1};
use sha2::Sha256;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("input length {0} is not a multiple of the block size")]
    NotBlockAligned(usize),
    #[error("padding marker 0x80 not found")]
    BadPadding,
    #[error("peer public key is not a valid curve point")]
    InvalidPoint,
}

/// The two secure-channel suites the lab cards speak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CipherSuite {
    /// Two-key 3DES in CBC mode with the ISO 9797-1 retail MAC.
    TdesRetail,
    /// AES-128 in CBC mode with AES-CMAC.
    Aes128Cmac,
}

impl CipherSuite {
    pub fn block_size(self) -> usize {
        match self {
            CipherSuite::TdesRetail => 8,
            CipherSuite::Aes128Cmac => 16,
        }
    }

    pub fn key_len(self) -> usize {
        16
    }

    pub fn mac_len(self) -> usize {
        8
    }

    /// Width of the send sequence counter.
    pub fn ssc_len(self) -> usize {
        match self {
            CipherSuite::TdesRetail => 8,
            CipherSuite::Aes128Cmac => 16,
        }
    }

    pub fn id_byte(self) -> u8 {
        match self {
            CipherSuite::TdesRetail => 0x01,
            CipherSuite::Aes128Cmac => 0x02,
        }
    }

    pub fn from_id_byte(b: u8) -> Option<CipherSuite> {
        match b {
            0x01 => Some(CipherSuite::TdesRetail),
            0x02 => Some(CipherSuite::Aes128Cmac),
            _ => None,
        }
    }
}

/// Key derivation counter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdfPurpose {
    Encryption = 1,
    Mac = 2,
    Password = 3,
}

/// Derive a 16-byte key as the truncated SHA-1 of seed and a 32-bit
/// counter. TDES keys additionally get their DES parity bits set odd.
pub fn kdf(seed: &[u8], purpose: KdfPurpose, suite: CipherSuite) -> [u8; 16] {
    let mut hasher = Sha1::new();
    hasher.update(seed);
    hasher.update((purpose as u32).to_be_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    if suite == CipherSuite::TdesRetail {
        adjust_des_parity(&mut key);
    }
    key
}

/// Force odd parity on every byte, as DES key schedules expect.
pub fn adjust_des_parity(key: &mut [u8]) {
    for b in key.iter_mut() {
        let ones = (*b >> 1).count_ones();
        *b = (*b & 0xFE) | u8::from(ones % 2 == 0);
    }
}

/// ISO 9797-1 padding method 2: append 0x80, then zeros to the block
/// boundary.
pub fn pad(data: &[u8], block: usize) -> Vec<u8> {
    let mut out = data.to_vec();
    out.push(0x80);
    while out.len() % block != 0 {
        out.push(0x00);
    }
    out
}

/// Strip padding method 2. Fails if no 0x80 marker terminates the data.
pub fn unpad(data: &[u8]) -> Result<&[u8], CryptoError> {
    let mut i = data.len();
    while i > 0 {
        i -= 1;
        match data[i] {
            0x00 => continue,
            0x80 => return Ok(&data[..i]),
            _ => return Err(CryptoError::BadPadding),
        }
    }
    Err(CryptoError::BadPadding)
}

pub fn cbc_encrypt(
    suite: CipherSuite,
    key: &[u8; 16],
    iv: &[u8],
    plaintext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if plaintext.len() % suite.block_size() != 0 {
        return Err(CryptoError::NotBlockAligned(plaintext.len()));
    }
    let mut buf = plaintext.to_vec();
    let n = buf.len();
    match suite {
        CipherSuite::TdesRetail => {
            let enc = cbc::Encryptor::<TdesEde2>::new(key.into(), iv.try_into().expect("8-byte IV"));
            enc.encrypt_padded::<NoPadding>(&mut buf, n).expect("aligned");
        }
        CipherSuite::Aes128Cmac => {
            let enc =
                cbc::Encryptor::<aes::Aes128>::new(key.into(), iv.try_into().expect("16-byte IV"));
            enc.encrypt_padded::<NoPadding>(&mut buf, n).expect("aligned");
        }
    }
    Ok(buf)
}

pub fn cbc_decrypt(
    suite: CipherSuite,
    key: &[u8; 16],
    iv: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() % suite.block_size() != 0 {
        return Err(CryptoError::NotBlockAligned(ciphertext.len()));
    }
    let mut buf = ciphertext.to_vec();
    match suite {
        CipherSuite::TdesRetail => {
            let dec = cbc::Decryptor::<TdesEde2>::new(key.into(), iv.try_into().expect("8-byte IV"));
            dec.decrypt_padded::<NoPadding>(&mut buf).expect("aligned");
        }
        CipherSuite::Aes128Cmac => {
            let dec =
                cbc::Decryptor::<aes::Aes128>::new(key.into(), iv.try_into().expect("16-byte IV"));
            dec.decrypt_padded::<NoPadding>(&mut buf).expect("aligned");
        }
    }
    Ok(buf)
}

/// 8-byte authentication tag. TdesRetail computes ISO 9797-1 MAC
/// algorithm 3 and expects pre-padded input; Aes128Cmac computes AES-CMAC
/// truncated to 8 bytes.
pub fn mac(suite: CipherSuite, key: &[u8; 16], data: &[u8]) -> [u8; 8] {
    match suite {
        CipherSuite::TdesRetail => retail_mac(key, data),
        CipherSuite::Aes128Cmac => {
            let mut m = <Cmac<aes::Aes128> as KeyInit>::new(key.into());
            Mac::update(&mut m, data);
            let tag = m.finalize().into_bytes();
            tag[..8].try_into().expect("cmac tag")
        }
    }
}

/// ISO 9797-1 MAC algorithm 3 (retail MAC): single-DES CBC under K1, with
/// a final decrypt-under-K2 / encrypt-under-K1 transform.
fn retail_mac(key: &[u8; 16], data: &[u8]) -> [u8; 8] {
    assert!(data.len() % 8 == 0, "retail MAC input must be pre-padded to 8-byte blocks");
    let ka: [u8; 8] = key[..8].try_into().unwrap();
    let kb: [u8; 8] = key[8..].try_into().unwrap();
    let k1 = Des::new(&ka.into());
    let k2 = Des::new(&kb.into());
    let mut state = [0u8; 8];
    for chunk in data.chunks(8) {
        for (s, c) in state.iter_mut().zip(chunk) {
            *s ^= c;
        }
        let mut block = cipher::Block::<Des>::from(state);
        k1.encrypt_block(&mut block);
        state.copy_from_slice(&block);
    }
    let mut block = cipher::Block::<Des>::from(state);
    k2.decrypt_block(&mut block);
    k1.encrypt_block(&mut block);
    block.into()
}

/// Session keys plus send sequence counter for one secure channel side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub k_enc: [u8; 16],
    pub k_mac: [u8; 16],
    pub suite: CipherSuite,
    pub ssc: Vec<u8>,
}

impl SessionKeys {
    /// Derive both keys from a shared seed; the caller supplies the
    /// initial counter value (zeros for PACE and chip authentication).
    pub fn derive(seed: &[u8], suite: CipherSuite, ssc: Vec<u8>) -> SessionKeys {
        assert_eq!(ssc.len(), suite.ssc_len(), "ssc width must match the suite");
        SessionKeys {
            k_enc: kdf(seed, KdfPurpose::Encryption, suite),
            k_mac: kdf(seed, KdfPurpose::Mac, suite),
            suite,
            ssc,
        }
    }

    pub fn zero_ssc(suite: CipherSuite) -> Vec<u8> {
        vec![0u8; suite.ssc_len()]
    }

    /// Big-endian increment by one, wrapping at the counter width.
    pub fn increment_ssc(&mut self) {
        for b in self.ssc.iter_mut().rev() {
            let (v, carry) = b.overflowing_add(1);
            *b = v;
            if !carry {
                break;
            }
        }
    }
}

/// P-256 keypair used for key agreement and signatures.
#[derive(Clone)]
pub struct EcKeyPair {
    secret: NonZeroScalar,
    public: AffinePoint,
}

impl std::fmt::Debug for EcKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EcKeyPair({})", hex::encode(self.public_bytes()))
    }
}

impl EcKeyPair {
    /// Draw a fresh keypair from the generator by rejection sampling.
    pub fn generate(rng: &mut Drbg) -> EcKeyPair {
        let secret = rng.scalar();
        let public = (ProjectivePoint::GENERATOR * *secret.as_ref()).to_affine();
        EcKeyPair { secret, public }
    }

    /// Keypair whose public point lives on an alternative generator, as
    /// the mapped-generator rounds of password-authenticated key
    /// agreement require.
    pub fn generate_on(rng: &mut Drbg, generator: &ProjectivePoint) -> EcKeyPair {
        let secret = rng.scalar();
        let public = (*generator * *secret.as_ref()).to_affine();
        EcKeyPair { secret, public }
    }

    pub fn from_secret_bytes(bytes: &[u8; 32]) -> Option<EcKeyPair> {
        let secret = NonZeroScalar::try_from(&bytes[..]).ok()?;
        let public = (ProjectivePoint::GENERATOR * *secret.as_ref()).to_affine();
        Some(EcKeyPair { secret, public })
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_repr().into()
    }

    /// Uncompressed SEC1 encoding (65 bytes).
    pub fn public_bytes(&self) -> Vec<u8> {
        self.public.to_sec1_point(false).as_bytes().to_vec()
    }

    pub fn secret(&self) -> &NonZeroScalar {
        &self.secret
    }

    pub fn public(&self) -> &AffinePoint {
        &self.public
    }
}

/// Parse and validate an uncompressed SEC1 point: must lie on the curve
/// and must not be the identity.
pub fn decode_point(sec1: &[u8]) -> Result<AffinePoint, CryptoError> {
    let encoded = Sec1Point::from_bytes(sec1).map_err(|_| CryptoError::InvalidPoint)?;
    if encoded.is_identity() {
        return Err(CryptoError::InvalidPoint);
    }
    let point: Option<AffinePoint> = AffinePoint::from_sec1_point(&encoded).into();
    point.ok_or(CryptoError::InvalidPoint)
}

/// Diffie-Hellman: x-coordinate of scalar-times-point, 32 bytes
/// big-endian. The peer point is validated before use.
pub fn ecdh(secret: &NonZeroScalar, peer_sec1: &[u8]) -> Result<[u8; 32], CryptoError> {
    let peer = decode_point(peer_sec1)?;
    let shared = (ProjectivePoint::from(peer) * *secret.as_ref()).to_affine();
    Ok(shared.x().into())
}

/// Full-point Diffie-Hellman, for the generic-mapping step that needs
/// the complete shared point rather than its x-coordinate.
pub fn ecdh_point(secret: &NonZeroScalar, peer_sec1: &[u8]) -> Result<ProjectivePoint, CryptoError> {
    let peer = decode_point(peer_sec1)?;
    Ok(ProjectivePoint::from(peer) * *secret.as_ref())
}

/// Interpret up to 32 bytes as a big-endian scalar mod the group order.
pub fn scalar_from_bytes(bytes: &[u8]) -> Scalar {
    assert!(bytes.len() <= 32);
    let mut wide = [0u8; 32];
    wide[32 - bytes.len()..].copy_from_slice(bytes);
    // Values up to 2^128 are always below the group order; larger inputs
    // fall back to rejection via from_repr with a halving loop.
    let candidate: Option<Scalar> = Scalar::from_repr(wide.into()).into();
    match candidate {
        Some(s) => s,
        None => {
            wide[0] &= 0x3F;
            let reduced: Option<Scalar> = Scalar::from_repr(wide.into()).into();
            reduced.expect("values below 2^254 are within the group order")
        }
    }
}

/// ECDSA over P-256 with SHA-256, fixed-width 64-byte signatures.
/// Deterministic per RFC 6979, so identical inputs sign identically.
pub fn sign(keypair: &EcKeyPair, data: &[u8]) -> [u8; 64] {
    let sk = SigningKey::from_bytes(&keypair.secret_bytes().into()).expect("valid scalar");
    let sig: Signature = sk.sign(data);
    sig.to_bytes().into()
}

/// Verify a 64-byte signature under an uncompressed SEC1 public key.
/// Malformed keys or signatures verify as false, never as errors.
pub fn verify(public_sec1: &[u8], data: &[u8], signature: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(public_sec1) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(signature) else {
        return false;
    };
    vk.verify(data, &sig).is_ok()
}

/// Sign a caller-supplied 32-byte digest directly.
pub fn sign_prehash(keypair: &EcKeyPair, digest: &[u8; 32]) -> [u8; 64] {
    let sk = SigningKey::from_bytes(&keypair.secret_bytes().into()).expect("valid scalar");
    let sig: Signature = sk.sign_prehash(digest).expect("prehash signing");
    sig.to_bytes().into()
}

pub fn verify_prehash(public_sec1: &[u8], digest: &[u8; 32], signature: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(public_sec1) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(signature) else {
        return false;
    };
    vk.verify_prehash(digest, &sig).is_ok()
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn sha1(data: &[u8]) -> [u8; 20] {
    Sha1::digest(data).into()
}

/// Deterministic byte generator. A hash counter construction keyed by
/// the seed: reproducible under an explicit seed, and replaceable by a
/// degenerate constant stream to model broken randomness.
#[derive(Clone)]
pub struct Drbg {
    state: DrbgState,
}

#[derive(Clone)]
enum DrbgState {
    Hash { key: [u8; 32], counter: u64, buffer: [u8; 32], used: usize },
    Constant(u8),
}

impl std::fmt::Debug for Drbg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.state {
            DrbgState::Hash { counter, .. } => write!(f, "Drbg(hash, block={counter})"),
            DrbgState::Constant(b) => write!(f, "Drbg(constant 0x{b:02X})"),
        }
    }
}

impl Drbg {
    pub fn from_seed(seed: u64) -> Drbg {
        Drbg::from_seed_bytes(&seed.to_be_bytes())
    }

    pub fn from_seed_bytes(seed: &[u8]) -> Drbg {
        let mut hasher = Sha256::new();
        hasher.update(b"cardlab-drbg-v1");
        hasher.update(seed);
        Drbg {
            state: DrbgState::Hash {
                key: hasher.finalize().into(),
                counter: 0,
                buffer: [0u8; 32],
                used: 32,
            },
        }
    }

    pub fn from_entropy() -> Drbg {
        let mut seed = [0u8; 32];
        getrandom::fill(&mut seed).expect("system entropy");
        Drbg::from_seed_bytes(&seed)
    }

    /// Degenerate generator that emits the same byte forever.
    pub fn constant(byte: u8) -> Drbg {
        Drbg { state: DrbgState::Constant(byte) }
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        match &mut self.state {
            DrbgState::Constant(b) => out.fill(*b),
            DrbgState::Hash { key, counter, buffer, used } => {
                for byte in out.iter_mut() {
                    if *used == 32 {
                        let mut hasher = Sha256::new();
                        hasher.update(*key);
                        hasher.update(counter.to_be_bytes());
                        *buffer = hasher.finalize().into();
                        *counter += 1;
                        *used = 0;
                    }
                    *byte = buffer[*used];
                    *used += 1;
                }
            }
        }
    }

    pub fn bytes(&mut self, n: usize) -> Vec<u8> {
        let mut out = vec![0u8; n];
        self.fill(&mut out);
        out
    }

    pub fn u64(&mut self) -> u64 {
        let mut b = [0u8; 8];
        self.fill(&mut b);
        u64::from_be_bytes(b)
    }

    /// Uniform value in [0, bound) by rejection from 64-bit draws.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.u64();
            if v < zone || matches!(self.state, DrbgState::Constant(_)) {
                return v % bound;
            }
        }
    }

    /// Non-zero scalar by rejection sampling.
    pub fn scalar(&mut self) -> NonZeroScalar {
        loop {
            let mut bytes = [0u8; 32];
            self.fill(&mut bytes);
            if let Ok(s) = NonZeroScalar::try_from(&bytes[..]) {
                return s;
            }
        }
    }

    /// Independent child generator, so subsystems can split one seed
    /// without sharing mutable state.
    pub fn fork(&mut self) -> Drbg {
        let seed = self.bytes(32);
        Drbg::from_seed_bytes(&seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hex_literal::hex;

    // Worked-example constants from the travel-document standard's BAC
    // appendix; they exercise kdf + cbc + retail MAC end to end.
    const K_SEED: [u8; 16] = hex!("239AB9CB282DAF66231DC5A4DF6BFBAE");
    const K_ENC: [u8; 16] = hex!("AB94FDECF2674FDFB9B391F85D7F76F2");
    const K_MAC: [u8; 16] = hex!("7962D9ECE03D1ACD4C76089DCE131543");

    #[test]
    fn kdf_known_answer() {
        assert_eq!(kdf(&K_SEED, KdfPurpose::Encryption, CipherSuite::TdesRetail), K_ENC);
        assert_eq!(kdf(&K_SEED, KdfPurpose::Mac, CipherSuite::TdesRetail), K_MAC);
    }

    #[test]
    fn kdf_counters_separate() {
        let mut rng = Drbg::from_seed(11);
        for _ in 0..1000 {
            let seed = rng.bytes(16);
            let ke = kdf(&seed, KdfPurpose::Encryption, CipherSuite::Aes128Cmac);
            let km = kdf(&seed, KdfPurpose::Mac, CipherSuite::Aes128Cmac);
            let kp = kdf(&seed, KdfPurpose::Password, CipherSuite::Aes128Cmac);
            assert_ne!(ke, km);
            assert_ne!(ke, kp);
            assert_ne!(km, kp);
        }
    }

    #[test]
    fn kdf_tdes_parity_is_odd() {
        let key = kdf(b"parity seed", KdfPurpose::Encryption, CipherSuite::TdesRetail);
        for b in key {
            assert_eq!(b.count_ones() % 2, 1, "byte {b:02X} has even parity");
        }
    }

    #[test]
    fn cbc_tdes_known_answer() {
        // E.IFD from the BAC worked example.
        let s = hex!(
            "781723860C06C226 4608F91988702212 0B795240CB7049B01C19B33E32804F0B"
        );
        let e_ifd = cbc_encrypt(CipherSuite::TdesRetail, &K_ENC, &[0u8; 8], &s).unwrap();
        assert_eq!(
            e_ifd,
            hex!("72C29C2371CC9BDB65B779B8E8D37B29ECC154AA56A8799FAE2F498F76ED92F2")
        );
        let back = cbc_decrypt(CipherSuite::TdesRetail, &K_ENC, &[0u8; 8], &e_ifd).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn retail_mac_known_answer() {
        let e_ifd = hex!("72C29C2371CC9BDB65B779B8E8D37B29ECC154AA56A8799FAE2F498F76ED92F2");
        let tag = mac(CipherSuite::TdesRetail, &K_MAC, &pad(&e_ifd, 8));
        assert_eq!(tag, hex!("5F1448EEA8AD90A7"));
    }

    #[test]
    fn aes_cbc_nist_vector() {
        // NIST SP 800-38A F.2.1, first block.
        let key = hex!("2b7e151628aed2a6abf7158809cf4f3c");
        let iv = hex!("000102030405060708090a0b0c0d0e0f");
        let pt = hex!("6bc1bee22e409f96e93d7e117393172a");
        let ct = cbc_encrypt(CipherSuite::Aes128Cmac, &key, &iv, &pt).unwrap();
        assert_eq!(ct, hex!("7649abac8119b246cee98e9b12e9197d"));
        assert_eq!(cbc_decrypt(CipherSuite::Aes128Cmac, &key, &iv, &ct).unwrap(), pt);
    }

    #[test]
    fn cmac_rfc4493_vectors() {
        let key = hex!("2b7e151628aed2a6abf7158809cf4f3c");
        assert_eq!(mac(CipherSuite::Aes128Cmac, &key, b""), hex!("bb1d6929e9593728"));
        let msg = hex!("6bc1bee22e409f96e93d7e117393172a");
        assert_eq!(mac(CipherSuite::Aes128Cmac, &key, &msg), hex!("070a16b46b4d4144"));
    }

    #[test]
    fn cbc_rejects_misaligned_input() {
        let key = [0u8; 16];
        assert_eq!(
            cbc_decrypt(CipherSuite::TdesRetail, &key, &[0u8; 8], &[1, 2, 3]),
            Err(CryptoError::NotBlockAligned(3))
        );
    }

    #[test]
    fn cbc_iv_changes_ciphertext() {
        let key = hex!("000102030405060708090a0b0c0d0e0f");
        let pt = [0x42u8; 32];
        let c1 = cbc_encrypt(CipherSuite::Aes128Cmac, &key, &[0u8; 16], &pt).unwrap();
        let c2 = cbc_encrypt(CipherSuite::Aes128Cmac, &key, &[1u8; 16], &pt).unwrap();
        assert_ne!(c1, c2);
    }

    #[test]
    fn pad_unpad() {
        assert_eq!(pad(&[], 8), hex!("8000000000000000"));
        assert_eq!(unpad(&hex!("8000000000000000")).unwrap(), &[] as &[u8]);
        assert_eq!(unpad(&hex!("0000000000000000")), Err(CryptoError::BadPadding));
        let mut rng = Drbg::from_seed(3);
        for _ in 0..200 {
            let n = (rng.u64() % 40) as usize;
            let data = rng.bytes(n);
            assert_eq!(unpad(&pad(&data, 16)).unwrap(), &data[..]);
        }
    }

    #[test]
    fn mac_bit_flip_sensitivity() {
        let mut rng = Drbg::from_seed(5);
        let key: [u8; 16] = rng.bytes(16).try_into().unwrap();
        for suite in [CipherSuite::TdesRetail, CipherSuite::Aes128Cmac] {
            for _ in 0..100 {
                let data = pad(&rng.bytes(24), 8);
                let tag = mac(suite, &key, &data);
                let mut flipped = data.clone();
                let bit = rng.below(flipped.len() as u64 * 8) as usize;
                flipped[bit / 8] ^= 1 << (bit % 8);
                assert_ne!(mac(suite, &key, &flipped), tag);
            }
        }
    }

    #[test]
    fn ecdh_symmetry() {
        let mut rng = Drbg::from_seed(9);
        for _ in 0..1000 {
            let a = EcKeyPair::generate(&mut rng);
            let b = EcKeyPair::generate(&mut rng);
            let ab = ecdh(a.secret(), &b.public_bytes()).unwrap();
            let ba = ecdh(b.secret(), &a.public_bytes()).unwrap();
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn roundtrip_properties_hold_at_scale() {
        let mut rng = Drbg::from_seed(31);
        let sign_key = EcKeyPair::generate(&mut rng);
        let sign_pub = sign_key.public_bytes();
        for i in 0..1000u32 {
            let suite =
                if i % 2 == 0 { CipherSuite::TdesRetail } else { CipherSuite::Aes128Cmac };
            let key: [u8; 16] = rng.bytes(16).try_into().unwrap();
            let iv = rng.bytes(suite.block_size());

            // padding
            let n = rng.below(48) as usize;
            let data = rng.bytes(n);
            assert_eq!(unpad(&pad(&data, suite.block_size())).unwrap(), &data[..]);

            // cipher round trip
            let pt_len = 1 + rng.below(40) as usize;
            let pt = pad(&rng.bytes(pt_len), suite.block_size());
            let ct = cbc_encrypt(suite, &key, &iv, &pt).unwrap();
            assert_eq!(cbc_decrypt(suite, &key, &iv, &ct).unwrap(), pt);

            // tag determinism
            let msg = pad(&rng.bytes(24), suite.block_size());
            assert_eq!(mac(suite, &key, &msg), mac(suite, &key, &msg));

            // signature round trip
            let doc = rng.bytes(16 + (i as usize % 32));
            assert!(verify(&sign_pub, &doc, &sign(&sign_key, &doc)));
        }
    }

    #[test]
    fn ecdh_rejects_invalid_points() {
        let mut rng = Drbg::from_seed(13);
        let key = EcKeyPair::generate(&mut rng);
        // Identity.
        assert_eq!(ecdh(key.secret(), &[0x00]), Err(CryptoError::InvalidPoint));
        // Off-curve candidates: random x/y almost never satisfy the curve
        // equation, and every such candidate must be rejected.
        for _ in 0..100 {
            let mut cand = vec![0x04];
            cand.extend(rng.bytes(64));
            assert_eq!(ecdh(key.secret(), &cand), Err(CryptoError::InvalidPoint));
        }
    }

    #[test]
    fn scalar_mult_known_answer() {
        // Reference multiples of the P-256 base point.
        let g2 = (ProjectivePoint::GENERATOR * scalar_from_bytes(&[2])).to_affine();
        assert_eq!(
            g2.to_sec1_point(false).as_bytes(),
            hex!(
                "04 7cf27b188d034f7e8a52380304b51ac3c08969e277f21b35a60b48fc47669978"
                "07775510db8ed040293d9ac69f7430dbba7dade63ce982299e04b79d227873d1"
            )
        );
        let g7 = (ProjectivePoint::GENERATOR * scalar_from_bytes(&[7])).to_affine();
        assert_eq!(
            g7.to_sec1_point(false).as_bytes(),
            hex!(
                "04 8e533b6fa0bf7b4625bb30667c01fb607ef9f8b8a80fef5b300628703187b2a3"
                "73eb1dbde03318366d069f83a6f5900053c73633cb041b21c55e1a86c1f400b4"
            )
        );
    }

    #[test]
    fn sign_verify_roundtrip_and_flips() {
        let mut rng = Drbg::from_seed(17);
        let key = EcKeyPair::generate(&mut rng);
        let other = EcKeyPair::generate(&mut rng);
        let msg = rng.bytes(40);
        let sig = sign(&key, &msg);
        assert!(verify(&key.public_bytes(), &msg, &sig));
        assert!(!verify(&other.public_bytes(), &msg, &sig));
        assert!(!verify(&key.public_bytes(), &msg, &[0u8; 10]));
        for _ in 0..100 {
            let mut m = msg.clone();
            let mut s = sig.to_vec();
            if rng.u64() % 2 == 0 {
                let bit = rng.below(m.len() as u64 * 8) as usize;
                m[bit / 8] ^= 1 << (bit % 8);
            } else {
                let bit = rng.below(s.len() as u64 * 8) as usize;
                s[bit / 8] ^= 1 << (bit % 8);
            }
            assert!(!verify(&key.public_bytes(), &m, &s));
        }
    }

    #[test]
    fn prehash_sign_verify() {
        let mut rng = Drbg::from_seed(19);
        let key = EcKeyPair::generate(&mut rng);
        let digest = sha256(b"document bytes");
        let sig = sign_prehash(&key, &digest);
        assert!(verify_prehash(&key.public_bytes(), &digest, &sig));
        let other = sha256(b"other document");
        assert!(!verify_prehash(&key.public_bytes(), &other, &sig));
    }

    #[test]
    fn drbg_reproducible() {
        let mut a = Drbg::from_seed(42);
        let mut b = Drbg::from_seed(42);
        assert_eq!(a.bytes(100), b.bytes(100));
        assert_eq!(a.bytes(0), Vec::<u8>::new());
        let mut c = Drbg::from_seed(43);
        assert_ne!(Drbg::from_seed(42).bytes(32), c.bytes(32));
    }

    #[test]
    fn drbg_monobit_sanity() {
        let mut rng = Drbg::from_seed(1);
        let data = rng.bytes(10_000);
        let ones: u32 = data.iter().map(|b| b.count_ones()).sum();
        let fraction = f64::from(ones) / (10_000.0 * 8.0);
        assert!((0.45..=0.55).contains(&fraction), "ones fraction {fraction}");
    }

    #[test]
    fn drbg_constant_stream() {
        let mut d = Drbg::constant(0x5A);
        assert_eq!(d.bytes(4), vec![0x5A; 4]);
        assert_eq!(d.bytes(4), vec![0x5A; 4]);
    }
}
