//! Minimal certificate machinery for the two trust hierarchies: the
//! country signing chain that backs passive authentication (CSCA issuing
//! document signers) and the verifying chain that backs terminal
//! authentication (CVCA issuing document verifiers issuing terminals).
//!
//! Certificates use the lab's own compact TLV layout rather than X.509;
//! what matters here is chain semantics, not format interoperability.

use thiserror::Error;

use crate::codec::{tlv_decode, tlv_encode, TlvNode};
use crate::cryptokit::{sign, verify, Drbg, EcKeyPair};

/// Fixed reference instant for the lab clock, so generated material is
/// reproducible run to run. Roughly late 2023 in unix seconds.
pub const LAB_EPOCH: u64 = 1_700_000_000;

pub const TEN_YEARS: u64 = 10 * 365 * 24 * 3600;
pub const FIVE_YEARS: u64 = 5 * 365 * 24 * 3600;

const TAG_CERT: u16 = 0x7F21;
const TAG_BODY: u16 = 0x7F4E;
const TAG_ROLE: u16 = 0x80;
const TAG_SUBJECT: u16 = 0x5F20;
const TAG_ISSUER: u16 = 0x42;
const TAG_PUBKEY_SET: u16 = 0x7F49;
const TAG_PUBKEY: u16 = 0x86;
const TAG_NOT_BEFORE: u16 = 0x5F25;
const TAG_NOT_AFTER: u16 = 0x5F24;
const TAG_SIGNATURE: u16 = 0x5F37;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PkiError {
    #[error("role {0:?} cannot act as a trust root")]
    NotARoot(Role),
    #[error("role {parent:?} may not issue role {child:?}")]
    RoleViolation { parent: Role, child: Role },
    #[error("certificate encoding invalid: {0}")]
    BadEncoding(&'static str),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("no path to a trusted root (stopped at {0})")]
    UnknownRoot(String),
    #[error("certificate {0} is outside its validity window")]
    Expired(String),
    #[error("signature on certificate {0} does not verify")]
    BadSignature(String),
    #[error("role transition {parent:?} -> {child:?} not permitted")]
    RoleViolation { parent: Role, child: Role },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Csca,
    Ds,
    Cvca,
    Dv,
    Terminal,
}

pub const ALL_ROLES: [Role; 5] = [Role::Csca, Role::Ds, Role::Cvca, Role::Dv, Role::Terminal];

impl Role {
    pub fn is_root(self) -> bool {
        matches!(self, Role::Csca | Role::Cvca)
    }

    /// The fixed issuing hierarchy: CSCA signs document signers, CVCA
    /// signs document verifiers, document verifiers sign terminals.
    pub fn may_issue(self, child: Role) -> bool {
        matches!(
            (self, child),
            (Role::Csca, Role::Ds) | (Role::Cvca, Role::Dv) | (Role::Dv, Role::Terminal)
        )
    }

    fn id_byte(self) -> u8 {
        match self {
            Role::Csca => 1,
            Role::Ds => 2,
            Role::Cvca => 3,
            Role::Dv => 4,
            Role::Terminal => 5,
        }
    }

    fn from_id_byte(b: u8) -> Option<Role> {
        match b {
            1 => Some(Role::Csca),
            2 => Some(Role::Ds),
            3 => Some(Role::Cvca),
            4 => Some(Role::Dv),
            5 => Some(Role::Terminal),
            _ => None,
        }
    }
}

/// A compact certificate: named subject and issuer, a role in one of the
/// two hierarchies, a P-256 public key, a validity window, and the
/// issuer's signature over the encoded body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimpleCert {
    pub subject: String,
    pub issuer: String,
    pub role: Role,
    pub public_key: Vec<u8>,
    pub not_before: u64,
    pub not_after: u64,
    pub signature: Vec<u8>,
}

impl SimpleCert {
    fn body_node(&self) -> TlvNode {
        TlvNode::constructed(
            TAG_BODY,
            vec![
                TlvNode::primitive(TAG_ROLE, [self.role.id_byte()]).unwrap(),
                TlvNode::primitive(TAG_SUBJECT, self.subject.as_bytes()).unwrap(),
                TlvNode::primitive(TAG_ISSUER, self.issuer.as_bytes()).unwrap(),
                TlvNode::constructed(
                    TAG_PUBKEY_SET,
                    vec![TlvNode::primitive(TAG_PUBKEY, self.public_key.clone()).unwrap()],
                )
                .unwrap(),
                TlvNode::primitive(TAG_NOT_BEFORE, self.not_before.to_be_bytes()).unwrap(),
                TlvNode::primitive(TAG_NOT_AFTER, self.not_after.to_be_bytes()).unwrap(),
            ],
        )
        .unwrap()
    }

    /// The byte string the issuer signs.
    pub fn body_bytes(&self) -> Vec<u8> {
        tlv_encode(&self.body_node()).expect("certificate body encodes")
    }

    pub fn to_node(&self) -> TlvNode {
        TlvNode::constructed(
            TAG_CERT,
            vec![
                self.body_node(),
                TlvNode::primitive(TAG_SIGNATURE, self.signature.clone()).unwrap(),
            ],
        )
        .unwrap()
    }

    pub fn encode(&self) -> Vec<u8> {
        tlv_encode(&self.to_node()).expect("certificate encodes")
    }

    pub fn from_node(node: &TlvNode) -> Result<SimpleCert, PkiError> {
        if node.tag() != TAG_CERT {
            return Err(PkiError::BadEncoding("not a certificate object"));
        }
        let body = node.find(TAG_BODY).ok_or(PkiError::BadEncoding("missing body"))?;
        let role_byte = body
            .find_value(TAG_ROLE)
            .and_then(|v| v.first().copied())
            .ok_or(PkiError::BadEncoding("missing role"))?;
        let role = Role::from_id_byte(role_byte).ok_or(PkiError::BadEncoding("unknown role"))?;
        let text = |tag, what| -> Result<String, PkiError> {
            let bytes = body.find_value(tag).ok_or(PkiError::BadEncoding(what))?;
            String::from_utf8(bytes.to_vec()).map_err(|_| PkiError::BadEncoding(what))
        };
        let stamp = |tag, what| -> Result<u64, PkiError> {
            let bytes = body.find_value(tag).ok_or(PkiError::BadEncoding(what))?;
            let arr: [u8; 8] = bytes.try_into().map_err(|_| PkiError::BadEncoding(what))?;
            Ok(u64::from_be_bytes(arr))
        };
        let public_key = body
            .find(TAG_PUBKEY_SET)
            .and_then(|set| set.find_value(TAG_PUBKEY))
            .ok_or(PkiError::BadEncoding("missing public key"))?
            .to_vec();
        let signature = node
            .find_value(TAG_SIGNATURE)
            .ok_or(PkiError::BadEncoding("missing signature"))?
            .to_vec();
        Ok(SimpleCert {
            subject: text(TAG_SUBJECT, "missing subject")?,
            issuer: text(TAG_ISSUER, "missing issuer")?,
            role,
            public_key,
            not_before: stamp(TAG_NOT_BEFORE, "missing not-before")?,
            not_after: stamp(TAG_NOT_AFTER, "missing not-after")?,
            signature,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<SimpleCert, PkiError> {
        let (node, rest) = tlv_decode(bytes).map_err(|_| PkiError::BadEncoding("bad TLV"))?;
        if !rest.is_empty() {
            return Err(PkiError::BadEncoding("trailing bytes"));
        }
        SimpleCert::from_node(&node)
    }

    pub fn verify_signed_by(&self, issuer_public_key: &[u8]) -> bool {
        verify(issuer_public_key, &self.body_bytes(), &self.signature)
    }

    pub fn is_self_signed(&self) -> bool {
        self.subject == self.issuer && self.verify_signed_by(&self.public_key)
    }

    pub fn valid_at(&self, now: u64) -> bool {
        self.not_before <= now && now <= self.not_after
    }
}

/// Set of trusted self-signed root certificates.
#[derive(Debug, Clone, Default)]
pub struct TrustStore {
    roots: Vec<SimpleCert>,
}

impl TrustStore {
    pub fn new() -> TrustStore {
        TrustStore::default()
    }

    /// Only self-signed certificates with a root role may enter the store.
    pub fn add(&mut self, cert: SimpleCert) -> Result<(), PkiError> {
        if !cert.role.is_root() {
            return Err(PkiError::NotARoot(cert.role));
        }
        if !cert.is_self_signed() {
            return Err(PkiError::BadEncoding("root certificate is not self-signed"));
        }
        self.roots.push(cert);
        Ok(())
    }

    pub fn roots(&self) -> &[SimpleCert] {
        &self.roots
    }

    fn find_issuer(&self, cert: &SimpleCert) -> Option<&SimpleCert> {
        self.roots
            .iter()
            .find(|r| r.subject == cert.issuer && r.role.may_issue(cert.role))
    }
}

/// Fresh self-signed root with a newly drawn keypair.
pub fn generate_root(
    role: Role,
    name: &str,
    not_before: u64,
    not_after: u64,
    rng: &mut Drbg,
) -> Result<(SimpleCert, EcKeyPair), PkiError> {
    if !role.is_root() {
        return Err(PkiError::NotARoot(role));
    }
    let key = EcKeyPair::generate(rng);
    let mut cert = SimpleCert {
        subject: name.to_string(),
        issuer: name.to_string(),
        role,
        public_key: key.public_bytes(),
        not_before,
        not_after,
        signature: Vec::new(),
    };
    cert.signature = sign(&key, &cert.body_bytes()).to_vec();
    Ok((cert, key))
}

/// Issue a child certificate, enforcing the role hierarchy.
pub fn issue(
    parent: &SimpleCert,
    parent_key: &EcKeyPair,
    subject: &str,
    role: Role,
    not_before: u64,
    not_after: u64,
    rng: &mut Drbg,
) -> Result<(SimpleCert, EcKeyPair), PkiError> {
    if !parent.role.may_issue(role) {
        return Err(PkiError::RoleViolation { parent: parent.role, child: role });
    }
    let key = EcKeyPair::generate(rng);
    let mut cert = SimpleCert {
        subject: subject.to_string(),
        issuer: parent.subject.clone(),
        role,
        public_key: key.public_bytes(),
        not_before,
        not_after,
        signature: Vec::new(),
    };
    cert.signature = sign(parent_key, &cert.body_bytes()).to_vec();
    Ok((cert, key))
}

/// Walk from the leaf up through `intermediates` to a stored root,
/// checking signatures, role transitions and validity at every step.
pub fn verify_chain(
    leaf: &SimpleCert,
    intermediates: &[SimpleCert],
    store: &TrustStore,
    now: u64,
) -> Result<(), ChainError> {
    let mut current = leaf;
    // Path length is bounded by the role hierarchy; a small cap guards
    // against malicious issuer loops among the intermediates.
    for _ in 0..8 {
        if !current.valid_at(now) {
            return Err(ChainError::Expired(current.subject.clone()));
        }
        if let Some(root) = store.find_issuer(current) {
            if !root.valid_at(now) {
                return Err(ChainError::Expired(root.subject.clone()));
            }
            if !current.verify_signed_by(&root.public_key) {
                return Err(ChainError::BadSignature(current.subject.clone()));
            }
            return Ok(());
        }
        let issuer = intermediates
            .iter()
            .find(|c| c.subject == current.issuer && c.subject != current.subject)
            .ok_or_else(|| ChainError::UnknownRoot(current.subject.clone()))?;
        if !issuer.role.may_issue(current.role) {
            return Err(ChainError::RoleViolation { parent: issuer.role, child: current.role });
        }
        if !current.verify_signed_by(&issuer.public_key) {
            return Err(ChainError::BadSignature(current.subject.clone()));
        }
        current = issuer;
    }
    Err(ChainError::UnknownRoot(current.subject.clone()))
}

const TAG_BUNDLE: u16 = 0x7F60;
const TAG_BUNDLE_CSCA: u16 = 0xA1;
const TAG_BUNDLE_CVCA: u16 = 0xA2;
const TAG_BUNDLE_DV: u16 = 0xA3;
const TAG_BUNDLE_TERMINAL: u16 = 0xA4;
const TAG_BUNDLE_TERMINAL_KEY: u16 = 0x80;

/// Inspector-side trust material for one lab scenario: the two roots,
/// the terminal's certificate chain, and the terminal's private key.
/// Written next to the card file at personalization so an inspection
/// system can verify the document and exercise terminal authorization.
#[derive(Debug, Clone)]
pub struct TrustBundle {
    pub csca: SimpleCert,
    pub cvca: SimpleCert,
    pub dv: SimpleCert,
    pub terminal: SimpleCert,
    pub terminal_key: EcKeyPair,
}

impl TrustBundle {
    pub fn encode(&self) -> Vec<u8> {
        let wrap = |tag, cert: &SimpleCert| {
            TlvNode::constructed(tag, vec![cert.to_node()]).unwrap()
        };
        let node = TlvNode::constructed(
            TAG_BUNDLE,
            vec![
                wrap(TAG_BUNDLE_CSCA, &self.csca),
                wrap(TAG_BUNDLE_CVCA, &self.cvca),
                wrap(TAG_BUNDLE_DV, &self.dv),
                wrap(TAG_BUNDLE_TERMINAL, &self.terminal),
                TlvNode::primitive(TAG_BUNDLE_TERMINAL_KEY, self.terminal_key.secret_bytes())
                    .unwrap(),
            ],
        )
        .unwrap();
        tlv_encode(&node).expect("bundle encodes")
    }

    pub fn decode(bytes: &[u8]) -> Result<TrustBundle, PkiError> {
        let (node, _) = tlv_decode(bytes).map_err(|_| PkiError::BadEncoding("bundle TLV"))?;
        if node.tag() != TAG_BUNDLE {
            return Err(PkiError::BadEncoding("bundle tag"));
        }
        let cert = |tag, what: &'static str| -> Result<SimpleCert, PkiError> {
            let wrapper = node.find(tag).ok_or(PkiError::BadEncoding(what))?;
            let inner = wrapper.find(TAG_CERT).ok_or(PkiError::BadEncoding(what))?;
            SimpleCert::from_node(inner)
        };
        let key_bytes: [u8; 32] = node
            .find_value(TAG_BUNDLE_TERMINAL_KEY)
            .ok_or(PkiError::BadEncoding("terminal key"))?
            .try_into()
            .map_err(|_| PkiError::BadEncoding("terminal key width"))?;
        let terminal_key = EcKeyPair::from_secret_bytes(&key_bytes)
            .ok_or(PkiError::BadEncoding("terminal key scalar"))?;
        Ok(TrustBundle {
            csca: cert(TAG_BUNDLE_CSCA, "missing csca")?,
            cvca: cert(TAG_BUNDLE_CVCA, "missing cvca")?,
            dv: cert(TAG_BUNDLE_DV, "missing dv")?,
            terminal: cert(TAG_BUNDLE_TERMINAL, "missing terminal")?,
            terminal_key,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Drbg {
        Drbg::from_seed(0xC0FFEE)
    }

    fn window() -> (u64, u64) {
        (LAB_EPOCH, LAB_EPOCH + TEN_YEARS)
    }

    #[test]
    fn root_self_verifies() {
        let (nb, na) = window();
        let (csca, _) = generate_root(Role::Csca, "lab-csca", nb, na, &mut rng()).unwrap();
        assert!(csca.is_self_signed());
        assert!(csca.verify_signed_by(&csca.public_key));
    }

    #[test]
    fn fresh_keys_per_root() {
        let (nb, na) = window();
        let mut r = rng();
        let (a, _) = generate_root(Role::Csca, "same-name", nb, na, &mut r).unwrap();
        let (b, _) = generate_root(Role::Csca, "same-name", nb, na, &mut r).unwrap();
        assert_ne!(a.public_key, b.public_key);
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let (nb, na) = window();
        let (a, _) = generate_root(Role::Cvca, "lab-cvca", nb, na, &mut rng()).unwrap();
        let (b, _) = generate_root(Role::Cvca, "lab-cvca", nb, na, &mut rng()).unwrap();
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn non_root_role_rejected() {
        let (nb, na) = window();
        assert_eq!(
            generate_root(Role::Ds, "x", nb, na, &mut rng()).unwrap_err(),
            PkiError::NotARoot(Role::Ds)
        );
    }

    #[test]
    fn store_only_accepts_self_signed_roots() {
        let (nb, na) = window();
        let mut r = rng();
        let (csca, csca_key) = generate_root(Role::Csca, "csca", nb, na, &mut r).unwrap();
        let (ds, _) = issue(&csca, &csca_key, "ds", Role::Ds, nb, na, &mut r).unwrap();
        let mut store = TrustStore::new();
        assert_eq!(store.add(ds).unwrap_err(), PkiError::NotARoot(Role::Ds));
        let (other, _) = generate_root(Role::Cvca, "cvca", nb, na, &mut r).unwrap();
        let mut forged = other.clone();
        forged.signature[0] ^= 1;
        assert!(store.add(forged).is_err());
        assert!(store.add(other).is_ok());
    }

    #[test]
    fn issue_and_verify_two_level_chain() {
        let (nb, na) = window();
        let mut r = rng();
        let (csca, csca_key) = generate_root(Role::Csca, "csca", nb, na, &mut r).unwrap();
        let (ds, _) = issue(&csca, &csca_key, "ds-1", Role::Ds, nb, na, &mut r).unwrap();
        let mut store = TrustStore::new();
        store.add(csca).unwrap();
        assert_eq!(verify_chain(&ds, &[], &store, LAB_EPOCH + 1), Ok(()));
    }

    #[test]
    fn issue_and_verify_three_level_chain() {
        let (nb, na) = window();
        let mut r = rng();
        let (cvca, cvca_key) = generate_root(Role::Cvca, "cvca", nb, na, &mut r).unwrap();
        let (dv, dv_key) = issue(&cvca, &cvca_key, "dv", Role::Dv, nb, na, &mut r).unwrap();
        let (term, _) = issue(&dv, &dv_key, "term", Role::Terminal, nb, na, &mut r).unwrap();
        let mut store = TrustStore::new();
        store.add(cvca).unwrap();
        assert_eq!(verify_chain(&term, &[dv], &store, LAB_EPOCH + 1), Ok(()));
    }

    #[test]
    fn role_matrix_exhaustive() {
        let (nb, na) = window();
        let mut r = rng();
        for parent_role in ALL_ROLES {
            // Craft a parent cert of the wanted role without hierarchy
            // checks, to probe issue() in isolation.
            let parent_key = EcKeyPair::generate(&mut r);
            let mut parent = SimpleCert {
                subject: "p".into(),
                issuer: "p".into(),
                role: parent_role,
                public_key: parent_key.public_bytes(),
                not_before: nb,
                not_after: na,
                signature: Vec::new(),
            };
            parent.signature = sign(&parent_key, &parent.body_bytes()).to_vec();
            for child_role in ALL_ROLES {
                let allowed = matches!(
                    (parent_role, child_role),
                    (Role::Csca, Role::Ds) | (Role::Cvca, Role::Dv) | (Role::Dv, Role::Terminal)
                );
                let outcome = issue(&parent, &parent_key, "c", child_role, nb, na, &mut r);
                assert_eq!(outcome.is_ok(), allowed, "{parent_role:?} -> {child_role:?}");
            }
        }
    }

    #[test]
    fn unknown_root_rejected() {
        let (nb, na) = window();
        let mut r = rng();
        let (csca, csca_key) = generate_root(Role::Csca, "csca-a", nb, na, &mut r).unwrap();
        let (other, _) = generate_root(Role::Csca, "csca-b", nb, na, &mut r).unwrap();
        let (ds, _) = issue(&csca, &csca_key, "ds", Role::Ds, nb, na, &mut r).unwrap();
        let mut store = TrustStore::new();
        store.add(other).unwrap();
        assert!(matches!(verify_chain(&ds, &[], &store, LAB_EPOCH + 1), Err(ChainError::UnknownRoot(_))));
    }

    #[test]
    fn expired_leaf_rejected() {
        let (nb, na) = window();
        let mut r = rng();
        let (csca, csca_key) = generate_root(Role::Csca, "csca", nb, na, &mut r).unwrap();
        let (ds, _) = issue(&csca, &csca_key, "ds", Role::Ds, nb, nb + 100, &mut r).unwrap();
        let mut store = TrustStore::new();
        store.add(csca).unwrap();
        assert!(matches!(
            verify_chain(&ds, &[], &store, nb + 200),
            Err(ChainError::Expired(_))
        ));
        assert_eq!(verify_chain(&ds, &[], &store, nb + 50), Ok(()));
    }

    #[test]
    fn certificate_roundtrip() {
        let (nb, na) = window();
        let (cert, _) = generate_root(Role::Cvca, "round-trip", nb, na, &mut rng()).unwrap();
        let decoded = SimpleCert::decode(&cert.encode()).unwrap();
        assert_eq!(decoded, cert);
    }

    #[test]
    fn trust_bundle_roundtrip() {
        let (nb, na) = window();
        let mut r = rng();
        let (csca, _) = generate_root(Role::Csca, "csca", nb, na, &mut r).unwrap();
        let (cvca, cvca_key) = generate_root(Role::Cvca, "cvca", nb, na, &mut r).unwrap();
        let (dv, dv_key) = issue(&cvca, &cvca_key, "dv", Role::Dv, nb, na, &mut r).unwrap();
        let (terminal, terminal_key) =
            issue(&dv, &dv_key, "term", Role::Terminal, nb, na, &mut r).unwrap();
        let bundle = TrustBundle { csca, cvca, dv, terminal, terminal_key };
        let decoded = TrustBundle::decode(&bundle.encode()).unwrap();
        assert_eq!(decoded.csca, bundle.csca);
        assert_eq!(decoded.terminal, bundle.terminal);
        assert_eq!(decoded.terminal_key.secret_bytes(), bundle.terminal_key.secret_bytes());
    }

    #[test]
    fn mutated_chain_certificates_rejected() {
        let (nb, na) = window();
        let mut r = rng();
        let (cvca, cvca_key) = generate_root(Role::Cvca, "cvca", nb, na, &mut r).unwrap();
        let (dv, dv_key) = issue(&cvca, &cvca_key, "dv", Role::Dv, nb, na, &mut r).unwrap();
        let (term, _) = issue(&dv, &dv_key, "term", Role::Terminal, nb, na, &mut r).unwrap();
        let mut store = TrustStore::new();
        store.add(cvca).unwrap();

        let mut flip_rng = Drbg::from_seed(99);
        for _ in 0..60 {
            let mutate_leaf = flip_rng.u64() % 2 == 0;
            let victim = if mutate_leaf { &term } else { &dv };
            let mut bytes = victim.encode();
            let pos = flip_rng.below(bytes.len() as u64) as usize;
            let old = bytes[pos];
            let mut new = old;
            while new == old {
                new = flip_rng.bytes(1)[0];
            }
            bytes[pos] = new;
            let verdict = match SimpleCert::decode(&bytes) {
                Err(_) => continue, // structural damage: rejected before chain logic
                Ok(mutated) => {
                    if mutate_leaf {
                        verify_chain(&mutated, &[dv.clone()], &store, LAB_EPOCH + 1)
                    } else {
                        verify_chain(&term, &[mutated], &store, LAB_EPOCH + 1)
                    }
                }
            };
            assert!(verdict.is_err(), "mutation at byte {pos} was accepted");
        }
    }
}
