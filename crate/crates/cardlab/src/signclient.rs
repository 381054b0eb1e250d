//! A simulated signing client and the host-compromise study around it:
//! interception hooks can observe the PIN as it is entered and swap the
//! document between display and signature, while the card keeps doing
//! exactly what it was asked. The audit check compares what the user
//! saw against what was signed.

use thiserror::Error;

use crate::card::{PasswordType, INS_PSO, INS_VERIFY};
use crate::codec::{sw, CommandApdu};
use crate::cryptokit::{sha256, verify_prehash, CipherSuite, Drbg};
use crate::lds::EF_SIGN_CERT_FID;
use crate::pki::{verify_chain, SimpleCert, TrustStore, LAB_EPOCH};
use crate::terminal::{read_ef, run_pace, ProtocolError};
use crate::transport::Channel;

#[derive(Debug, Error)]
pub enum SignError {
    #[error("access protocol failed: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("card refused PIN verification ({0:04X})")]
    PinRefused(u16),
    #[error("card refused signature operation ({0:04X})")]
    SignatureRefused(u16),
    #[error("signing certificate unreadable")]
    Certificate,
}

/// A document queued for signing, as presented to the user.
#[derive(Debug, Clone)]
pub struct SignRequest {
    pub document: Vec<u8>,
    pub display_name: String,
}

impl SignRequest {
    pub fn new(document: impl Into<Vec<u8>>, display_name: impl Into<String>) -> SignRequest {
        SignRequest { document: document.into(), display_name: display_name.into() }
    }

    /// Digest recomputed from the bytes at the point of use.
    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.document)
    }
}

/// Interception points modelling a debugger attached to the client: an
/// observer on PIN entry, a substitution on document load, and a
/// rewrite of the digest just before it goes to the card. With no hooks
/// installed the client is byte-for-byte the honest one.
#[derive(Default)]
pub struct InterceptorHooks {
    pub on_pin_entry: Option<Box<dyn FnMut(&str)>>,
    pub on_document_load: Option<Box<dyn FnMut(SignRequest) -> SignRequest>>,
    pub pre_sign: Option<Box<dyn FnMut([u8; 32]) -> [u8; 32]>>,
}

impl InterceptorHooks {
    pub fn none() -> InterceptorHooks {
        InterceptorHooks::default()
    }
}

/// Everything observable after a signing run, for the audit.
#[derive(Debug, Clone)]
pub struct SignEvidence {
    pub signature: Vec<u8>,
    pub certificate: SimpleCert,
    pub digest_sent: [u8; 32],
    pub user_digest: [u8; 32],
    pub pin_captured: Option<String>,
    pub matches: bool,
}

impl SignEvidence {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("sign_evidence:\n");
        out.push_str(&format!("  certificate_subject: {}\n", self.certificate.subject));
        out.push_str(&format!("  user_digest: {}\n", hex::encode(self.user_digest)));
        out.push_str(&format!("  digest_sent: {}\n", hex::encode(self.digest_sent)));
        out.push_str(&format!("  signature: {}\n", hex::encode(&self.signature)));
        out.push_str(&format!(
            "  pin_captured: {}\n",
            match &self.pin_captured {
                Some(pin) => pin.clone(),
                None => "no".into(),
            }
        ));
        out.push_str(&format!("  digests_match: {}\n", self.matches));
        out
    }
}

/// Run the signing flow: password-authenticated channel with the PIN,
/// in-card PIN verification, then the two signature operations over the
/// request's digest. Hooks fire exactly where a debugger on the host
/// could: after the user saw the document and before the digest leaves
/// the process.
pub fn sign_document(
    channel: &mut dyn Channel,
    pin: &str,
    request: SignRequest,
    mut hooks: InterceptorHooks,
    rng: &mut Drbg,
) -> Result<SignEvidence, SignError> {
    // What the user believes they are signing.
    let user_digest = request.digest();

    // A compromised loader can swap the document after display.
    let effective = match hooks.on_document_load.as_mut() {
        Some(hook) => hook(request),
        None => request,
    };

    // PIN entry; an installed observer sees it in the clear.
    if let Some(hook) = hooks.on_pin_entry.as_mut() {
        hook(pin);
    }
    let pin_captured = hooks.on_pin_entry.is_some().then(|| pin.to_string());

    let mut session = run_pace(
        channel,
        pin.as_bytes(),
        PasswordType::Pin,
        CipherSuite::Aes128Cmac,
        rng,
    )?;

    let verify_cmd = CommandApdu::new(0, INS_VERIFY, 0x00, 0x80).with_data(pin.as_bytes().to_vec());
    let resp = session.transceive(channel, &verify_cmd)?;
    if resp.sw != sw::OK {
        return Err(SignError::PinRefused(resp.sw));
    }

    let mut digest_sent = effective.digest();
    if let Some(hook) = hooks.pre_sign.as_mut() {
        digest_sent = hook(digest_sent);
    }

    let hash_cmd = CommandApdu::new(0, INS_PSO, 0x90, 0xA0).with_data(digest_sent.to_vec());
    let resp = session.transceive(channel, &hash_cmd)?;
    if resp.sw != sw::OK {
        return Err(SignError::SignatureRefused(resp.sw));
    }
    let sign_cmd = CommandApdu::new(0, INS_PSO, 0x9E, 0x9A).with_le(0);
    let resp = session.transceive(channel, &sign_cmd)?;
    if resp.sw != sw::OK {
        return Err(SignError::SignatureRefused(resp.sw));
    }
    let signature = resp.data;

    let cert_bytes =
        read_ef(channel, &mut session, EF_SIGN_CERT_FID).map_err(|_| SignError::Certificate)?;
    let certificate = SimpleCert::decode(&cert_bytes).map_err(|_| SignError::Certificate)?;

    Ok(SignEvidence {
        signature,
        certificate,
        digest_sent,
        user_digest,
        pin_captured,
        matches: digest_sent == user_digest,
    })
}

/// Does this signature commit the holder to this document? True only
/// when the signature verifies over the document's digest under a
/// certificate that chains to the trust store.
pub fn verify_signed(
    document: &[u8],
    signature: &[u8],
    certificate: &SimpleCert,
    store: &TrustStore,
) -> bool {
    if verify_chain(certificate, &[], store, LAB_EPOCH + 1).is_err() {
        return false;
    }
    verify_prehash(&certificate.public_key, &sha256(document), signature)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditOutcome {
    Clean,
    Alarm(AuditAlarm),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditAlarm {
    DigestMismatch,
    PinExposure,
}

impl AuditOutcome {
    pub fn render(&self) -> String {
        match self {
            AuditOutcome::Clean => "audit: clean".into(),
            AuditOutcome::Alarm(AuditAlarm::DigestMismatch) => "audit: alarm(digest-mismatch)".into(),
            AuditOutcome::Alarm(AuditAlarm::PinExposure) => "audit: alarm(pin-exposure)".into(),
        }
    }
}

/// Host-side audit over the evidence: alarm whenever the signed digest
/// is not the displayed one, or the PIN was observable.
pub fn audit(evidence: &SignEvidence) -> AuditOutcome {
    if !evidence.matches {
        return AuditOutcome::Alarm(AuditAlarm::DigestMismatch);
    }
    if evidence.pin_captured.is_some() {
        return AuditOutcome::Alarm(AuditAlarm::PinExposure);
    }
    AuditOutcome::Clean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::lab_setup;
    use crate::transport::loopback;
    use std::cell::RefCell;
    use std::rc::Rc;

    fn rng() -> Drbg {
        Drbg::from_seed(0xFACE)
    }

    #[test]
    fn honest_run_signs_user_document() {
        let setup = lab_setup(90);
        let mut ch = loopback(setup.card);
        let request = SignRequest::new(b"contract: pay 10".to_vec(), "contract.txt");
        let evidence =
            sign_document(&mut ch, "123456", request, InterceptorHooks::none(), &mut rng()).unwrap();
        assert!(evidence.matches);
        assert!(evidence.pin_captured.is_none());
        assert!(verify_signed(b"contract: pay 10", &evidence.signature, &evidence.certificate, &setup.store));
        assert_eq!(audit(&evidence), AuditOutcome::Clean);
    }

    #[test]
    fn substitution_hook_signs_attacker_document() {
        let setup = lab_setup(91);
        let mut ch = loopback(setup.card);
        let request = SignRequest::new(b"contract: pay 10".to_vec(), "contract.txt");
        let hooks = InterceptorHooks {
            on_document_load: Some(Box::new(|mut r: SignRequest| {
                r.document = b"contract: pay 1000000".to_vec();
                r
            })),
            ..InterceptorHooks::none()
        };
        let evidence = sign_document(&mut ch, "123456", request, hooks, &mut rng()).unwrap();
        assert!(!evidence.matches);
        // The signature legally commits to the attacker's text, not the
        // user's.
        assert!(verify_signed(b"contract: pay 1000000", &evidence.signature, &evidence.certificate, &setup.store));
        assert!(!verify_signed(b"contract: pay 10", &evidence.signature, &evidence.certificate, &setup.store));
        assert_eq!(audit(&evidence), AuditOutcome::Alarm(AuditAlarm::DigestMismatch));
    }

    #[test]
    fn pin_capture_hook_observes_pin() {
        let setup = lab_setup(92);
        let mut ch = loopback(setup.card);
        let captured = Rc::new(RefCell::new(String::new()));
        let sink = Rc::clone(&captured);
        let hooks = InterceptorHooks {
            on_pin_entry: Some(Box::new(move |pin| {
                *sink.borrow_mut() = pin.to_string();
            })),
            ..InterceptorHooks::none()
        };
        let request = SignRequest::new(b"doc".to_vec(), "doc");
        let evidence = sign_document(&mut ch, "123456", request, hooks, &mut rng()).unwrap();
        assert_eq!(&*captured.borrow(), "123456");
        assert_eq!(evidence.pin_captured.as_deref(), Some("123456"));
        assert!(evidence.matches, "capture alone does not alter the document");
        assert_eq!(audit(&evidence), AuditOutcome::Alarm(AuditAlarm::PinExposure));
    }

    #[test]
    fn pre_sign_hook_rewrites_digest() {
        let setup = lab_setup(93);
        let mut ch = loopback(setup.card);
        let attacker_digest = sha256(b"attacker bytes");
        let hooks = InterceptorHooks {
            pre_sign: Some(Box::new(move |_| attacker_digest)),
            ..InterceptorHooks::none()
        };
        let request = SignRequest::new(b"user bytes".to_vec(), "doc");
        let evidence = sign_document(&mut ch, "123456", request, hooks, &mut rng()).unwrap();
        assert!(!evidence.matches);
        assert!(verify_signed(b"attacker bytes", &evidence.signature, &evidence.certificate, &setup.store));
        assert_eq!(audit(&evidence), AuditOutcome::Alarm(AuditAlarm::DigestMismatch));
    }

    #[test]
    fn wrong_pin_fails_before_signing() {
        let setup = lab_setup(94);
        let mut ch = loopback(setup.card);
        let request = SignRequest::new(b"doc".to_vec(), "doc");
        let err =
            sign_document(&mut ch, "999999", request, InterceptorHooks::none(), &mut rng()).unwrap_err();
        assert!(matches!(err, SignError::Protocol(_)));
    }

    #[test]
    fn card_signs_exactly_what_it_received() {
        // Card-side integrity: in the substitution scenario the card's
        // signature is valid over the digest it was sent; the
        // compromise is host-side only.
        let setup = lab_setup(95);
        let mut ch = loopback(setup.card);
        let hooks = InterceptorHooks {
            pre_sign: Some(Box::new(|_| sha256(b"swapped"))),
            ..InterceptorHooks::none()
        };
        let request = SignRequest::new(b"original".to_vec(), "doc");
        let evidence = sign_document(&mut ch, "123456", request, hooks, &mut rng()).unwrap();
        assert!(verify_prehash(
            &evidence.certificate.public_key,
            &evidence.digest_sent,
            &evidence.signature
        ));
    }

    #[test]
    fn evidence_render_is_stable() {
        let setup = lab_setup(96);
        let run = || {
            let mut ch = loopback(setup.card.clone());
            let request = SignRequest::new(b"doc".to_vec(), "doc");
            sign_document(&mut ch, "123456", request, InterceptorHooks::none(), &mut rng())
                .unwrap()
                .render()
        };
        assert_eq!(run(), run());
    }
}
