//! Shared fixtures for the unit tests.

use crate::card::VirtualCard;
use crate::cryptokit::{Drbg, EcKeyPair};
use crate::lds::{default_face_placeholder, MrzFields, Profile};
use crate::pki::{generate_root, issue, Role, SimpleCert, TrustStore, LAB_EPOCH, TEN_YEARS};

pub fn sample_fields() -> MrzFields {
    MrzFields {
        document_code: "ID".into(),
        issuing_state: "UTO".into(),
        document_number: "L898902C".into(),
        optional_data: String::new(),
        date_of_birth: "690806".into(),
        sex: 'F',
        date_of_expiry: "940623".into(),
        nationality: "UTO".into(),
        optional_data2: String::new(),
        name: "ERIKSSON<<ANNA<MARIA".into(),
    }
}

pub fn sample_profile() -> Profile {
    Profile {
        name: "ERIKSSON ANNA MARIA".into(),
        document_number: "L898902C".into(),
        date_of_birth: "690806".into(),
        date_of_expiry: "940623".into(),
        nationality: "UTO".into(),
        issuing_state: "UTO".into(),
        document_code: "ID".into(),
        sex: 'F',
        pin: "123456".into(),
        can: "654321".into(),
        face: default_face_placeholder(),
        fingerprint: Some(b"FINGERPRINT-PLACEHOLDER".to_vec()),
    }
}

pub struct LabSetup {
    pub card: VirtualCard,
    pub cvca: SimpleCert,
    pub cvca_key: EcKeyPair,
    pub store: TrustStore,
}

/// A personalized card plus the trust material around it, all derived
/// from one seed.
pub fn lab_setup(seed: u64) -> LabSetup {
    lab_setup_with_profile(seed, &sample_profile())
}

pub fn lab_setup_with_profile(seed: u64, profile: &Profile) -> LabSetup {
    let mut rng = Drbg::from_seed(seed);
    let (csca, csca_key) =
        generate_root(Role::Csca, "lab-csca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng).unwrap();
    let (cvca, cvca_key) =
        generate_root(Role::Cvca, "lab-cvca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng).unwrap();
    let card =
        VirtualCard::personalize(profile, &csca, &csca_key, cvca.clone(), rng.fork()).unwrap();
    let mut store = TrustStore::new();
    store.add(csca).unwrap();
    LabSetup { card, cvca, cvca_key, store }
}

/// Issue a document-verifier plus terminal pair under the given root.
pub fn terminal_chain(
    cvca: &SimpleCert,
    cvca_key: &EcKeyPair,
    rng: &mut Drbg,
) -> (SimpleCert, SimpleCert, EcKeyPair) {
    let (dv, dv_key) = issue(
        cvca,
        cvca_key,
        "lab-dv",
        Role::Dv,
        LAB_EPOCH,
        LAB_EPOCH + TEN_YEARS,
        rng,
    )
    .unwrap();
    let (terminal, terminal_key) = issue(
        &dv,
        &dv_key,
        "lab-terminal",
        Role::Terminal,
        LAB_EPOCH,
        LAB_EPOCH + TEN_YEARS,
        rng,
    )
    .unwrap();
    (dv, terminal, terminal_key)
}
