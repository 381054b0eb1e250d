//! A desk-scale protocol laboratory for eMRTD/eID identity cards: a
//! virtual chip with the standard logical data structure and security
//! protocol suite, the inspection system that reads and verifies it,
//! and the attack tooling to probe both: APDU malformation fuzzing, an
//! APDU relay bridge with round-trip-time distance bounding, and a
//! signing-client interception demo.

pub mod codec;
pub mod cryptokit;
pub mod fuzz;
pub mod lds;
pub mod card;
pub mod pki;
pub mod relay;
pub mod signclient;
pub mod sm;
pub mod terminal;
pub mod transport;

#[cfg(test)]
pub(crate) mod testutil;

pub use codec::{CommandApdu, ResponseApdu, TlvNode};
pub use cryptokit::{CipherSuite, Drbg, EcKeyPair, SessionKeys};
pub use lds::{LdsImage, Mrz, PaReport, Profile};
pub use pki::{SimpleCert, TrustStore};
