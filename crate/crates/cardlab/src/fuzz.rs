//! APDU malformation harness: a channel wrapper that mutates selected
//! protocol steps in flight, and a seeded campaign that checks the
//! card/terminal pair fails closed under every mutation class. The hook
//! point is the channel seam, which sees and can rewrite every frame in
//! real time.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use p256::ProjectivePoint;

use crate::card::{VirtualCard, INS_EXTERNAL_AUTHENTICATE, INS_GENERAL_AUTHENTICATE,
    INS_GET_CHALLENGE, INS_MSE_SET, TAG_DYNAMIC_AUTH, TAG_EPHEMERAL_KEY_TERMINAL};
use crate::codec::{decode_command, encode_command, tlv_decode, tlv_encode, TlvNode};
use crate::cryptokit::Drbg;
use crate::lds::{dg_fid, Mrz, Profile};
use crate::pki::{generate_root, Role, LAB_EPOCH, TEN_YEARS};
use crate::sm;
use crate::terminal::{read_ef, run_bac, run_pace, ProtocolError};
use crate::transport::{loopback, Channel, TransportError};

/// Mutation classes applied to in-flight frames. `NonceConstant` is a
/// card configuration rather than a byte rewrite: it models broken
/// randomness on the card side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    BitFlip,
    Truncate,
    LengthFieldCorrupt,
    MacCorrupt,
    SscReplay,
    SwapEphemeralKey,
    NonceConstant,
}

impl Mutation {
    pub fn name(self) -> &'static str {
        match self {
            Mutation::BitFlip => "bit_flip",
            Mutation::Truncate => "truncate",
            Mutation::LengthFieldCorrupt => "length_field_corrupt",
            Mutation::MacCorrupt => "mac_corrupt",
            Mutation::SscReplay => "ssc_replay",
            Mutation::SwapEphemeralKey => "swap_ephemeral_key",
            Mutation::NonceConstant => "nonce_constant",
        }
    }

    pub fn from_name(name: &str) -> Option<Mutation> {
        Some(match name {
            "bit_flip" => Mutation::BitFlip,
            "truncate" => Mutation::Truncate,
            "length_field_corrupt" => Mutation::LengthFieldCorrupt,
            "mac_corrupt" => Mutation::MacCorrupt,
            "ssc_replay" => Mutation::SscReplay,
            "swap_ephemeral_key" => Mutation::SwapEphemeralKey,
            "nonce_constant" => Mutation::NonceConstant,
            _ => return None,
        })
    }

    /// The wire-level mutations a standard card must survive.
    pub fn wire_set() -> Vec<Mutation> {
        vec![
            Mutation::BitFlip,
            Mutation::Truncate,
            Mutation::LengthFieldCorrupt,
            Mutation::MacCorrupt,
            Mutation::SscReplay,
            Mutation::SwapEphemeralKey,
        ]
    }

    pub fn all() -> Vec<Mutation> {
        let mut set = Mutation::wire_set();
        set.push(Mutation::NonceConstant);
        set
    }
}

/// Which protocol step a script entry fires on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSelector {
    GetChallenge,
    ExternalAuthenticate,
    MseSet,
    /// Nth GENERAL AUTHENTICATE exchange (1-based).
    GaRound(u8),
    /// Nth secure-messaging protected command (1-based).
    WrappedCommand(u16),
    /// Nth exchange overall (1-based).
    Exchange(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutDirection {
    Command,
    Response,
}

#[derive(Debug, Clone, Copy)]
pub struct ScriptEntry {
    pub step: StepSelector,
    pub direction: MutDirection,
    pub mutation: Mutation,
}

/// One observed exchange: the frames as sent by the honest parties and
/// as delivered after any mutation.
#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub command: Vec<u8>,
    pub delivered_command: Vec<u8>,
    pub response: Vec<u8>,
    pub delivered_response: Vec<u8>,
}

impl TranscriptEntry {
    pub fn command_mutated(&self) -> bool {
        self.command != self.delivered_command
    }

    pub fn response_mutated(&self) -> bool {
        self.response != self.delivered_response
    }

    /// Did the mutation change what the card acts on? The expected-length
    /// byte is response-size advice, so a rewrite touching only it (or
    /// only the encoding) is not material corruption.
    pub fn command_materially_mutated(&self) -> bool {
        if !self.command_mutated() {
            return false;
        }
        match (decode_command(&self.command), decode_command(&self.delivered_command)) {
            (Ok(a), Ok(b)) => {
                (a.cla, a.ins, a.p1, a.p2, a.data) != (b.cla, b.ins, b.p1, b.p2, b.data)
            }
            _ => true,
        }
    }
}

/// Channel wrapper applying scripted mutations to matching frames; all
/// other traffic passes verbatim. Also a plain transcript recorder when
/// the script is empty.
pub struct InterceptingChannel<C> {
    inner: C,
    script: Vec<ScriptEntry>,
    rng: Drbg,
    exchange_count: u16,
    wrapped_count: u16,
    ga_count: u8,
    captured_wrapped: Option<Vec<u8>>,
    transcript: Vec<TranscriptEntry>,
    mutations_applied: u32,
}

pub fn intercepting_channel<C: Channel>(inner: C, script: Vec<ScriptEntry>, rng: Drbg) -> InterceptingChannel<C> {
    InterceptingChannel {
        inner,
        script,
        rng,
        exchange_count: 0,
        wrapped_count: 0,
        ga_count: 0,
        captured_wrapped: None,
        transcript: Vec::new(),
        mutations_applied: 0,
    }
}

impl<C> InterceptingChannel<C> {
    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn mutations_applied(&self) -> u32 {
        self.mutations_applied
    }

    fn step_matches(&self, step: StepSelector, ins: Option<u8>, wrapped: bool) -> bool {
        match step {
            StepSelector::GetChallenge => !wrapped && ins == Some(INS_GET_CHALLENGE),
            StepSelector::ExternalAuthenticate => !wrapped && ins == Some(INS_EXTERNAL_AUTHENTICATE),
            StepSelector::MseSet => !wrapped && ins == Some(INS_MSE_SET),
            StepSelector::GaRound(n) => {
                !wrapped && ins == Some(INS_GENERAL_AUTHENTICATE) && self.ga_count == n
            }
            StepSelector::WrappedCommand(n) => wrapped && self.wrapped_count == n,
            StepSelector::Exchange(n) => self.exchange_count == n,
        }
    }

    fn apply(&mut self, mutation: Mutation, bytes: &[u8], is_command: bool) -> Vec<u8> {
        let mutated = mutate_bytes(mutation, bytes, is_command, &mut self.rng, &self.captured_wrapped);
        if mutated != bytes {
            self.mutations_applied += 1;
        }
        mutated
    }
}

impl<C: Channel> Channel for InterceptingChannel<C> {
    fn exchange(&mut self, command: &[u8]) -> Result<(Vec<u8>, u64), TransportError> {
        self.exchange_count += 1;
        let parsed = decode_command(command).ok();
        let ins = parsed.as_ref().map(|c| c.ins);
        let wrapped = parsed.as_ref().map(|c| sm::is_protected(c.cla)).unwrap_or(false);
        if wrapped {
            self.wrapped_count += 1;
            if self.captured_wrapped.is_none() {
                self.captured_wrapped = Some(command.to_vec());
            }
        }
        if !wrapped && ins == Some(INS_GENERAL_AUTHENTICATE) {
            self.ga_count += 1;
        }

        let mut delivered = command.to_vec();
        let entries: Vec<ScriptEntry> = self
            .script
            .iter()
            .copied()
            .filter(|e| e.direction == MutDirection::Command && self.step_matches(e.step, ins, wrapped))
            .collect();
        for entry in entries {
            delivered = self.apply(entry.mutation, &delivered, true);
        }

        let (response, rtt) = self.inner.exchange(&delivered)?;

        let mut delivered_response = response.clone();
        let entries: Vec<ScriptEntry> = self
            .script
            .iter()
            .copied()
            .filter(|e| e.direction == MutDirection::Response && self.step_matches(e.step, ins, wrapped))
            .collect();
        for entry in entries {
            delivered_response = self.apply(entry.mutation, &delivered_response, false);
        }

        self.transcript.push(TranscriptEntry {
            command: command.to_vec(),
            delivered_command: delivered,
            response,
            delivered_response: delivered_response.clone(),
        });
        Ok((delivered_response, rtt))
    }
}

/// Deterministic byte-level rewrites for each mutation class.
fn mutate_bytes(
    mutation: Mutation,
    bytes: &[u8],
    is_command: bool,
    rng: &mut Drbg,
    captured_wrapped: &Option<Vec<u8>>,
) -> Vec<u8> {
    let mut out = bytes.to_vec();
    match mutation {
        Mutation::BitFlip => {
            if !out.is_empty() {
                let bit = rng.below(out.len() as u64 * 8) as usize;
                out[bit / 8] ^= 1 << (bit % 8);
            }
        }
        Mutation::Truncate => {
            if out.len() > 1 {
                let cut = 1 + rng.below(out.len().min(8) as u64) as usize;
                out.truncate(out.len().saturating_sub(cut));
            }
        }
        Mutation::LengthFieldCorrupt => {
            // Commands carry their length at offset 4 (Lc or le);
            // responses carry TLV lengths near the front.
            let idx = if is_command && out.len() >= 5 { 4 } else { out.len() / 2 };
            if idx < out.len() {
                out[idx] = out[idx].wrapping_add(1);
            }
        }
        Mutation::MacCorrupt => {
            // The authentication tag sits at the tail of the payload:
            // for commands just before the trailing le byte, for
            // responses just before the status word.
            if is_command {
                if out.len() >= 6 {
                    let idx = out.len() - 2;
                    out[idx] ^= 0x01;
                }
            } else if out.len() > 2 {
                let idx = out.len() - 3;
                out[idx] ^= 0x01;
            }
        }
        Mutation::SscReplay => {
            if let Some(captured) = captured_wrapped {
                if is_command {
                    out = captured.clone();
                }
            }
        }
        Mutation::SwapEphemeralKey => {
            if let Some(swapped) = swap_ephemeral_key(&out, rng) {
                out = swapped;
            } else if !out.is_empty() {
                let bit = rng.below(out.len() as u64 * 8) as usize;
                out[bit / 8] ^= 1 << (bit % 8);
            }
        }
        Mutation::NonceConstant => {}
    }
    out
}

/// Replace the terminal's round-3 ephemeral key with a different valid
/// curve point, re-encoding the command around it.
fn swap_ephemeral_key(command: &[u8], rng: &mut Drbg) -> Option<Vec<u8>> {
    let cmd = decode_command(command).ok()?;
    let (node, _) = tlv_decode(&cmd.data).ok()?;
    if node.tag() != TAG_DYNAMIC_AUTH {
        return None;
    }
    node.find_value(TAG_EPHEMERAL_KEY_TERMINAL)?;
    use p256::elliptic_curve::sec1::ToSec1Point;
    let scalar = rng.scalar();
    let point = (ProjectivePoint::GENERATOR * *scalar.as_ref()).to_affine();
    let substitute = point.to_sec1_point(false).as_bytes().to_vec();
    let rebuilt = TlvNode::constructed(
        TAG_DYNAMIC_AUTH,
        vec![TlvNode::primitive(TAG_EPHEMERAL_KEY_TERMINAL, substitute).unwrap()],
    )
    .unwrap();
    let mut mutated = cmd;
    mutated.data = tlv_encode(&rebuilt).unwrap();
    Some(encode_command(&mutated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Bac,
    Pace,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Bac => "bac",
            Protocol::Pace => "pace",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    PlaintextLeak,
    Crash,
    SilentAcceptance,
    WeakRandomnessReplay,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub iteration: u32,
    pub mutation: &'static str,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct OutcomeCounts {
    pub rejected_with_sw: u32,
    pub session_reset: u32,
    pub protocol_abort: u32,
    pub clean: u32,
}

/// Result of one campaign. Zero violations is the pass condition.
#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub protocol: Protocol,
    pub iterations: u32,
    pub outcomes: BTreeMap<&'static str, OutcomeCounts>,
    pub violations: Vec<Violation>,
}

impl CampaignReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("fuzz_campaign:\n");
        out.push_str(&format!("  protocol: {}\n", self.protocol.name()));
        out.push_str(&format!("  iterations: {}\n", self.iterations));
        out.push_str("  outcomes:\n");
        for (name, c) in &self.outcomes {
            out.push_str(&format!(
                "    {name}: rejected_with_sw={} session_reset={} protocol_abort={} clean={}\n",
                c.rejected_with_sw, c.session_reset, c.protocol_abort, c.clean
            ));
        }
        if self.violations.is_empty() {
            out.push_str("  violations: none\n");
        } else {
            out.push_str("  violations:\n");
            for v in &self.violations {
                out.push_str(&format!(
                    "    iteration={} mutation={} kind={:?} {}\n",
                    v.iteration, v.mutation, v.kind, v.detail
                ));
            }
        }
        out
    }
}

struct CampaignTarget {
    template: VirtualCard,
    bac_seed: [u8; 16],
    can: Vec<u8>,
    needles: Vec<Vec<u8>>,
}

fn build_target(profile: &Profile, seed: u64) -> CampaignTarget {
    let mut rng = Drbg::from_seed_bytes(&[b"campaign".as_slice(), &seed.to_be_bytes()].concat());
    let (csca, csca_key) =
        generate_root(Role::Csca, "fuzz-csca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng)
            .expect("root generation");
    let (cvca, _) =
        generate_root(Role::Cvca, "fuzz-cvca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng)
            .expect("root generation");
    let template = VirtualCard::personalize(profile, &csca, &csca_key, cvca, rng.fork())
        .expect("campaign profile personalizes");
    let mrz = Mrz::build(&profile.mrz_fields()).expect("campaign profile mrz");
    // Substrings of personal data long enough that a chance hit in
    // ciphertext is negligible.
    let mut needles: Vec<Vec<u8>> = Vec::new();
    needles.push(mrz.fields().document_number.as_bytes().to_vec());
    needles.push(mrz.fields().name.as_bytes()[..mrz.fields().name.len().min(12)].to_vec());
    if profile.face.len() >= 16 {
        needles.push(profile.face[..16].to_vec());
    }
    CampaignTarget { template, bac_seed: mrz.bac_seed(), can: profile.can.as_bytes().to_vec(), needles }
}

fn classify_error(e: &ProtocolError) -> &'static str {
    match e {
        ProtocolError::AuthenticationFailed(_)
        | ProtocolError::Blocked
        | ProtocolError::Card(_)
        | ProtocolError::AccessDenied
        | ProtocolError::NotFound => "rejected",
        ProtocolError::SessionLost => "reset",
        ProtocolError::Transport(_) | ProtocolError::Malformed(_) => "abort",
    }
}

fn drive(
    protocol: Protocol,
    channel: &mut dyn Channel,
    target: &CampaignTarget,
    rng: &mut Drbg,
) -> Result<(), ProtocolError> {
    match protocol {
        Protocol::Bac => {
            let mut session = run_bac(channel, &target.bac_seed, rng)?;
            read_ef(channel, &mut session, dg_fid(1))?;
            Ok(())
        }
        Protocol::Pace => {
            let mut session = run_pace(
                channel,
                &target.can,
                crate::card::PasswordType::Can,
                crate::cryptokit::CipherSuite::Aes128Cmac,
                rng,
            )?;
            read_ef(channel, &mut session, dg_fid(1))?;
            Ok(())
        }
    }
}

/// Candidate (step, direction) targets for a mutation under a protocol.
/// Constrained so the chosen mutation always has something to bite on.
fn candidate_targets(protocol: Protocol, mutation: Mutation) -> Vec<(StepSelector, MutDirection)> {
    use MutDirection::*;
    use StepSelector::*;
    match mutation {
        Mutation::SwapEphemeralKey => vec![(GaRound(3), Command)],
        Mutation::SscReplay => vec![(WrappedCommand(2), Command)],
        Mutation::MacCorrupt => match protocol {
            Protocol::Bac => vec![
                (ExternalAuthenticate, Command),
                (ExternalAuthenticate, Response),
                (WrappedCommand(1), Command),
                (WrappedCommand(1), Response),
            ],
            Protocol::Pace => vec![
                (GaRound(4), Command),
                (GaRound(4), Response),
                (WrappedCommand(1), Command),
                (WrappedCommand(1), Response),
            ],
        },
        _ => match protocol {
            Protocol::Bac => vec![
                (GetChallenge, Command),
                (GetChallenge, Response),
                (ExternalAuthenticate, Command),
                (ExternalAuthenticate, Response),
                (WrappedCommand(1), Command),
                (WrappedCommand(1), Response),
                (WrappedCommand(2), Command),
            ],
            Protocol::Pace => vec![
                (MseSet, Command),
                (MseSet, Response),
                (GaRound(1), Command),
                (GaRound(1), Response),
                (GaRound(2), Command),
                (GaRound(2), Response),
                (GaRound(3), Command),
                (GaRound(3), Response),
                (GaRound(4), Command),
                (GaRound(4), Response),
                (WrappedCommand(1), Command),
                (WrappedCommand(1), Response),
            ],
        },
    }
}

/// Run a seeded malformation campaign: a fresh card per iteration, one
/// randomly chosen mutation and target, and fail-closed classification
/// of the outcome. Violations are plaintext leaks, crashes, accepted
/// corruption of an authentication step, or (for the degenerate
/// constant-nonce configuration) a successful transcript replay.
pub fn run_campaign(
    profile: &Profile,
    protocol: Protocol,
    mutations: &[Mutation],
    iterations: u32,
    seed: u64,
) -> CampaignReport {
    assert!(iterations >= 1);
    // The ephemeral-key swap only exists in the password-authenticated
    // establishment; everything else applies to both protocols.
    let mutations: Vec<Mutation> = mutations
        .iter()
        .copied()
        .filter(|m| *m != Mutation::SwapEphemeralKey || protocol == Protocol::Pace)
        .collect();
    let target = build_target(profile, seed);
    let mut outcomes: BTreeMap<&'static str, OutcomeCounts> = BTreeMap::new();
    for m in &mutations {
        outcomes.entry(m.name()).or_default();
    }
    let mut violations = Vec::new();

    for iteration in 0..iterations {
        let mut iter_rng = Drbg::from_seed_bytes(
            &[&seed.to_be_bytes()[..], &iteration.to_be_bytes()[..]].concat(),
        );
        // An empty set means honest runs only: the harness itself must
        // be transparent.
        if mutations.is_empty() {
            let mut card = target.template.clone();
            card.reset_session();
            card.set_rng(iter_rng.fork());
            let mut channel = intercepting_channel(loopback(card), Vec::new(), iter_rng.fork());
            let mut term_rng = iter_rng.fork();
            let counts = outcomes.entry("none").or_default();
            match drive(protocol, &mut channel, &target, &mut term_rng) {
                Ok(()) => counts.clean += 1,
                Err(e) => match classify_error(&e) {
                    "rejected" => counts.rejected_with_sw += 1,
                    "reset" => counts.session_reset += 1,
                    _ => counts.protocol_abort += 1,
                },
            }
            scan_for_leaks(&channel, &target, iteration, "none", &mut violations);
            continue;
        }
        let mutation = mutations[iter_rng.below(mutations.len() as u64) as usize];
        let counts = outcomes.entry(mutation.name()).or_default();

        if mutation == Mutation::NonceConstant {
            match replay_probe(protocol, &target, iteration, &mut iter_rng) {
                Some(violation) => violations.push(violation),
                None => counts.rejected_with_sw += 1,
            }
            continue;
        }

        let targets = candidate_targets(protocol, mutation);
        let (step, direction) = targets[iter_rng.below(targets.len() as u64) as usize];
        let script = vec![ScriptEntry { step, direction, mutation }];

        let mut card = target.template.clone();
        card.reset_session();
        card.set_rng(iter_rng.fork());
        let mut channel = intercepting_channel(loopback(card), script, iter_rng.fork());
        let mut term_rng = iter_rng.fork();

        let outcome = catch_unwind(AssertUnwindSafe(|| {
            drive(protocol, &mut channel, &target, &mut term_rng)
        }));

        match outcome {
            Err(panic) => {
                violations.push(Violation {
                    iteration,
                    mutation: mutation.name(),
                    kind: ViolationKind::Crash,
                    detail: format!("panic: {:?}", panic.downcast_ref::<&str>()),
                });
                continue;
            }
            Ok(result) => {
                let applied = channel.mutations_applied() > 0;
                scan_for_leaks(&channel, &target, iteration, mutation.name(), &mut violations);
                // Only rewrites the card acts on count: the trailing
                // expected-length byte is response-size advice and is
                // legitimately tolerated.
                let material = channel.transcript().iter().any(|e| {
                    e.command_materially_mutated() || e.response_mutated()
                });
                match result {
                    Ok(()) => {
                        if applied && material {
                            violations.push(Violation {
                                iteration,
                                mutation: mutation.name(),
                                kind: ViolationKind::SilentAcceptance,
                                detail: format!("{step:?}/{direction:?} accepted despite corruption"),
                            });
                        } else {
                            counts.clean += 1;
                        }
                    }
                    Err(e) => match classify_error(&e) {
                        "rejected" => counts.rejected_with_sw += 1,
                        "reset" => counts.session_reset += 1,
                        _ => counts.protocol_abort += 1,
                    },
                }
            }
        }
    }

    CampaignReport { protocol, iterations, outcomes, violations }
}

fn scan_for_leaks<C>(
    channel: &InterceptingChannel<C>,
    target: &CampaignTarget,
    iteration: u32,
    mutation: &'static str,
    violations: &mut Vec<Violation>,
) {
    for entry in channel.transcript() {
        for frame in [&entry.delivered_command, &entry.delivered_response, &entry.response] {
            for needle in &target.needles {
                if frame.windows(needle.len()).any(|w| w == needle.as_slice()) {
                    violations.push(Violation {
                        iteration,
                        mutation,
                        kind: ViolationKind::PlaintextLeak,
                        detail: format!("personal data visible in frame {}", hex::encode(frame)),
                    });
                    return;
                }
            }
        }
    }
}

/// Degenerate-randomness probe: capture an honest authentication
/// transcript, then replay the captured commands against a fresh
/// session of the same constant-nonce card. With broken nonces the
/// replay authenticates, which is exactly the finding this
/// configuration is expected to produce.
fn replay_probe(
    protocol: Protocol,
    target: &CampaignTarget,
    iteration: u32,
    rng: &mut Drbg,
) -> Option<Violation> {
    let mut card = target.template.clone();
    card.reset_session();
    card.set_rng(Drbg::constant(0x5A));

    let mut channel = intercepting_channel(loopback(card), Vec::new(), rng.fork());
    let mut term_rng = rng.fork();
    drive(protocol, &mut channel, target, &mut term_rng).ok()?;

    // Keep only the authentication prefix: everything up to and
    // including the final establishment step.
    let transcript: Vec<Vec<u8>> = channel
        .transcript()
        .iter()
        .map(|e| e.command.clone())
        .collect();
    let last_auth = transcript.iter().rposition(|cmd| {
        decode_command(cmd)
            .map(|c| {
                !sm::is_protected(c.cla)
                    && (c.ins == INS_EXTERNAL_AUTHENTICATE || c.ins == INS_GENERAL_AUTHENTICATE)
            })
            .unwrap_or(false)
    })?;

    // Fresh session on the same card; replay the captured commands.
    let mut card = match channel {
        InterceptingChannel { inner, .. } => inner,
    };
    card.card_mut().reset_session();
    let mut replay_ok = true;
    for cmd in &transcript[..=last_auth] {
        let response = card.card_mut().respond_bytes(cmd);
        let sw = u16::from_be_bytes([response[response.len() - 2], response[response.len() - 1]]);
        if sw != 0x9000 {
            replay_ok = false;
            break;
        }
    }
    if replay_ok {
        Some(Violation {
            iteration,
            mutation: Mutation::NonceConstant.name(),
            kind: ViolationKind::WeakRandomnessReplay,
            detail: "captured authentication transcript replayed successfully".into(),
        })
    } else {
        None
    }
}
