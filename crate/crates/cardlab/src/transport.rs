//! Channel abstraction between terminal and card: in-process loopback,
//! a length-prefixed TCP transport, and a latency-injecting wrapper.
//! Every exchange is strictly request/response and reports its
//! round-trip time in microseconds.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::card::VirtualCard;
use crate::cryptokit::Drbg;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame payload exceeds 65535 bytes")]
    FrameTooLarge,
    #[error("connection closed")]
    Closed,
}

/// A reliable byte channel carrying one command APDU per exchange.
pub trait Channel {
    /// Send a command, await the response, and report the round trip in
    /// microseconds.
    fn exchange(&mut self, command: &[u8]) -> Result<(Vec<u8>, u64), TransportError>;
}

fn elapsed_micros(start: Instant) -> u64 {
    // Round up so even the fastest in-process exchange reports nonzero.
    let nanos = start.elapsed().as_nanos();
    nanos.div_ceil(1000).max(1) as u64
}

/// Direct in-process binding to a card.
pub struct Loopback {
    card: VirtualCard,
}

/// Wrap a card in a channel that feeds it directly.
pub fn loopback(card: VirtualCard) -> Loopback {
    Loopback { card }
}

impl Loopback {
    pub fn card(&self) -> &VirtualCard {
        &self.card
    }

    pub fn card_mut(&mut self) -> &mut VirtualCard {
        &mut self.card
    }
}

impl Channel for Loopback {
    fn exchange(&mut self, command: &[u8]) -> Result<(Vec<u8>, u64), TransportError> {
        let start = Instant::now();
        let response = self.card.respond_bytes(command);
        Ok((response, elapsed_micros(start)))
    }
}

/// Frame layer: two-byte big-endian length prefix, then the payload.
pub mod frame {
    use super::*;

    pub fn write_frame(writer: &mut impl Write, payload: &[u8]) -> Result<(), TransportError> {
        if payload.len() > 0xFFFF {
            return Err(TransportError::FrameTooLarge);
        }
        writer.write_all(&(payload.len() as u16).to_be_bytes())?;
        writer.write_all(payload)?;
        writer.flush()?;
        Ok(())
    }

    pub fn read_frame(reader: &mut impl Read) -> Result<Vec<u8>, TransportError> {
        let mut prefix = [0u8; 2];
        reader.read_exact(&mut prefix)?;
        let len = usize::from(u16::from_be_bytes(prefix));
        let mut payload = vec![0u8; len];
        reader.read_exact(&mut payload)?;
        Ok(payload)
    }
}

/// Client side of the socket transport.
pub struct SocketChannel {
    stream: TcpStream,
}

pub fn connect(endpoint: impl ToSocketAddrs) -> Result<SocketChannel, TransportError> {
    let stream = TcpStream::connect(endpoint)?;
    stream.set_nodelay(true)?;
    Ok(SocketChannel { stream })
}

impl Channel for SocketChannel {
    fn exchange(&mut self, command: &[u8]) -> Result<(Vec<u8>, u64), TransportError> {
        let start = Instant::now();
        frame::write_frame(&mut self.stream, command)?;
        let response = frame::read_frame(&mut self.stream)?;
        Ok((response, elapsed_micros(start)))
    }
}

/// Running card server. Each accepted connection gets its own clone of
/// the card with fresh session state, as if the holder re-presented the
/// document; connections are served concurrently, each one strictly
/// sequentially.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

pub fn serve(card: VirtualCard, endpoint: impl ToSocketAddrs) -> Result<ServerHandle, TransportError> {
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let thread = thread::spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _peer)) => {
                    let mut session_card = card.clone();
                    session_card.reset_session();
                    thread::spawn(move || serve_connection(stream, &mut session_card));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

fn serve_connection(mut stream: TcpStream, card: &mut VirtualCard) {
    let _ = stream.set_nodelay(true);
    loop {
        let command = match frame::read_frame(&mut stream) {
            Ok(bytes) => bytes,
            // Malformed or torn-down connection: drop it, the server
            // keeps accepting others.
            Err(_) => return,
        };
        let response = card.respond_bytes(&command);
        if frame::write_frame(&mut stream, &response).is_err() {
            return;
        }
    }
}

/// Adds a fixed delay plus seeded uniform jitter to every exchange; the
/// bytes pass through untouched.
pub struct LatencyChannel<C> {
    inner: C,
    delay_ms: u64,
    jitter_ms: u64,
    rng: Drbg,
    applied_us: Vec<u64>,
}

pub fn with_latency<C: Channel>(inner: C, delay_ms: u64, jitter_ms: u64, rng: Drbg) -> LatencyChannel<C> {
    LatencyChannel { inner, delay_ms, jitter_ms, rng, applied_us: Vec::new() }
}

impl<C> LatencyChannel<C> {
    /// Injected delays so far, for reproducibility checks.
    pub fn applied_us(&self) -> &[u64] {
        &self.applied_us
    }
}

impl<C: Channel> Channel for LatencyChannel<C> {
    fn exchange(&mut self, command: &[u8]) -> Result<(Vec<u8>, u64), TransportError> {
        let jitter_us = if self.jitter_ms == 0 {
            0
        } else {
            self.rng.below(self.jitter_ms * 1000 + 1)
        };
        let extra_us = self.delay_ms * 1000 + jitter_us;
        self.applied_us.push(extra_us);
        thread::sleep(Duration::from_micros(extra_us));
        let (response, rtt) = self.inner.exchange(command)?;
        Ok((response, rtt + extra_us))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_command, CommandApdu};
    use crate::testutil::lab_setup;

    fn get_challenge_bytes() -> Vec<u8> {
        encode_command(&CommandApdu::new(0, 0x84, 0, 0).with_le(8))
    }

    #[test]
    fn loopback_matches_direct_invocation() {
        let setup = lab_setup(30);
        let mut direct = setup.card.clone();
        let mut channel = loopback(setup.card);
        let mut rng = Drbg::from_seed(555);
        for _ in 0..1000 {
            let n = rng.below(24) as usize;
            let bytes = rng.bytes(n);
            let (via_channel, rtt) = channel.exchange(&bytes).unwrap();
            assert_eq!(via_channel, direct.respond_bytes(&bytes));
            assert!(rtt > 0);
        }
    }

    #[test]
    fn frame_roundtrip_and_bounds() {
        let mut buf = Vec::new();
        frame::write_frame(&mut buf, &[0xAB; 1000]).unwrap();
        assert_eq!(&buf[..2], &[0x03, 0xE8]);
        let read = frame::read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(read, vec![0xAB; 1000]);

        let mut big = Vec::new();
        frame::write_frame(&mut big, &vec![0u8; 65535]).unwrap();
        assert_eq!(frame::read_frame(&mut big.as_slice()).unwrap().len(), 65535);
        assert!(matches!(
            frame::write_frame(&mut Vec::new(), &vec![0u8; 65536]),
            Err(TransportError::FrameTooLarge)
        ));
    }

    #[test]
    fn socket_serves_and_survives_malformed_frames() {
        let setup = lab_setup(31);
        let server = serve(setup.card, "127.0.0.1:0").unwrap();

        // A client that lies about its frame length and hangs up.
        {
            let mut broken = TcpStream::connect(server.addr()).unwrap();
            broken.write_all(&[0x00, 0x0A, 0x01, 0x02, 0x03]).unwrap();
            drop(broken);
        }

        // The next client is served normally.
        let mut channel = connect(server.addr()).unwrap();
        let (resp, _) = channel.exchange(&get_challenge_bytes()).unwrap();
        assert_eq!(resp.len(), 10);
        assert_eq!(&resp[8..], &[0x90, 0x00]);
        server.stop();
    }

    #[test]
    fn fresh_security_state_per_connection() {
        let setup = lab_setup(32);
        let server = serve(setup.card, "127.0.0.1:0").unwrap();
        let mut c1 = connect(server.addr()).unwrap();
        let (r1, _) = c1.exchange(&get_challenge_bytes()).unwrap();
        let mut c2 = connect(server.addr()).unwrap();
        let (r2, _) = c2.exchange(&get_challenge_bytes()).unwrap();
        // Both connections answer from the same reloaded card state, so
        // their challenge streams coincide: separate instances.
        assert_eq!(r1, r2);
        server.stop();
    }

    #[test]
    fn ordering_preserved_within_connection() {
        let setup = lab_setup(33);
        let mut direct = setup.card.clone();
        let server = serve(setup.card, "127.0.0.1:0").unwrap();
        let mut channel = connect(server.addr()).unwrap();
        // Tag each command by length so responses are distinguishable.
        let mut expected = Vec::new();
        let mut got = Vec::new();
        for i in 0..20u8 {
            let cmd = encode_command(&CommandApdu::new(0, 0x84, 0, i).with_le(8));
            expected.push(direct.respond_bytes(&cmd));
            got.push(channel.exchange(&cmd).unwrap().0);
        }
        assert_eq!(expected, got);
        server.stop();
    }

    #[test]
    fn latency_wrapper_bounds_and_reproducibility() {
        let setup = lab_setup(34);
        let mut plain = loopback(setup.card.clone());
        let (_, base_rtt) = plain.exchange(&get_challenge_bytes()).unwrap();
        assert!(base_rtt > 0);

        let mut delayed = with_latency(loopback(setup.card.clone()), 30, 5, Drbg::from_seed(9));
        for _ in 0..3 {
            let (_, rtt) = delayed.exchange(&get_challenge_bytes()).unwrap();
            assert!(rtt >= 30_000, "rtt {rtt} under injected floor");
        }

        let mut again = with_latency(loopback(setup.card), 30, 5, Drbg::from_seed(9));
        for _ in 0..3 {
            again.exchange(&get_challenge_bytes()).unwrap();
        }
        assert_eq!(delayed.applied_us(), again.applied_us());
    }
}
