//! The man-in-the-middle bridge: listens where a terminal expects a
//! card and forwards every frame verbatim to the real card, however far
//! away it is. The secure channel neither detects nor prevents this;
//! the countermeasure implemented here is round-trip-time distance
//! bounding over the challenge exchange.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::codec::{encode_command, CommandApdu};
use crate::transport::{frame, Channel, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Terminal-to-card traffic (commands).
    ToCard,
    /// Card-to-terminal traffic (responses).
    ToTerminal,
}

#[derive(Debug, Clone)]
pub struct ForwardLogEntry {
    pub direction: Direction,
    pub bytes: Vec<u8>,
    pub at_us: u64,
}

/// Handle to a running bridge. The forwarding log records every frame
/// in order, exactly once, and survives a disconnect of either side.
pub struct RelayBridge {
    addr: std::net::SocketAddr,
    log: Arc<Mutex<Vec<ForwardLogEntry>>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl RelayBridge {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn log_snapshot(&self) -> Vec<ForwardLogEntry> {
        self.log.lock().unwrap().clone()
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Render the forwarding log as stable text for audits.
    pub fn render_log(entries: &[ForwardLogEntry]) -> String {
        let mut out = String::from("relay_forwarding_log:\n");
        for (i, e) in entries.iter().enumerate() {
            let dir = match e.direction {
                Direction::ToCard => "to-card",
                Direction::ToTerminal => "to-terminal",
            };
            out.push_str(&format!("  {:04} {} {}\n", i, dir, hex::encode(&e.bytes)));
        }
        out
    }
}

impl Drop for RelayBridge {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Start forwarding between a terminal-facing listener and the channel
/// to the victim card. Frames pass through uninterpreted and
/// unmodified; the bridge never needs to understand what it relays.
pub fn run_bridge(
    mut card_side: Box<dyn Channel + Send>,
    listen: &str,
) -> Result<RelayBridge, TransportError> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let log = Arc::new(Mutex::new(Vec::new()));
    let stop = Arc::new(AtomicBool::new(false));
    let log_thread = Arc::clone(&log);
    let stop_thread = Arc::clone(&stop);
    let started = Instant::now();

    let thread = thread::spawn(move || {
        // One terminal at a time; one APDU in flight end to end.
        let mut stream = loop {
            if stop_thread.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, _)) => break stream,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2));
                }
                Err(_) => return,
            }
        };
        let _ = stream.set_nodelay(true);
        let _ = stream.set_read_timeout(Some(Duration::from_millis(25)));
        loop {
            if stop_thread.load(Ordering::SeqCst) {
                return;
            }
            let command = match read_frame_interruptible(&mut stream, &stop_thread) {
                Ok(Some(c)) => c,
                Ok(None) => return, // stop requested while idle
                Err(_) => return,   // terminal went away; keep the partial log
            };
            log_thread.lock().unwrap().push(ForwardLogEntry {
                direction: Direction::ToCard,
                bytes: command.clone(),
                at_us: started.elapsed().as_micros() as u64,
            });
            let (response, _) = match card_side.exchange(&command) {
                Ok(r) => r,
                Err(_) => return, // card side went away
            };
            log_thread.lock().unwrap().push(ForwardLogEntry {
                direction: Direction::ToTerminal,
                bytes: response.clone(),
                at_us: started.elapsed().as_micros() as u64,
            });
            if frame::write_frame(&mut stream, &response).is_err() {
                return;
            }
        }
    });

    Ok(RelayBridge { addr, log, stop, thread: Some(thread) })
}

/// Blocking frame read that yields to the stop flag while idle at a
/// frame boundary. Mid-frame reads press on: frames are small and
/// arrive whole in this half-duplex protocol.
fn read_frame_interruptible(
    stream: &mut std::net::TcpStream,
    stop: &AtomicBool,
) -> Result<Option<Vec<u8>>, TransportError> {
    use std::io::Read;
    let mut prefix = [0u8; 2];
    let mut filled = 0usize;
    while filled < 2 {
        if stop.load(Ordering::SeqCst) && filled == 0 {
            return Ok(None);
        }
        match stream.read(&mut prefix[filled..]) {
            Ok(0) => return Err(TransportError::Closed),
            Ok(n) => filled += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) => return Err(TransportError::Io(e)),
        }
    }
    let len = usize::from(u16::from_be_bytes(prefix));
    let mut payload = vec![0u8; len];
    let mut filled = 0usize;
    while filled < len {
        match stream.read(&mut payload[filled..]) {
            Ok(0) => return Err(TransportError::Closed),
            Ok(n) => filled += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                if stop.load(Ordering::SeqCst) {
                    return Ok(None);
                }
                continue;
            }
            Err(e) => return Err(TransportError::Io(e)),
        }
    }
    Ok(Some(payload))
}

/// Round-trip-time samples and their order statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RttStats {
    samples_us: Vec<u64>,
}

impl RttStats {
    pub fn from_samples(samples_us: Vec<u64>) -> RttStats {
        assert!(!samples_us.is_empty(), "statistics need at least one sample");
        RttStats { samples_us }
    }

    pub fn samples_us(&self) -> &[u64] {
        &self.samples_us
    }

    /// Standard order-statistic median; even counts average the two
    /// middle values.
    pub fn median_us(&self) -> u64 {
        let mut sorted = self.samples_us.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2
        }
    }

    pub fn min_us(&self) -> u64 {
        *self.samples_us.iter().min().unwrap()
    }

    pub fn max_us(&self) -> u64 {
        *self.samples_us.iter().max().unwrap()
    }
}

/// Issue `n` challenge requests and collect their round-trip times.
pub fn measure_rtt(channel: &mut dyn Channel, n: usize) -> Result<RttStats, TransportError> {
    assert!(n >= 1);
    let command = encode_command(&CommandApdu::new(0, 0x84, 0, 0).with_le(8));
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (_, rtt) = channel.exchange(&command)?;
        samples.push(rtt);
    }
    Ok(RttStats::from_samples(samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceVerdict {
    Pass,
    Flag,
}

/// Flag when the median exceeds the threshold; equality passes.
pub fn distance_bound_check(stats: &RttStats, threshold_ms: u64) -> DistanceVerdict {
    if stats.median_us() > threshold_ms * 1000 {
        DistanceVerdict::Flag
    } else {
        DistanceVerdict::Pass
    }
}
