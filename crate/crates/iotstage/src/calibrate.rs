//! Channel calibration: RTT probing of real endpoints over UDP and robust
//! parameter estimation for feeding measurements back into scenarios.
//!
//! Probe wire format: 16-byte datagram, 8-byte big-endian sequence number
//! followed by an 8-byte random nonce; the far end must echo it verbatim.

use std::collections::BTreeMap;
use std::io;
use std::net::UdpSocket;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Estimated one-way channel parameters.
///
/// The one-way latency assumes a symmetric path (RTT/2); the `method`
/// string records the formulas and that assumption. Durations are
/// microsecond-granular so estimates merge losslessly into scenario files.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub latency_ns: u64,
    pub jitter_max_ns: u64,
    pub loss: f64,
    pub sample_count: usize,
    pub method: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct EstimateJson {
    latency_us: u64,
    jitter_max_us: u64,
    loss: f64,
    sample_count: usize,
    method: String,
}

impl ChannelEstimate {
    pub fn to_json(&self) -> String {
        let j = EstimateJson {
            latency_us: self.latency_ns / 1_000,
            jitter_max_us: self.jitter_max_ns / 1_000,
            loss: self.loss,
            sample_count: self.sample_count,
            method: self.method.clone(),
        };
        serde_json::to_string_pretty(&j).expect("estimate serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let j: EstimateJson = serde_json::from_str(text)?;
        Ok(ChannelEstimate {
            latency_ns: j.latency_us * 1_000,
            jitter_max_ns: j.jitter_max_us * 1_000,
            loss: j.loss,
            sample_count: j.sample_count,
            method: j.method,
        })
    }
}

pub const PROBE_LEN: usize = 16;

pub fn encode_probe(seq: u64, nonce: u64) -> [u8; PROBE_LEN] {
    let mut out = [0u8; PROBE_LEN];
    out[..8].copy_from_slice(&seq.to_be_bytes());
    out[8..].copy_from_slice(&nonce.to_be_bytes());
    out
}

/// Decodes an echoed probe datagram into (sequence, nonce). Anything that
/// is not exactly 16 bytes is rejected.
pub fn decode_probe(datagram: &[u8]) -> Option<(u64, u64)> {
    if datagram.len() != PROBE_LEN {
        return None;
    }
    let seq = u64::from_be_bytes(datagram[..8].try_into().unwrap());
    let nonce = u64::from_be_bytes(datagram[8..].try_into().unwrap());
    Some((seq, nonce))
}

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("socket error: {0}")]
    Socket(#[from] io::Error),
    /// Zero replies; distinct from a high-loss estimate.
    #[error("ESTIMATE_IMPOSSIBLE: no probe replies received")]
    EstimateImpossible,
    #[error("estimate requires at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    /// Matched round-trip times, nanoseconds, one per answered probe.
    pub rtts_ns: Vec<u64>,
    pub lost: usize,
}

/// Sends `k` probes at fixed spacing and collects matched replies.
/// Unmatched probes after the trailing timeout count as lost; duplicate
/// replies are counted once (nonce dedup).
pub fn probe(
    target: &str,
    k: usize,
    spacing: Duration,
    timeout: Duration,
) -> Result<ProbeOutcome, CalibrateError> {
    assert!(k >= 1);
    let socket = UdpSocket::bind("0.0.0.0:0")?;
    socket.connect(target)?;
    socket.set_read_timeout(Some(Duration::from_millis(2)))?;

    let mut sent_at: BTreeMap<u64, (u64, Instant)> = BTreeMap::new(); // seq -> (nonce, t)
    let mut rtts: BTreeMap<u64, u64> = BTreeMap::new(); // seq -> rtt ns
    let mut buf = [0u8; 64];

    let mut recv_pending = |sent_at: &BTreeMap<u64, (u64, Instant)>,
                            rtts: &mut BTreeMap<u64, u64>| {
        while let Ok(len) = socket.recv(&mut buf) {
            let now = Instant::now();
            if let Some((seq, nonce)) = decode_probe(&buf[..len]) {
                if let Some((expected_nonce, t0)) = sent_at.get(&seq) {
                    if *expected_nonce == nonce && !rtts.contains_key(&seq) {
                        rtts.insert(seq, now.duration_since(*t0).as_nanos() as u64);
                    }
                }
            }
        }
    };

    for seq in 0..k as u64 {
        let nonce: u64 = rand::random();
        let datagram = encode_probe(seq, nonce);
        let t0 = Instant::now();
        socket.send(&datagram)?;
        sent_at.insert(seq, (nonce, t0));
        let deadline = t0 + spacing;
        while Instant::now() < deadline {
            recv_pending(&sent_at, &mut rtts);
        }
    }
    // trailing collection window for stragglers
    let deadline = Instant::now() + timeout;
    while rtts.len() < k && Instant::now() < deadline {
        recv_pending(&sent_at, &mut rtts);
    }

    let rtts_ns: Vec<u64> = sent_at
        .keys()
        .filter_map(|seq| rtts.get(seq).copied())
        .collect();
    let lost = k - rtts_ns.len();
    Ok(ProbeOutcome { rtts_ns, lost })
}

fn median_ns(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

fn percentile_ns(sorted: &[u64], p: f64) -> u64 {
    // nearest-rank
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Robust channel estimate from RTT samples: one-way latency = median/2,
/// jitter_max = (P95 − min)/2, loss = lost / (lost + answered). Durations
/// are rounded to whole microseconds.
pub fn estimate(rtts_ns: &[u64], lost: usize) -> Result<ChannelEstimate, CalibrateError> {
    if rtts_ns.is_empty() {
        return Err(if lost > 0 {
            CalibrateError::EstimateImpossible
        } else {
            CalibrateError::NoSamples
        });
    }
    let mut sorted = rtts_ns.to_vec();
    sorted.sort_unstable();
    let latency_ns = median_ns(&sorted) / 2;
    let jitter_ns = (percentile_ns(&sorted, 0.95).saturating_sub(sorted[0])) / 2;
    let round_us = |ns: u64| (ns + 500) / 1_000 * 1_000;
    Ok(ChannelEstimate {
        latency_ns: round_us(latency_ns),
        jitter_max_ns: round_us(jitter_ns),
        loss: lost as f64 / (lost + rtts_ns.len()) as f64,
        sample_count: rtts_ns.len(),
        method: "latency=median(rtt)/2 jitter_max=(p95(rtt)-min(rtt))/2 \
                 loss=lost/total assuming symmetric path"
            .to_string(),
    })
}

/// Spawns a loopback UDP echo server; replies after `turnaround`. Returns
/// its address and a stop closure. Test and example harness support.
pub fn spawn_echo_server(
    turnaround: Duration,
) -> io::Result<(String, Box<dyn FnOnce() + Send>)> {
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;
    let socket = UdpSocket::bind("127.0.0.1:0")?;
    let addr = format!("127.0.0.1:{}", socket.local_addr()?.port());
    socket.set_read_timeout(Some(Duration::from_millis(20)))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = Arc::clone(&stop);
    let handle = std::thread::spawn(move || {
        let mut buf = [0u8; 65_536];
        while !stop2.load(Ordering::SeqCst) {
            match socket.recv_from(&mut buf) {
                Ok((len, from)) => {
                    if !turnaround.is_zero() {
                        std::thread::sleep(turnaround);
                    }
                    let _ = socket.send_to(&buf[..len], from);
                }
                Err(_) => continue,
            }
        }
    });
    let stopper = Box::new(move || {
        stop.store(true, Ordering::SeqCst);
        let _ = handle.join();
    });
    Ok((addr, stopper))
}
