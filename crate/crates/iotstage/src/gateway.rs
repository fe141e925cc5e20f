//! Hardware-in-the-loop gateway: bridges real external processes and
//! devices into the simulated network over UDP.
//!
//! Wire format: raw datagrams, payload passthrough, no framing. Inbound
//! datagrams become broadcast injection requests stamped at the next window
//! boundary; outbound deliveries are written verbatim to the endpoint's
//! peer address. The socket readers run on their own threads and talk to
//! the coordinator exclusively through an ordered FIFO queue.

use std::collections::BTreeMap;
use std::io;
use std::net::UdpSocket;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::scenario::ExternalSpec;

/// Largest payload a single UDP datagram can carry.
pub const MAX_DATAGRAM: usize = 65_507;

/// An inbound datagram waiting to be stamped into the simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    /// External node the datagram arrived for.
    pub src: String,
    pub payload: Vec<u8>,
    /// Set when the datagram exceeded [`MAX_DATAGRAM`]; the coordinator
    /// records a warning and drops it.
    pub oversize: bool,
}

/// Builds the injection request for one inbound datagram. The listen port
/// identifies the node; the sender's address does not matter.
pub fn make_injection(node: &str, datagram: &[u8]) -> Injection {
    Injection {
        src: node.to_string(),
        payload: datagram.to_vec(),
        oversize: datagram.len() > MAX_DATAGRAM,
    }
}

struct Endpoint {
    socket: UdpSocket,
    peer: String,
    datagrams_out: u64,
    reader: Option<JoinHandle<u64>>,
}

/// One UDP endpoint per external node; owns the sockets and reader threads
/// for the duration of a run.
pub struct Gateway {
    endpoints: BTreeMap<String, Endpoint>,
    stop: Arc<AtomicBool>,
}

impl Gateway {
    /// Binds every endpoint and starts its reader thread. Returns the
    /// gateway plus the FIFO queue the coordinator drains once per window.
    pub fn start(
        externals: &[(String, ExternalSpec)],
    ) -> io::Result<(Gateway, Receiver<Injection>)> {
        let (tx, rx) = std::sync::mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let mut endpoints = BTreeMap::new();
        for (node, spec) in externals {
            let socket = UdpSocket::bind(("127.0.0.1", spec.listen_port))?;
            let reader = spawn_reader(
                socket.try_clone()?,
                node.clone(),
                tx.clone(),
                Arc::clone(&stop),
            );
            endpoints.insert(
                node.clone(),
                Endpoint {
                    socket,
                    peer: spec.peer.clone(),
                    datagrams_out: 0,
                    reader: Some(reader),
                },
            );
        }
        Ok((Gateway { endpoints, stop }, rx))
    }

    pub fn has_endpoint(&self, node: &str) -> bool {
        self.endpoints.contains_key(node)
    }

    /// Writes a delivered packet's payload as one datagram to the node's
    /// peer. Socket failures are reported, not fatal.
    pub fn egress(&mut self, node: &str, payload: &[u8]) -> io::Result<()> {
        let ep = self
            .endpoints
            .get_mut(node)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no endpoint for {node}")))?;
        ep.socket.send_to(payload, &ep.peer)?;
        ep.datagrams_out += 1;
        Ok(())
    }

    pub fn datagrams_out(&self, node: &str) -> u64 {
        self.endpoints.get(node).map(|e| e.datagrams_out).unwrap_or(0)
    }

    /// Stops the reader threads and returns per-node inbound datagram
    /// counts.
    pub fn stop(mut self) -> BTreeMap<String, u64> {
        self.stop.store(true, Ordering::SeqCst);
        let mut stats = BTreeMap::new();
        for (node, ep) in self.endpoints.iter_mut() {
            if let Some(handle) = ep.reader.take() {
                let datagrams_in = handle.join().unwrap_or(0);
                stats.insert(node.clone(), datagrams_in);
            }
        }
        stats
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for ep in self.endpoints.values_mut() {
            if let Some(handle) = ep.reader.take() {
                let _ = handle.join();
            }
        }
    }
}

fn spawn_reader(
    socket: UdpSocket,
    node: String,
    tx: Sender<Injection>,
    stop: Arc<AtomicBool>,
) -> JoinHandle<u64> {
    socket
        .set_read_timeout(Some(Duration::from_millis(20)))
        .expect("read timeout is valid");
    std::thread::spawn(move || {
        let mut buf = vec![0u8; 65_536];
        let mut datagrams_in = 0u64;
        while !stop.load(Ordering::SeqCst) {
            match socket.recv_from(&mut buf) {
                Ok((len, _from)) => {
                    datagrams_in += 1;
                    if tx.send(make_injection(&node, &buf[..len])).is_err() {
                        break;
                    }
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut =>
                {
                    continue;
                }
                Err(_) => break,
            }
        }
        datagrams_in
    })
}
