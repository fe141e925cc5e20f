//! Network model on top of the event engine: wired links plus one
//! range-gated wireless channel whose connectivity is recomputed from entity
//! positions each co-simulation window.
//!
//! Connectivity is a boundary-inclusive unit disk. Receiver membership is
//! fixed at send time from the current position snapshot; deliveries already
//! scheduled are never revoked by later snapshots.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::engine::{Engine, EventKind};
use crate::mobility::Position;
use crate::scenario::{ChannelParams, ChannelSelector, Scenario};
use crate::time::SimTime;
use crate::trace::TraceRecord;

/// Fixed UDP/IP-like framing added to every payload.
pub const HEADER_OVERHEAD_BYTES: u64 = 28;

/// Minimum end-to-end delivery delay.
pub const MIN_DELIVERY_DELAY_NS: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Destination {
    Node(String),
    Broadcast,
}

impl Destination {
    pub fn label(&self) -> &str {
        match self {
            Destination::Node(id) => id,
            Destination::Broadcast => "broadcast",
        }
    }
}

/// An application message in flight.
#[derive(Debug, Clone)]
pub struct Packet {
    pub id: u64,
    pub src: String,
    pub dst: Destination,
    pub payload: Vec<u8>,
    pub size_bytes: u64,
    pub sent_at: SimTime,
    pub origin_stamp: Option<SimTime>,
    pub corrupted: bool,
}

#[derive(Debug, Clone)]
pub struct ChannelState {
    pub params: ChannelParams,
    pub enabled: bool,
    pub partition: Option<Vec<BTreeSet<String>>>,
}

impl ChannelState {
    fn new(params: ChannelParams) -> Self {
        ChannelState { params, enabled: true, partition: None }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("UNKNOWN_NODE: {0}")]
    UnknownNode(String),
    #[error("UNKNOWN_TARGET: {0}")]
    UnknownTarget(String),
    #[error("INCOMPLETE_SNAPSHOT: missing position for {0}")]
    IncompleteSnapshot(String),
}

/// Boundary-inclusive unit-disk reachability.
pub fn in_range(a: &Position, b: &Position, range_m: f64) -> bool {
    a.distance(b) <= range_m
}

/// Channel traversal time: propagation latency plus transmission time plus
/// uniform jitter, floored at 1 µs. No randomness is consumed when
/// `jitter_max` is zero.
pub fn delivery_delay(params: &ChannelParams, size_bytes: u64, engine: &mut Engine) -> u64 {
    let transmission_ns =
        (size_bytes as u128 * 8 * 1_000_000_000 / params.bandwidth_bps as u128) as u64;
    let jitter_ns = if params.jitter_max_ns > 0 {
        (engine.next_unit("jitter") * params.jitter_max_ns as f64) as u64
    } else {
        0
    };
    (params.latency_ns + transmission_ns + jitter_ns).max(MIN_DELIVERY_DELAY_NS)
}

#[derive(Debug, Clone, Copy)]
struct CorruptState {
    until: SimTime,
    probability: f64,
}

pub struct NetSim {
    wireless: Option<(f64, ChannelState)>,
    links: BTreeMap<(String, String), ChannelState>,
    node_ids: BTreeSet<String>,
    snapshot: BTreeMap<String, Position>,
    snapshot_version: u64,
    corrupt: Option<CorruptState>,
    next_packet_id: u64,
}

impl NetSim {
    pub fn new(scenario: &Scenario) -> Self {
        let links = scenario
            .links
            .iter()
            .map(|l| (l.key(), ChannelState::new(l.params)))
            .collect();
        NetSim {
            wireless: scenario
                .wireless
                .as_ref()
                .map(|w| (w.range_m, ChannelState::new(w.params))),
            links,
            node_ids: scenario.nodes.iter().map(|n| n.id.clone()).collect(),
            snapshot: BTreeMap::new(),
            snapshot_version: 0,
            corrupt: None,
            next_packet_id: 0,
        }
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot_version
    }

    pub fn position(&self, node: &str) -> Option<Position> {
        self.snapshot.get(node).copied()
    }

    /// Replaces the position snapshot used by subsequent sends. Called once
    /// per co-simulation window.
    pub fn refresh_connectivity(
        &mut self,
        snapshot: BTreeMap<String, Position>,
    ) -> Result<(), NetError> {
        for id in &self.node_ids {
            if !snapshot.contains_key(id) {
                return Err(NetError::IncompleteSnapshot(id.clone()));
            }
        }
        self.snapshot = snapshot;
        self.snapshot_version += 1;
        Ok(())
    }

    pub fn set_enabled(&mut self, sel: &ChannelSelector, enabled: bool) -> Result<(), NetError> {
        self.channel_mut(sel)?.enabled = enabled;
        Ok(())
    }

    pub fn set_partition(
        &mut self,
        sel: &ChannelSelector,
        groups: Option<Vec<BTreeSet<String>>>,
    ) -> Result<(), NetError> {
        self.channel_mut(sel)?.partition = groups;
        Ok(())
    }

    pub fn override_loss(&mut self, sel: &ChannelSelector, loss: f64) -> Result<(), NetError> {
        self.channel_mut(sel)?.params.loss = loss;
        Ok(())
    }

    pub fn override_latency(&mut self, sel: &ChannelSelector, ns: u64) -> Result<(), NetError> {
        self.channel_mut(sel)?.params.latency_ns = ns;
        Ok(())
    }

    pub fn set_corruption(&mut self, until: SimTime, probability: f64) {
        self.corrupt = Some(CorruptState { until, probability });
    }

    fn channel_mut(&mut self, sel: &ChannelSelector) -> Result<&mut ChannelState, NetError> {
        match sel {
            ChannelSelector::Wireless => self
                .wireless
                .as_mut()
                .map(|(_, c)| c)
                .ok_or_else(|| NetError::UnknownTarget("wireless".to_string())),
            ChannelSelector::Link(a, b) => {
                let key = if a <= b {
                    (a.clone(), b.clone())
                } else {
                    (b.clone(), a.clone())
                };
                self.links
                    .get_mut(&key)
                    .ok_or_else(|| NetError::UnknownTarget(format!("{a}<->{b}")))
            }
        }
    }

    /// Receiver set for a send from `src`, with the channel each receiver is
    /// reached over. Receivers are in ascending node-id order, which is also
    /// the RNG draw order.
    fn receivers(&self, src: &str, dst: &Destination) -> Vec<(String, ChannelRef)> {
        match dst {
            Destination::Broadcast => {
                let Some((range, _)) = &self.wireless else { return Vec::new() };
                let Some(src_pos) = self.snapshot.get(src) else { return Vec::new() };
                self.snapshot
                    .iter()
                    .filter(|(id, pos)| {
                        id.as_str() != src && in_range(src_pos, pos, *range)
                    })
                    .map(|(id, _)| (id.clone(), ChannelRef::Wireless))
                    .collect()
            }
            Destination::Node(dst_id) => {
                let key = if src <= dst_id.as_str() {
                    (src.to_string(), dst_id.clone())
                } else {
                    (dst_id.clone(), src.to_string())
                };
                if self.links.contains_key(&key) {
                    return vec![(dst_id.clone(), ChannelRef::Link(key))];
                }
                if let Some((range, _)) = &self.wireless {
                    if let (Some(a), Some(b)) =
                        (self.snapshot.get(src), self.snapshot.get(dst_id))
                    {
                        if in_range(a, b, *range) {
                            return vec![(dst_id.clone(), ChannelRef::Wireless)];
                        }
                    }
                }
                Vec::new()
            }
        }
    }

    /// Routes one message: writes the SEND record, applies per-receiver
    /// loss, partition, and link-state filtering, and schedules a delivery
    /// event per surviving receiver (independent jitter, ascending node-id
    /// order). Every non-delivered (receiver, packet) pair gets a DROP
    /// record with its reason.
    pub fn send(
        &mut self,
        engine: &mut Engine,
        src: &str,
        dst: Destination,
        payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) -> Result<u64, NetError> {
        if !self.node_ids.contains(src) {
            return Err(NetError::UnknownNode(src.to_string()));
        }
        if let Destination::Node(d) = &dst {
            if !self.node_ids.contains(d) {
                return Err(NetError::UnknownNode(d.clone()));
            }
        }
        let sent_at = engine.now();
        let packet_id = self.next_packet_id;
        self.next_packet_id += 1;
        let size_bytes = payload.len() as u64 + HEADER_OVERHEAD_BYTES;

        engine.record(
            TraceRecord::new(sent_at, "SEND", src)
                .attr("packet_id", packet_id)
                .attr("src", src)
                .attr("dst", dst.label())
                .attr("size_bytes", size_bytes)
                .attr("snap", self.snapshot_version),
        );

        let corrupt = self
            .corrupt
            .filter(|c| sent_at < c.until)
            .map(|c| c.probability);

        for (receiver, chan_ref) in self.receivers(src, &dst) {
            let state = match &chan_ref {
                ChannelRef::Wireless => &self.wireless.as_ref().unwrap().1,
                ChannelRef::Link(key) => &self.links[key],
            };
            let drop_reason = if !state.enabled {
                Some("DROP_LINKDOWN")
            } else if cross_partition(state.partition.as_deref(), src, &receiver) {
                Some("DROP_PARTITION")
            } else if state.params.loss > 0.0
                && engine.next_unit("loss") < state.params.loss
            {
                Some("DROP_LOSS")
            } else {
                None
            };
            if let Some(reason) = drop_reason {
                engine.record(
                    TraceRecord::new(sent_at, reason, &receiver)
                        .attr("packet_id", packet_id)
                        .attr("src", src)
                        .attr("dst", dst.label())
                        .attr("size_bytes", size_bytes),
                );
                continue;
            }
            let mut delivered_payload = payload.to_vec();
            let mut corrupted = false;
            if let Some(p) = corrupt {
                if !delivered_payload.is_empty() && engine.next_unit("corrupt") < p {
                    let idx = (engine.next_unit("corrupt_byte")
                        * delivered_payload.len() as f64) as usize;
                    let idx = idx.min(delivered_payload.len() - 1);
                    delivered_payload[idx] ^= 0xFF;
                    corrupted = true;
                }
            }
            let params = state.params;
            let delay = delivery_delay(&params, size_bytes, engine);
            let packet = Packet {
                id: packet_id,
                src: src.to_string(),
                dst: dst.clone(),
                payload: delivered_payload,
                size_bytes,
                sent_at,
                origin_stamp,
                corrupted,
            };
            engine
                .schedule(
                    sent_at + delay,
                    EventKind::PacketDelivery { packet, receiver: receiver.clone() },
                )
                .expect("delivery delay is nonnegative");
        }
        Ok(packet_id)
    }
}

enum ChannelRef {
    Wireless,
    Link((String, String)),
}

fn cross_partition(
    partition: Option<&[BTreeSet<String>]>,
    src: &str,
    dst: &str,
) -> bool {
    let Some(groups) = partition else { return false };
    let find = |id: &str| groups.iter().position(|g| g.contains(id));
    match (find(src), find(dst)) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    }
}
