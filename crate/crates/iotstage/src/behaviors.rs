//! Built-in behaviors: generic plumbing (echo, probe_sender, probe_sink)
//! and the level-crossing V2X reference application (train, crossing, car).
//!
//! Level-crossing message payloads are a 1-byte type tag followed by the
//! length-prefixed UTF-8 sender id. The origin stamp travels in the packet
//! field, not the payload.

use std::collections::BTreeMap;

use crate::mobility::{CommandKind, Position};
use crate::runtime::{Behavior, BehaviorRegistry, NodeCtx};
use crate::time::{SimTime, NS_PER_MS};

pub const MSG_APPROACH: u8 = 0x01;
pub const MSG_STOP: u8 = 0x02;
pub const MSG_GO: u8 = 0x03;
pub const MSG_PASSED: u8 = 0x04;

/// Encodes a level-crossing message: type tag + length-prefixed sender id.
pub fn encode_message(kind: u8, sender: &str) -> Vec<u8> {
    let id = sender.as_bytes();
    assert!(id.len() <= u8::MAX as usize, "sender id too long");
    let mut out = Vec::with_capacity(2 + id.len());
    out.push(kind);
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out
}

/// Decodes a level-crossing message into (type, sender id). Returns `None`
/// for anything malformed, including corrupted payloads.
pub fn decode_message(payload: &[u8]) -> Option<(u8, &str)> {
    let (&kind, rest) = payload.split_first()?;
    let (&len, rest) = rest.split_first()?;
    if rest.len() != len as usize {
        return None;
    }
    let sender = std::str::from_utf8(rest).ok()?;
    Some((kind, sender))
}

// ---------------------------------------------------------------------------
// Generic behaviors
// ---------------------------------------------------------------------------

/// Replies to every message with the same payload, forwarding the origin
/// stamp.
struct Echo;

impl Behavior for Echo {
    fn on_start(&mut self, _ctx: &mut NodeCtx) {}

    fn on_message(
        &mut self,
        ctx: &mut NodeCtx,
        from: &str,
        payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) {
        ctx.send(from, payload.to_vec(), origin_stamp);
    }
}

/// Periodically sends stamped probe packets to `dst`; records an RTT probe
/// sample for every stamped reply. Params: dst, period_ms (100), tag
/// ("rtt"), size (16).
struct ProbeSender {
    seq: u64,
}

const PROBE_TIMER: &str = "probe";

impl Behavior for ProbeSender {
    fn on_start(&mut self, ctx: &mut NodeCtx) {
        let period = ctx.param_u64("period_ms", 100) * NS_PER_MS;
        ctx.set_timer(PROBE_TIMER, period);
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, timer: &str) {
        if timer != PROBE_TIMER {
            return;
        }
        if let Some(dst) = ctx.param("dst").map(str::to_string) {
            let size = ctx.param_u64("size", 16).max(8) as usize;
            let mut payload = vec![0u8; size];
            payload[..8].copy_from_slice(&self.seq.to_be_bytes());
            self.seq += 1;
            let now = ctx.now();
            ctx.send(&dst, payload, Some(now));
        }
        let period = ctx.param_u64("period_ms", 100) * NS_PER_MS;
        ctx.set_timer(PROBE_TIMER, period);
    }

    fn on_message(
        &mut self,
        ctx: &mut NodeCtx,
        _from: &str,
        _payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) {
        if let Some(origin) = origin_stamp {
            let tag = ctx.param("tag").unwrap_or("rtt").to_string();
            ctx.record_probe(&tag, origin);
        }
    }
}

/// Records a one-way latency probe for every stamped message it receives.
/// Params: tag ("latency").
struct ProbeSink;

impl Behavior for ProbeSink {
    fn on_start(&mut self, _ctx: &mut NodeCtx) {}

    fn on_message(
        &mut self,
        ctx: &mut NodeCtx,
        _from: &str,
        _payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) {
        if let Some(origin) = origin_stamp {
            let tag = ctx.param("tag").unwrap_or("latency").to_string();
            ctx.record_probe(&tag, origin);
        }
    }
}

// ---------------------------------------------------------------------------
// Level-crossing reference application
// ---------------------------------------------------------------------------

/// While within the crossing's vicinity and not yet past it, broadcasts a
/// stamped APPROACH on every announce tick; broadcasts PASSED exactly once
/// after clearing the crossing.
///
/// Params: crossing_x (1000), crossing_y (0), vicinity (500), clearance
/// (50), period_ms (100).
struct Train {
    was_within_clearance: bool,
    passed: bool,
}

const ANNOUNCE_TIMER: &str = "announce";

impl Train {
    fn crossing(ctx: &NodeCtx) -> Position {
        Position::new(ctx.param_f64("crossing_x", 1000.0), ctx.param_f64("crossing_y", 0.0))
    }
}

impl Behavior for Train {
    fn on_start(&mut self, ctx: &mut NodeCtx) {
        let period = ctx.param_u64("period_ms", 100) * NS_PER_MS;
        ctx.set_timer(ANNOUNCE_TIMER, period);
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, timer: &str) {
        if timer != ANNOUNCE_TIMER {
            return;
        }
        let crossing = Self::crossing(ctx);
        let vicinity = ctx.param_f64("vicinity", 500.0);
        let clearance = ctx.param_f64("clearance", 50.0);
        let dist = ctx.my_position().distance(&crossing);

        if dist <= clearance {
            self.was_within_clearance = true;
        }
        if !self.passed && self.was_within_clearance && dist > clearance {
            self.passed = true;
            let msg = encode_message(MSG_PASSED, ctx.node_id());
            ctx.broadcast(msg, None);
        } else if !self.passed && dist <= vicinity {
            let msg = encode_message(MSG_APPROACH, ctx.node_id());
            let now = ctx.now();
            ctx.broadcast(msg, Some(now));
        }

        let period = ctx.param_u64("period_ms", 100) * NS_PER_MS;
        ctx.set_timer(ANNOUNCE_TIMER, period);
    }
}

/// Forwards every APPROACH as a STOP broadcast (carrying the original
/// origin stamp forward, no dedup) and every PASSED as a GO broadcast.
struct Crossing;

impl Behavior for Crossing {
    fn on_start(&mut self, _ctx: &mut NodeCtx) {}

    fn on_message(
        &mut self,
        ctx: &mut NodeCtx,
        _from: &str,
        payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) {
        match decode_message(payload) {
            Some((MSG_APPROACH, _)) => {
                let msg = encode_message(MSG_STOP, ctx.node_id());
                ctx.broadcast(msg, origin_stamp);
            }
            Some((MSG_PASSED, _)) => {
                let msg = encode_message(MSG_GO, ctx.node_id());
                ctx.broadcast(msg, None);
            }
            _ => {}
        }
    }
}

/// Stops its entity on the first STOP, records a system_latency probe for
/// every stamped STOP, and resumes on GO.
struct Car {
    stopped: bool,
}

impl Behavior for Car {
    fn on_start(&mut self, _ctx: &mut NodeCtx) {}

    fn on_message(
        &mut self,
        ctx: &mut NodeCtx,
        _from: &str,
        payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) {
        match decode_message(payload) {
            Some((MSG_STOP, _)) => {
                if let Some(origin) = origin_stamp {
                    ctx.record_probe("system_latency", origin);
                }
                if !self.stopped {
                    self.stopped = true;
                    ctx.command_entity(CommandKind::Stop, None);
                }
            }
            Some((MSG_GO, _)) => {
                if self.stopped {
                    self.stopped = false;
                    ctx.command_entity(CommandKind::Resume, None);
                }
            }
            _ => {}
        }
    }
}

pub fn register_builtins(reg: &mut BehaviorRegistry) {
    let ok = |r: Result<(), _>| r.expect("builtin names are unique");
    ok(reg.register("echo", Box::new(|_: &BTreeMap<String, String>| Box::new(Echo))));
    ok(reg.register("probe_sender", Box::new(|_| Box::new(ProbeSender { seq: 0 }))));
    ok(reg.register("probe_sink", Box::new(|_| Box::new(ProbeSink))));
    ok(reg.register(
        "train",
        Box::new(|_| Box::new(Train { was_within_clearance: false, passed: false })),
    ));
    ok(reg.register("crossing", Box::new(|_| Box::new(Crossing))));
    ok(reg.register("car", Box::new(|_| Box::new(Car { stopped: false }))));
}
