//! Hosts application behaviors on virtual nodes: event-driven callbacks,
//! timers, message I/O, entity commands, and per-node processing delay.
//!
//! Callbacks run in zero simulated time on the coordinator thread. A
//! callback never touches the world directly; it records actions on its
//! [`NodeCtx`], which the coordinator applies in issuance order after the
//! callback returns.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::mobility::{CommandKind, EntityCommand, Position};
use crate::time::SimTime;

/// Application logic hosted on a virtual node.
///
/// Callbacks must terminate without blocking and may use wall-clock time
/// only through `ctx.now()`.
pub trait Behavior {
    fn on_start(&mut self, ctx: &mut NodeCtx);

    fn on_message(
        &mut self,
        ctx: &mut NodeCtx,
        from: &str,
        payload: &[u8],
        origin_stamp: Option<SimTime>,
    ) {
        let _ = (ctx, from, payload, origin_stamp);
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx, timer: &str) {
        let _ = (ctx, timer);
    }

    /// Optional hook for injected behavior/state faults.
    fn on_fault(&mut self, ctx: &mut NodeCtx, params: &BTreeMap<String, String>) {
        let _ = (ctx, params);
    }
}

/// An effect requested by a behavior callback, applied by the coordinator
/// in issuance order.
#[derive(Debug, Clone)]
pub enum Action {
    Send {
        /// `None` means broadcast.
        dst: Option<String>,
        payload: Vec<u8>,
        origin_stamp: Option<SimTime>,
    },
    SetTimer { timer: String, delay_ns: u64 },
    CancelTimer { timer: String },
    CommandEntity(EntityCommand),
    RecordProbe { tag: String, origin_stamp: SimTime },
}

/// The services visible to one behavior callback.
pub struct NodeCtx<'a> {
    now: SimTime,
    node_id: &'a str,
    position: Option<Position>,
    entity: Option<&'a str>,
    params: &'a BTreeMap<String, String>,
    pub(crate) actions: Vec<Action>,
}

impl<'a> NodeCtx<'a> {
    pub fn new(
        now: SimTime,
        node_id: &'a str,
        position: Option<Position>,
        entity: Option<&'a str>,
        params: &'a BTreeMap<String, String>,
    ) -> Self {
        NodeCtx { now, node_id, position, entity, params, actions: Vec::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn node_id(&self) -> &str {
        self.node_id
    }

    /// Current position of this node, from the window's snapshot.
    pub fn my_position(&self) -> Position {
        self.position
            .expect("behavior node always has a position source")
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn param_f64(&self, key: &str, default: f64) -> f64 {
        self.param(key).and_then(|v| v.parse().ok()).unwrap_or(default)
    }

    pub fn param_u64(&self, key: &str, default: u64) -> u64 {
        self.param(key).and_then(|v| v.parse().ok()).unwrap_or(default)
    }

    /// Unicast; enqueued at `now + processing_delay` of this node.
    pub fn send(&mut self, dst: &str, payload: Vec<u8>, origin_stamp: Option<SimTime>) {
        self.actions.push(Action::Send { dst: Some(dst.to_string()), payload, origin_stamp });
    }

    /// Broadcast on the wireless channel.
    pub fn broadcast(&mut self, payload: Vec<u8>, origin_stamp: Option<SimTime>) {
        self.actions.push(Action::Send { dst: None, payload, origin_stamp });
    }

    pub fn set_timer(&mut self, timer: &str, delay_ns: u64) {
        assert!(delay_ns > 0, "timer delay must be positive");
        self.actions.push(Action::SetTimer { timer: timer.to_string(), delay_ns });
    }

    pub fn cancel_timer(&mut self, timer: &str) {
        self.actions.push(Action::CancelTimer { timer: timer.to_string() });
    }

    /// Commands the entity this node is bound to. Takes effect at the next
    /// window boundary, last-wins per entity.
    pub fn command_entity(&mut self, kind: CommandKind, value_mps: Option<f64>) {
        let Some(entity) = self.entity else {
            // no bound entity; the coordinator records a warning
            self.actions.push(Action::CommandEntity(EntityCommand {
                entity: String::new(),
                kind,
                value_mps,
                issued_at: self.now,
            }));
            return;
        };
        self.actions.push(Action::CommandEntity(EntityCommand {
            entity: entity.to_string(),
            kind,
            value_mps,
            issued_at: self.now,
        }));
    }

    pub fn record_probe(&mut self, tag: &str, origin_stamp: SimTime) {
        self.actions.push(Action::RecordProbe { tag: tag.to_string(), origin_stamp });
    }
}

pub type BehaviorFactory = Box<dyn Fn(&BTreeMap<String, String>) -> Box<dyn Behavior>>;

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("DUPLICATE_BEHAVIOR: {0}")]
    DuplicateBehavior(String),
    #[error("UNKNOWN_BEHAVIOR: {0}")]
    UnknownBehavior(String),
}

/// Maps behavior names from scenario files to constructors.
pub struct BehaviorRegistry {
    factories: BTreeMap<String, BehaviorFactory>,
}

impl fmt::Debug for BehaviorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BehaviorRegistry")
            .field("names", &self.names())
            .finish()
    }
}

impl BehaviorRegistry {
    pub fn empty() -> Self {
        BehaviorRegistry { factories: BTreeMap::new() }
    }

    /// Registry with all built-in behaviors pre-registered.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        crate::behaviors::register_builtins(&mut reg);
        reg
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: BehaviorFactory,
    ) -> Result<(), RegistryError> {
        if self.factories.contains_key(name) {
            return Err(RegistryError::DuplicateBehavior(name.to_string()));
        }
        self.factories.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> std::collections::BTreeSet<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn instantiate(
        &self,
        name: &str,
        params: &BTreeMap<String, String>,
    ) -> Result<Box<dyn Behavior>, RegistryError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| RegistryError::UnknownBehavior(name.to_string()))?;
        Ok(factory(params))
    }
}
