//! Declarative scenario description: parsing, validation, serialization,
//! and calibration merge.
//!
//! The on-disk format is a UTF-8 JSON document. Durations are integer
//! milliseconds unless the key carries a `_us` suffix; internally everything
//! is nanoseconds. Positions are `[x, y]` arrays of meters. Unknown fields
//! are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::ChannelEstimate;
use crate::mobility::Position;
use crate::time::NS_PER_MS;

/// Execution mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// As fast as possible, no wall-clock pacing.
    Fast,
    /// Paced so simulated time tracks wall-clock time (rtf = 1).
    Realtime,
    /// Paced by an explicit real-time factor.
    Scaled,
}

/// Shared numeric parameters of a communication channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub latency_ns: u64,
    pub bandwidth_bps: u64,
    pub jitter_max_ns: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WirelessSpec {
    pub range_m: f64,
    pub params: ChannelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub params: ChannelParams,
}

impl LinkSpec {
    /// Unordered pair key, lexicographically sorted.
    pub fn key(&self) -> (String, String) {
        if self.a <= self.b {
            (self.a.clone(), self.b.clone())
        } else {
            (self.b.clone(), self.a.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSpec {
    pub listen_port: u16,
    pub peer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub behavior: Option<String>,
    pub params: BTreeMap<String, String>,
    pub position: Option<Position>,
    pub entity: Option<String>,
    pub processing_delay_ns: u64,
    pub external: Option<ExternalSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntitySpec {
    pub id: String,
    pub route: Vec<Position>,
    pub speed_mps: f64,
}

/// Names either the shared wireless channel or one wired link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSelector {
    Wireless,
    Link(String, String),
}

impl fmt::Display for ChannelSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelSelector::Wireless => write!(f, "wireless"),
            ChannelSelector::Link(a, b) => write!(f, "link {a}<->{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultKind {
    NodeCrash { node: String },
    NodeRestart { node: String },
    LinkDown { channel: ChannelSelector },
    LinkUp { channel: ChannelSelector },
    Partition { channel: ChannelSelector, groups: Vec<Vec<String>> },
    PartitionHeal { channel: ChannelSelector },
    LossOverride { channel: ChannelSelector, loss: f64 },
    LatencyOverride { channel: ChannelSelector, latency_ns: u64 },
    MessageCorrupt { probability: f64, duration_ns: u64 },
    EntitySpeedOverride { entity: String, speed_mps: f64 },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::NodeCrash { .. } => "node_crash",
            FaultKind::NodeRestart { .. } => "node_restart",
            FaultKind::LinkDown { .. } => "link_down",
            FaultKind::LinkUp { .. } => "link_up",
            FaultKind::Partition { .. } => "partition",
            FaultKind::PartitionHeal { .. } => "partition_heal",
            FaultKind::LossOverride { .. } => "loss_override",
            FaultKind::LatencyOverride { .. } => "latency_override",
            FaultKind::MessageCorrupt { .. } => "message_corrupt",
            FaultKind::EntitySpeedOverride { .. } => "entity_speed_override",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub at_ns: u64,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub tag: String,
}

/// Complete description of one staging environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration_ns: u64,
    pub step_ns: u64,
    pub seed: u64,
    pub mode: Mode,
    pub rtf: f64,
    pub wireless: Option<WirelessSpec>,
    pub links: Vec<LinkSpec>,
    pub nodes: Vec<NodeSpec>,
    pub mobility: Vec<EntitySpec>,
    pub faults: Vec<FaultSpec>,
    pub probes: Vec<ProbeSpec>,
}

pub const DEFAULT_STEP_NS: u64 = 100 * NS_PER_MS;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{0}")]
    Syntax(String),
    #[error("{0}")]
    Semantic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCode {
    DuplicateNodeId,
    DuplicateEntityId,
    DuplicateLink,
    DuplicateProbeTag,
    NonpositiveDuration,
    NonpositiveStep,
    StepExceedsDuration,
    RtfInvalid,
    InvalidChannel,
    LinkSelfLoop,
    UnknownNode,
    NodePositionConflict,
    UnknownEntity,
    ExternalRequiresRealtime,
    ExternalWithBehavior,
    MissingBehavior,
    UnknownBehavior,
    RouteTooShort,
    NegativeSpeed,
    FaultAtEnd,
    RestartWithoutCrash,
    PartitionGroupsOverlap,
    UnknownTarget,
    FaultInvalidParam,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationCode::DuplicateNodeId => "DUPLICATE_NODE_ID",
            ViolationCode::DuplicateEntityId => "DUPLICATE_ENTITY_ID",
            ViolationCode::DuplicateLink => "DUPLICATE_LINK",
            ViolationCode::DuplicateProbeTag => "DUPLICATE_PROBE_TAG",
            ViolationCode::NonpositiveDuration => "NONPOSITIVE_DURATION",
            ViolationCode::NonpositiveStep => "NONPOSITIVE_STEP",
            ViolationCode::StepExceedsDuration => "STEP_EXCEEDS_DURATION",
            ViolationCode::RtfInvalid => "RTF_INVALID",
            ViolationCode::InvalidChannel => "INVALID_CHANNEL",
            ViolationCode::LinkSelfLoop => "LINK_SELF_LOOP",
            ViolationCode::UnknownNode => "UNKNOWN_NODE",
            ViolationCode::NodePositionConflict => "NODE_POSITION_CONFLICT",
            ViolationCode::UnknownEntity => "UNKNOWN_ENTITY",
            ViolationCode::ExternalRequiresRealtime => "EXTERNAL_REQUIRES_REALTIME",
            ViolationCode::ExternalWithBehavior => "EXTERNAL_WITH_BEHAVIOR",
            ViolationCode::MissingBehavior => "MISSING_BEHAVIOR",
            ViolationCode::UnknownBehavior => "UNKNOWN_BEHAVIOR",
            ViolationCode::RouteTooShort => "ROUTE_TOO_SHORT",
            ViolationCode::NegativeSpeed => "NEGATIVE_SPEED",
            ViolationCode::FaultAtEnd => "FAULT_AT_END",
            ViolationCode::RestartWithoutCrash => "RESTART_WITHOUT_CRASH",
            ViolationCode::PartitionGroupsOverlap => "PARTITION_GROUPS_OVERLAP",
            ViolationCode::UnknownTarget => "UNKNOWN_TARGET",
            ViolationCode::FaultInvalidParam => "FAULT_INVALID_PARAM",
        };
        f.write_str(s)
    }
}

/// One broken scenario invariant; violations are values, not errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub code: ViolationCode,
    pub path: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.code, self.path)
    }
}

// ---------------------------------------------------------------------------
// File-format representation
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    step_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    step_us: Option<u64>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rtf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wireless: Option<WirelessFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    links: Vec<LinkFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<NodeFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    mobility: Vec<EntityFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    faults: Vec<FaultFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    probes: Vec<ProbeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WirelessFile {
    range: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_us: Option<u64>,
    bandwidth_bps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    jitter_max_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jitter_max_us: Option<u64>,
    #[serde(default)]
    loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    a: String,
    b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_us: Option<u64>,
    bandwidth_bps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    jitter_max_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jitter_max_us: Option<u64>,
    #[serde(default)]
    loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    behavior: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    processing_delay_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    processing_delay_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    external: Option<ExternalFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalFile {
    listen_port: u16,
    peer: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityFile {
    id: String,
    route: Vec<[f64; 2]>,
    speed: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFile {
    tag: String,
}

/// On-disk channel selector: the string `"wireless"` or a two-element
/// node-id array.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ChannelSelFile {
    Name(String),
    Pair([String; 2]),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    at_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    at_us: Option<u64>,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    node: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channel: Option<ChannelSelFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<Vec<String>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    speed: Option<f64>,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Resolves a duration given as `<key>_ms` / `<key>_us` alternatives.
fn duration_ns(
    field: &str,
    ms: Option<u64>,
    us: Option<u64>,
    default_ns: Option<u64>,
) -> Result<u64, ParseError> {
    match (ms, us) {
        (Some(_), Some(_)) => Err(ParseError::Semantic(format!(
            "field {field} given both in _ms and _us"
        ))),
        (Some(v), None) => Ok(v * 1_000_000),
        (None, Some(v)) => Ok(v * 1_000),
        (None, None) => default_ns.ok_or_else(|| {
            ParseError::Semantic(format!("missing required field: {field}_ms"))
        }),
    }
}

fn channel_params(
    field: &str,
    latency_ms: Option<u64>,
    latency_us: Option<u64>,
    bandwidth_bps: u64,
    jitter_ms: Option<u64>,
    jitter_us: Option<u64>,
    loss: f64,
) -> Result<ChannelParams, ParseError> {
    Ok(ChannelParams {
        latency_ns: duration_ns(&format!("{field}.latency"), latency_ms, latency_us, None)?,
        bandwidth_bps,
        jitter_max_ns: duration_ns(
            &format!("{field}.jitter_max"),
            jitter_ms,
            jitter_us,
            Some(0),
        )?,
        loss,
    })
}

fn channel_selector(field: &str, sel: Option<ChannelSelFile>) -> Result<ChannelSelector, ParseError> {
    match sel {
        Some(ChannelSelFile::Name(s)) if s == "wireless" => Ok(ChannelSelector::Wireless),
        Some(ChannelSelFile::Name(s)) => Err(ParseError::Semantic(format!(
            "{field}: unknown channel name '{s}' (expected \"wireless\" or [a, b])"
        ))),
        Some(ChannelSelFile::Pair([a, b])) => Ok(ChannelSelector::Link(a, b)),
        None => Err(ParseError::Semantic(format!(
            "missing required field: {field}"
        ))),
    }
}

fn fault_kind(f: &FaultFile, idx: usize) -> Result<FaultKind, ParseError> {
    let at = format!("faults[{idx}]");
    let need_node = || {
        f.node
            .clone()
            .ok_or_else(|| ParseError::Semantic(format!("missing required field: {at}.node")))
    };
    let need_entity = || {
        f.entity
            .clone()
            .ok_or_else(|| ParseError::Semantic(format!("missing required field: {at}.entity")))
    };
    let channel = |sel: &Option<ChannelSelFile>| {
        let cloned = match sel {
            Some(ChannelSelFile::Name(s)) => Some(ChannelSelFile::Name(s.clone())),
            Some(ChannelSelFile::Pair(p)) => Some(ChannelSelFile::Pair(p.clone())),
            None => None,
        };
        channel_selector(&format!("{at}.channel"), cloned)
    };
    match f.kind.as_str() {
        "node_crash" => Ok(FaultKind::NodeCrash { node: need_node()? }),
        "node_restart" => Ok(FaultKind::NodeRestart { node: need_node()? }),
        "link_down" => Ok(FaultKind::LinkDown { channel: channel(&f.channel)? }),
        "link_up" => Ok(FaultKind::LinkUp { channel: channel(&f.channel)? }),
        "partition" => Ok(FaultKind::Partition {
            channel: channel(&f.channel)?,
            groups: f.groups.clone().ok_or_else(|| {
                ParseError::Semantic(format!("missing required field: {at}.groups"))
            })?,
        }),
        "partition_heal" => Ok(FaultKind::PartitionHeal { channel: channel(&f.channel)? }),
        "loss_override" => Ok(FaultKind::LossOverride {
            channel: channel(&f.channel)?,
            loss: f.loss.ok_or_else(|| {
                ParseError::Semantic(format!("missing required field: {at}.loss"))
            })?,
        }),
        "latency_override" => Ok(FaultKind::LatencyOverride {
            channel: channel(&f.channel)?,
            latency_ns: duration_ns(&format!("{at}.latency"), f.latency_ms, f.latency_us, None)?,
        }),
        "message_corrupt" => Ok(FaultKind::MessageCorrupt {
            probability: f.probability.ok_or_else(|| {
                ParseError::Semantic(format!("missing required field: {at}.probability"))
            })?,
            duration_ns: duration_ns(&format!("{at}.duration"), f.duration_ms, f.duration_us, None)?,
        }),
        "entity_speed_override" => Ok(FaultKind::EntitySpeedOverride {
            entity: need_entity()?,
            speed_mps: f.speed.ok_or_else(|| {
                ParseError::Semantic(format!("missing required field: {at}.speed"))
            })?,
        }),
        other => Err(ParseError::Semantic(format!(
            "{at}: unknown fault kind '{other}'"
        ))),
    }
}

/// Rewrites the most common serde messages into the format this crate's
/// diagnostics use, keeping serde's position annotation.
fn rewrite_serde_msg(msg: &str) -> String {
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            let (field, tail) = rest.split_at(end);
            return format!("missing required field: {}{}", field, &tail[1..]);
        }
    }
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            let (field, tail) = rest.split_at(end);
            return format!("unknown field: {}{}", field, &tail[1..]);
        }
    }
    msg.to_string()
}

/// Parses a scenario document and applies defaults (step 100 ms, mode fast,
/// processing_delay 0). Structural problems are errors; invariant checks
/// live in [`validate`].
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let file: ScenarioFile = serde_json::from_str(text)
        .map_err(|e| ParseError::Syntax(rewrite_serde_msg(&e.to_string())))?;
    scenario_from_file(file)
}

fn scenario_from_file(file: ScenarioFile) -> Result<Scenario, ParseError> {
    let total_ns = duration_ns("duration", file.duration_ms, file.duration_us, None)?;
    let step_ns = duration_ns_or_default(file.step_ms, file.step_us)?;
    let wireless = match file.wireless {
        Some(w) => Some(WirelessSpec {
            range_m: w.range,
            params: channel_params(
                "wireless",
                w.latency_ms,
                w.latency_us,
                w.bandwidth_bps,
                w.jitter_max_ms,
                w.jitter_max_us,
                w.loss,
            )?,
        }),
        None => None,
    };
    let links = file
        .links
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(LinkSpec {
                params: channel_params(
                    &format!("links[{i}]"),
                    l.latency_ms,
                    l.latency_us,
                    l.bandwidth_bps,
                    l.jitter_max_ms,
                    l.jitter_max_us,
                    l.loss,
                )?,
                a: l.a,
                b: l.b,
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    let nodes = file
        .nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            Ok(NodeSpec {
                processing_delay_ns: duration_ns(
                    &format!("nodes[{i}].processing_delay"),
                    n.processing_delay_ms,
                    n.processing_delay_us,
                    Some(0),
                )?,
                id: n.id,
                behavior: n.behavior,
                params: n.params,
                position: n.position.map(|[x, y]| Position { x, y }),
                entity: n.entity,
                external: n.external.map(|e| ExternalSpec {
                    listen_port: e.listen_port,
                    peer: e.peer,
                }),
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    let mobility = file
        .mobility
        .into_iter()
        .map(|e| EntitySpec {
            id: e.id,
            route: e.route.into_iter().map(|[x, y]| Position { x, y }).collect(),
            speed_mps: e.speed,
        })
        .collect();
    let faults = file
        .faults
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(FaultSpec {
                at_ns: duration_ns(&format!("faults[{i}].at"), f.at_ms, f.at_us, None)?,
                kind: fault_kind(f, i)?,
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    let probes = file.probes.into_iter().map(|p| ProbeSpec { tag: p.tag }).collect();
    Ok(Scenario {
        name: file.name,
        duration_ns: total_ns,
        step_ns,
        seed: file.seed,
        mode: file.mode.unwrap_or(Mode::Fast),
        rtf: file.rtf.unwrap_or(1.0),
        wireless,
        links,
        nodes,
        mobility,
        faults,
        probes,
    })
}

fn duration_ns_or_default(ms: Option<u64>, us: Option<u64>) -> Result<u64, ParseError> {
    duration_ns("step", ms, us, Some(DEFAULT_STEP_NS))
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn split_duration(ns: u64) -> (Option<u64>, Option<u64>) {
    if ns % 1_000_000 == 0 {
        (Some(ns / 1_000_000), None)
    } else {
        (None, Some(ns / 1_000))
    }
}

fn split_duration_opt(ns: u64, default_ns: u64) -> (Option<u64>, Option<u64>) {
    if ns == default_ns {
        (None, None)
    } else {
        split_duration(ns)
    }
}

/// Serializes a scenario back into the file format. `parse_scenario ∘
/// serialize_scenario` is the identity on semantic content.
pub fn serialize_scenario(s: &Scenario) -> String {
    let (duration_ms, duration_us) = split_duration(s.duration_ns);
    let (step_ms, step_us) = split_duration_opt(s.step_ns, DEFAULT_STEP_NS);
    let file = ScenarioFile {
        name: s.name.clone(),
        duration_ms,
        duration_us,
        step_ms,
        step_us,
        seed: s.seed,
        mode: if s.mode == Mode::Fast { None } else { Some(s.mode) },
        rtf: if s.rtf == 1.0 { None } else { Some(s.rtf) },
        wireless: s.wireless.as_ref().map(|w| {
            let (latency_ms, latency_us) = split_duration(w.params.latency_ns);
            let (jitter_max_ms, jitter_max_us) = split_duration_opt(w.params.jitter_max_ns, 0);
            WirelessFile {
                range: w.range_m,
                latency_ms,
                latency_us,
                bandwidth_bps: w.params.bandwidth_bps,
                jitter_max_ms,
                jitter_max_us,
                loss: w.params.loss,
            }
        }),
        links: s
            .links
            .iter()
            .map(|l| {
                let (latency_ms, latency_us) = split_duration(l.params.latency_ns);
                let (jitter_max_ms, jitter_max_us) = split_duration_opt(l.params.jitter_max_ns, 0);
                LinkFile {
                    a: l.a.clone(),
                    b: l.b.clone(),
                    latency_ms,
                    latency_us,
                    bandwidth_bps: l.params.bandwidth_bps,
                    jitter_max_ms,
                    jitter_max_us,
                    loss: l.params.loss,
                }
            })
            .collect(),
        nodes: s
            .nodes
            .iter()
            .map(|n| {
                let (processing_delay_ms, processing_delay_us) =
                    split_duration_opt(n.processing_delay_ns, 0);
                NodeFile {
                    id: n.id.clone(),
                    behavior: n.behavior.clone(),
                    params: n.params.clone(),
                    position: n.position.map(|p| [p.x, p.y]),
                    entity: n.entity.clone(),
                    processing_delay_ms,
                    processing_delay_us,
                    external: n.external.as_ref().map(|e| ExternalFile {
                        listen_port: e.listen_port,
                        peer: e.peer.clone(),
                    }),
                }
            })
            .collect(),
        mobility: s
            .mobility
            .iter()
            .map(|e| EntityFile {
                id: e.id.clone(),
                route: e.route.iter().map(|p| [p.x, p.y]).collect(),
                speed: e.speed_mps,
            })
            .collect(),
        faults: s.faults.iter().map(fault_to_file).collect(),
        probes: s.probes.iter().map(|p| ProbeFile { tag: p.tag.clone() }).collect(),
    };
    serde_json::to_string_pretty(&file).expect("scenario serialization cannot fail")
}

fn sel_to_file(sel: &ChannelSelector) -> ChannelSelFile {
    match sel {
        ChannelSelector::Wireless => ChannelSelFile::Name("wireless".to_string()),
        ChannelSelector::Link(a, b) => ChannelSelFile::Pair([a.clone(), b.clone()]),
    }
}

fn fault_to_file(f: &FaultSpec) -> FaultFile {
    let (at_ms, at_us) = split_duration(f.at_ns);
    let mut out = FaultFile {
        at_ms,
        at_us,
        kind: f.kind.name().to_string(),
        node: None,
        channel: None,
        groups: None,
        loss: None,
        latency_ms: None,
        latency_us: None,
        probability: None,
        duration_ms: None,
        duration_us: None,
        entity: None,
        speed: None,
    };
    match &f.kind {
        FaultKind::NodeCrash { node } | FaultKind::NodeRestart { node } => {
            out.node = Some(node.clone());
        }
        FaultKind::LinkDown { channel }
        | FaultKind::LinkUp { channel }
        | FaultKind::PartitionHeal { channel } => {
            out.channel = Some(sel_to_file(channel));
        }
        FaultKind::Partition { channel, groups } => {
            out.channel = Some(sel_to_file(channel));
            out.groups = Some(groups.clone());
        }
        FaultKind::LossOverride { channel, loss } => {
            out.channel = Some(sel_to_file(channel));
            out.loss = Some(*loss);
        }
        FaultKind::LatencyOverride { channel, latency_ns } => {
            out.channel = Some(sel_to_file(channel));
            let (ms, us) = split_duration(*latency_ns);
            out.latency_ms = ms;
            out.latency_us = us;
        }
        FaultKind::MessageCorrupt { probability, duration_ns } => {
            out.probability = Some(*probability);
            let (ms, us) = split_duration(*duration_ns);
            out.duration_ms = ms;
            out.duration_us = us;
        }
        FaultKind::EntitySpeedOverride { entity, speed_mps } => {
            out.entity = Some(entity.clone());
            out.speed = Some(*speed_mps);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every scenario invariant. Empty result means the scenario is
/// runnable. Behavior names are only checked when a registry name set is
/// supplied.
pub fn validate(s: &Scenario) -> Vec<Violation> {
    validate_with_behaviors(s, None)
}

pub fn validate_with_behaviors(
    s: &Scenario,
    known_behaviors: Option<&BTreeSet<String>>,
) -> Vec<Violation> {
    let mut out = Vec::new();

    if s.duration_ns == 0 {
        out.push(Violation { code: ViolationCode::NonpositiveDuration, path: "duration".into() });
    }
    if s.step_ns == 0 {
        out.push(Violation { code: ViolationCode::NonpositiveStep, path: "step".into() });
    } else if s.step_ns > s.duration_ns {
        out.push(Violation { code: ViolationCode::StepExceedsDuration, path: "step".into() });
    }
    if s.mode == Mode::Scaled && !(s.rtf > 0.0 && s.rtf.is_finite()) {
        out.push(Violation { code: ViolationCode::RtfInvalid, path: "rtf".into() });
    }

    if let Some(w) = &s.wireless {
        if !(w.range_m > 0.0) {
            out.push(Violation { code: ViolationCode::InvalidChannel, path: "wireless.range".into() });
        }
        check_channel(&w.params, "wireless", &mut out);
    }

    let node_ids: BTreeSet<&str> = s.nodes.iter().map(|n| n.id.as_str()).collect();
    let entity_ids: BTreeSet<&str> = s.mobility.iter().map(|e| e.id.as_str()).collect();

    let mut link_keys = BTreeSet::new();
    for (i, l) in s.links.iter().enumerate() {
        let path = format!("links[{i}]");
        if l.a == l.b {
            out.push(Violation { code: ViolationCode::LinkSelfLoop, path: path.clone() });
        }
        for end in [&l.a, &l.b] {
            if !node_ids.contains(end.as_str()) {
                out.push(Violation { code: ViolationCode::UnknownNode, path: path.clone() });
            }
        }
        if !link_keys.insert(l.key()) {
            out.push(Violation { code: ViolationCode::DuplicateLink, path: path.clone() });
        }
        check_channel(&l.params, &path, &mut out);
    }

    let mut seen_nodes = BTreeSet::new();
    let mut any_external = false;
    for (i, n) in s.nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        if !seen_nodes.insert(n.id.as_str()) {
            out.push(Violation { code: ViolationCode::DuplicateNodeId, path: path.clone() });
        }
        match (&n.position, &n.entity) {
            (Some(_), Some(_)) | (None, None) => {
                out.push(Violation {
                    code: ViolationCode::NodePositionConflict,
                    path: path.clone(),
                });
            }
            _ => {}
        }
        if let Some(ent) = &n.entity {
            if !entity_ids.contains(ent.as_str()) {
                out.push(Violation { code: ViolationCode::UnknownEntity, path: path.clone() });
            }
        }
        if n.external.is_some() {
            any_external = true;
            if n.behavior.is_some() {
                out.push(Violation {
                    code: ViolationCode::ExternalWithBehavior,
                    path: path.clone(),
                });
            }
        } else {
            match &n.behavior {
                None => out.push(Violation {
                    code: ViolationCode::MissingBehavior,
                    path: path.clone(),
                }),
                Some(b) => {
                    if let Some(known) = known_behaviors {
                        if !known.contains(b) {
                            out.push(Violation {
                                code: ViolationCode::UnknownBehavior,
                                path: format!("{path}.behavior"),
                            });
                        }
                    }
                }
            }
        }
    }
    if any_external && s.mode != Mode::Realtime {
        out.push(Violation { code: ViolationCode::ExternalRequiresRealtime, path: "mode".into() });
    }

    let mut seen_entities = BTreeSet::new();
    for (i, e) in s.mobility.iter().enumerate() {
        let path = format!("mobility[{i}]");
        if !seen_entities.insert(e.id.as_str()) {
            out.push(Violation { code: ViolationCode::DuplicateEntityId, path: path.clone() });
        }
        if e.route.len() < 2 {
            out.push(Violation { code: ViolationCode::RouteTooShort, path: path.clone() });
        }
        if !(e.speed_mps >= 0.0) {
            out.push(Violation { code: ViolationCode::NegativeSpeed, path: path.clone() });
        }
    }

    let mut seen_tags = BTreeSet::new();
    for (i, p) in s.probes.iter().enumerate() {
        if !seen_tags.insert(p.tag.as_str()) {
            out.push(Violation {
                code: ViolationCode::DuplicateProbeTag,
                path: format!("probes[{i}]"),
            });
        }
    }

    validate_faults(s, &node_ids, &entity_ids, &link_keys, &mut out);
    out
}

fn check_channel(p: &ChannelParams, path: &str, out: &mut Vec<Violation>) {
    if p.latency_ns == 0 || p.bandwidth_bps == 0 || !(0.0..=1.0).contains(&p.loss) {
        out.push(Violation { code: ViolationCode::InvalidChannel, path: path.to_string() });
    }
}

fn validate_faults(
    s: &Scenario,
    node_ids: &BTreeSet<&str>,
    entity_ids: &BTreeSet<&str>,
    link_keys: &BTreeSet<(String, String)>,
    out: &mut Vec<Violation>,
) {
    let check_sel = |sel: &ChannelSelector| -> bool {
        match sel {
            ChannelSelector::Wireless => s.wireless.is_some(),
            ChannelSelector::Link(a, b) => {
                let key = if a <= b {
                    (a.clone(), b.clone())
                } else {
                    (b.clone(), a.clone())
                };
                link_keys.contains(&key)
            }
        }
    };
    let mut crashed_before: BTreeMap<&str, u64> = BTreeMap::new();
    for (i, f) in s.faults.iter().enumerate() {
        let path = format!("faults[{i}]");
        if f.at_ns >= s.duration_ns {
            out.push(Violation { code: ViolationCode::FaultAtEnd, path: path.clone() });
        }
        match &f.kind {
            FaultKind::NodeCrash { node } => {
                if !node_ids.contains(node.as_str()) {
                    out.push(Violation { code: ViolationCode::UnknownTarget, path: path.clone() });
                } else {
                    crashed_before.entry(node).or_insert(f.at_ns);
                }
            }
            FaultKind::NodeRestart { node } => {
                if !node_ids.contains(node.as_str()) {
                    out.push(Violation { code: ViolationCode::UnknownTarget, path: path.clone() });
                } else {
                    match crashed_before.get(node.as_str()) {
                        Some(crash_at) if *crash_at < f.at_ns => {}
                        _ => out.push(Violation {
                            code: ViolationCode::RestartWithoutCrash,
                            path: path.clone(),
                        }),
                    }
                }
            }
            FaultKind::LinkDown { channel }
            | FaultKind::LinkUp { channel }
            | FaultKind::PartitionHeal { channel }
            | FaultKind::LatencyOverride { channel, .. } => {
                if !check_sel(channel) {
                    out.push(Violation { code: ViolationCode::UnknownTarget, path: path.clone() });
                }
            }
            FaultKind::LossOverride { channel, loss } => {
                if !check_sel(channel) {
                    out.push(Violation { code: ViolationCode::UnknownTarget, path: path.clone() });
                }
                if !(0.0..=1.0).contains(loss) {
                    out.push(Violation {
                        code: ViolationCode::FaultInvalidParam,
                        path: format!("{path}.loss"),
                    });
                }
            }
            FaultKind::Partition { channel, groups } => {
                if !check_sel(channel) {
                    out.push(Violation { code: ViolationCode::UnknownTarget, path: path.clone() });
                }
                let mut seen = BTreeSet::new();
                for g in groups {
                    for id in g {
                        if !node_ids.contains(id.as_str()) {
                            out.push(Violation {
                                code: ViolationCode::UnknownTarget,
                                path: format!("{path}.groups"),
                            });
                        }
                        if !seen.insert(id.as_str()) {
                            out.push(Violation {
                                code: ViolationCode::PartitionGroupsOverlap,
                                path: format!("{path}.groups"),
                            });
                        }
                    }
                }
            }
            FaultKind::MessageCorrupt { probability, .. } => {
                if !(0.0..=1.0).contains(probability) {
                    out.push(Violation {
                        code: ViolationCode::FaultInvalidParam,
                        path: format!("{path}.probability"),
                    });
                }
            }
            FaultKind::EntitySpeedOverride { entity, speed_mps } => {
                if !entity_ids.contains(entity.as_str()) {
                    out.push(Violation { code: ViolationCode::UnknownTarget, path: path.clone() });
                }
                if !(*speed_mps >= 0.0) {
                    out.push(Violation {
                        code: ViolationCode::FaultInvalidParam,
                        path: format!("{path}.speed"),
                    });
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Calibration merge
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("UNKNOWN_TARGET: no such channel: {0}")]
    UnknownTarget(String),
}

/// Returns a copy of the scenario with the targeted channel's latency,
/// jitter_max, and loss replaced by the estimate. Nodes, entities, faults,
/// and probes are untouched.
pub fn merge_calibration(
    s: &Scenario,
    estimate: &ChannelEstimate,
    target: &ChannelSelector,
) -> Result<Scenario, MergeError> {
    let mut out = s.clone();
    let apply = |p: &mut ChannelParams| {
        p.latency_ns = estimate.latency_ns;
        p.jitter_max_ns = estimate.jitter_max_ns;
        p.loss = estimate.loss;
    };
    match target {
        ChannelSelector::Wireless => match &mut out.wireless {
            Some(w) => apply(&mut w.params),
            None => return Err(MergeError::UnknownTarget("wireless".to_string())),
        },
        ChannelSelector::Link(a, b) => {
            let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            match out.links.iter_mut().find(|l| l.key() == key) {
                Some(l) => apply(&mut l.params),
                None => return Err(MergeError::UnknownTarget(format!("{a}<->{b}"))),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "min",
        "duration_ms": 1000,
        "seed": 1,
        "wireless": {"range": 100.0, "latency_ms": 1, "bandwidth_bps": 1000000},
        "nodes": [{"id": "n1", "behavior": "echo", "position": [0.0, 0.0]}]
    }"#;

    #[test]
    fn minimal_document_applies_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.step_ns, 100 * NS_PER_MS);
        assert_eq!(s.mode, Mode::Fast);
        assert_eq!(s.nodes[0].processing_delay_ns, 0);
        assert!(validate(&s).is_empty());
    }

    #[test]
    fn missing_seed_is_a_parse_error() {
        let text = r#"{"name": "x", "duration_ms": 1000}"#;
        let err = parse_scenario(text).unwrap_err();
        assert!(err.to_string().contains("missing required field: seed"), "{err}");
    }

    #[test]
    fn unknown_field_is_an_error() {
        let text = r#"{"name": "x", "duration_ms": 1000, "seed": 1, "bogus": 3}"#;
        let err = parse_scenario(text).unwrap_err();
        assert!(err.to_string().contains("unknown field: bogus"), "{err}");
    }

    #[test]
    fn microsecond_durations() {
        let text = r#"{
            "name": "us", "duration_ms": 1000, "step_us": 500, "seed": 1,
            "wireless": {"range": 10.0, "latency_us": 250, "bandwidth_bps": 1000},
            "nodes": [{"id": "a", "behavior": "echo", "position": [0, 0],
                       "processing_delay_us": 40}]
        }"#;
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.step_ns, 500_000);
        assert_eq!(s.wireless.as_ref().unwrap().params.latency_ns, 250_000);
        assert_eq!(s.nodes[0].processing_delay_ns, 40_000);
    }

    #[test]
    fn both_ms_and_us_rejected() {
        let text = r#"{"name": "x", "duration_ms": 1, "duration_us": 1, "seed": 1}"#;
        assert!(parse_scenario(text).is_err());
    }

    #[test]
    fn duplicate_node_id_violation() {
        let text = r#"{
            "name": "dup", "duration_ms": 1000, "seed": 1,
            "nodes": [
                {"id": "car", "behavior": "echo", "position": [0, 0]},
                {"id": "car", "behavior": "echo", "position": [1, 0]}
            ]
        }"#;
        let v = validate(&parse_scenario(text).unwrap());
        assert!(v.iter().any(|v| v.code == ViolationCode::DuplicateNodeId
            && v.path == "nodes[1]"));
    }

    #[test]
    fn external_requires_realtime() {
        let text = r#"{
            "name": "ext", "duration_ms": 1000, "seed": 1, "mode": "fast",
            "nodes": [{"id": "hw", "position": [0, 0],
                       "external": {"listen_port": 9000, "peer": "127.0.0.1:9001"}}]
        }"#;
        let v = validate(&parse_scenario(text).unwrap());
        assert!(v.iter().any(|v| v.code == ViolationCode::ExternalRequiresRealtime));
    }

    #[test]
    fn node_needs_exactly_one_position_source() {
        let text = r#"{
            "name": "pos", "duration_ms": 1000, "seed": 1,
            "mobility": [{"id": "e", "route": [[0,0],[1,0]], "speed": 1.0}],
            "nodes": [
                {"id": "both", "behavior": "echo", "position": [0,0], "entity": "e"},
                {"id": "neither", "behavior": "echo"}
            ]
        }"#;
        let v = validate(&parse_scenario(text).unwrap());
        let conflicts: Vec<_> = v
            .iter()
            .filter(|v| v.code == ViolationCode::NodePositionConflict)
            .collect();
        assert_eq!(conflicts.len(), 2);
    }

    #[test]
    fn restart_requires_prior_crash() {
        let text = r#"{
            "name": "f", "duration_ms": 10000, "seed": 1,
            "nodes": [{"id": "n", "behavior": "echo", "position": [0,0]}],
            "faults": [{"at_ms": 5000, "kind": "node_restart", "node": "n"}]
        }"#;
        let v = validate(&parse_scenario(text).unwrap());
        assert!(v.iter().any(|v| v.code == ViolationCode::RestartWithoutCrash));
    }

    #[test]
    fn fault_at_duration_rejected() {
        let text = r#"{
            "name": "f", "duration_ms": 1000, "seed": 1,
            "nodes": [{"id": "n", "behavior": "echo", "position": [0,0]}],
            "faults": [{"at_ms": 1000, "kind": "node_crash", "node": "n"}]
        }"#;
        let v = validate(&parse_scenario(text).unwrap());
        assert!(v.iter().any(|v| v.code == ViolationCode::FaultAtEnd));
    }

    #[test]
    fn merge_replaces_only_channel_fields() {
        let s = parse_scenario(MINIMAL).unwrap();
        let est = ChannelEstimate {
            latency_ns: 5 * NS_PER_MS,
            jitter_max_ns: 2 * NS_PER_MS,
            loss: 0.0,
            sample_count: 10,
            method: "test".to_string(),
        };
        let merged = merge_calibration(&s, &est, &ChannelSelector::Wireless).unwrap();
        let w = merged.wireless.as_ref().unwrap();
        assert_eq!(w.params.latency_ns, 5 * NS_PER_MS);
        assert_eq!(w.params.jitter_max_ns, 2 * NS_PER_MS);
        assert_eq!(w.range_m, s.wireless.as_ref().unwrap().range_m);
        assert_eq!(merged.nodes, s.nodes);
        assert_eq!(merged.mobility, s.mobility);
        assert_eq!(merged.faults, s.faults);
        assert_eq!(merged.probes, s.probes);
        assert!(validate(&merged).is_empty());
    }

    #[test]
    fn merge_unknown_link_is_an_error() {
        let s = parse_scenario(MINIMAL).unwrap();
        let est = ChannelEstimate {
            latency_ns: NS_PER_MS,
            jitter_max_ns: 0,
            loss: 0.0,
            sample_count: 1,
            method: "test".to_string(),
        };
        let err = merge_calibration(
            &s,
            &est,
            &ChannelSelector::Link("a".to_string(), "b".to_string()),
        )
        .unwrap_err();
        assert!(matches!(err, MergeError::UnknownTarget(_)));
    }

    #[test]
    fn roundtrip_preserves_semantics() {
        let s = parse_scenario(MINIMAL).unwrap();
        let text = serialize_scenario(&s);
        let s2 = parse_scenario(&text).unwrap();
        assert_eq!(s, s2);
    }
}
