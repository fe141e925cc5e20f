//! Built-in continuous-time domain simulator: entities move along polyline
//! routes at commanded speeds. Stepping is deterministic and consumes no
//! randomness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::EntitySpec;
use crate::time::SimTime;

/// 2-D position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<(f64, f64)> for Position {
    fn from((x, y): (f64, f64)) -> Self {
        Position { x, y }
    }
}

impl From<Position> for (f64, f64) {
    fn from(p: Position) -> Self {
        (p.x, p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityState {
    Moving,
    Stopped,
    Finished,
}

impl EntityState {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntityState::Moving => "moving",
            EntityState::Stopped => "stopped",
            EntityState::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Stop,
    Resume,
    SetSpeed,
}

/// A command issued by an application against a mobile entity. Applied at
/// the window boundary preceding the next mobility step, last-wins per
/// entity within a window.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityCommand {
    pub entity: String,
    pub kind: CommandKind,
    pub value_mps: Option<f64>,
    pub issued_at: SimTime,
}

#[derive(Debug)]
pub struct Entity {
    pub id: String,
    route: Vec<Position>,
    /// Cumulative arc length at the start of each route point.
    cumulative: Vec<f64>,
    pub speed_mps: f64,
    pub state: EntityState,
    pub progress_m: f64,
}

impl Entity {
    fn new(spec: &EntitySpec) -> Self {
        let mut cumulative = Vec::with_capacity(spec.route.len());
        let mut total = 0.0;
        cumulative.push(0.0);
        for w in spec.route.windows(2) {
            total += w[0].distance(&w[1]);
            cumulative.push(total);
        }
        Entity {
            id: spec.id.clone(),
            route: spec.route.clone(),
            cumulative,
            speed_mps: spec.speed_mps,
            state: EntityState::Moving,
            progress_m: 0.0,
        }
    }

    pub fn route_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Point at arc length `progress_m` along the polyline.
    pub fn position(&self) -> Position {
        let p = self.progress_m;
        if p <= 0.0 {
            return self.route[0];
        }
        if p >= self.route_length() {
            return *self.route.last().unwrap();
        }
        // find the leg containing p
        for i in 1..self.cumulative.len() {
            if p <= self.cumulative[i] {
                let leg_start = self.cumulative[i - 1];
                let leg_len = self.cumulative[i] - leg_start;
                if leg_len == 0.0 {
                    continue;
                }
                let f = (p - leg_start) / leg_len;
                let a = self.route[i - 1];
                let b = self.route[i];
                return Position {
                    x: a.x + (b.x - a.x) * f,
                    y: a.y + (b.y - a.y) * f,
                };
            }
        }
        *self.route.last().unwrap()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MobilityError {
    #[error("UNKNOWN_ENTITY: {0}")]
    UnknownEntity(String),
    /// Non-fatal; the caller records a trace warning.
    #[error("COMMAND_AFTER_FINISH: {0}")]
    CommandAfterFinish(String),
}

/// Owns every mobile entity of a run.
#[derive(Debug, Default)]
pub struct Mobility {
    entities: BTreeMap<String, Entity>,
}

impl Mobility {
    pub fn new(specs: &[EntitySpec]) -> Self {
        let entities = specs
            .iter()
            .map(|s| (s.id.clone(), Entity::new(s)))
            .collect();
        Mobility { entities }
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    /// Advances every Moving entity by `speed * dt`, clamped at route end.
    /// Returns the position of every entity afterwards.
    pub fn step(&mut self, dt_ns: u64) -> BTreeMap<String, Position> {
        let dt_s = dt_ns as f64 / 1e9;
        let mut out = BTreeMap::new();
        for (id, e) in self.entities.iter_mut() {
            if e.state == EntityState::Moving {
                e.progress_m += e.speed_mps * dt_s;
                if e.progress_m >= e.route_length() {
                    e.progress_m = e.route_length();
                    e.state = EntityState::Finished;
                }
            }
            out.insert(id.clone(), e.position());
        }
        out
    }

    pub fn apply_command(&mut self, c: &EntityCommand) -> Result<(), MobilityError> {
        let e = self
            .entities
            .get_mut(&c.entity)
            .ok_or_else(|| MobilityError::UnknownEntity(c.entity.clone()))?;
        if e.state == EntityState::Finished {
            return Err(MobilityError::CommandAfterFinish(c.entity.clone()));
        }
        match c.kind {
            CommandKind::Stop => e.state = EntityState::Stopped,
            CommandKind::Resume => e.state = EntityState::Moving,
            CommandKind::SetSpeed => {
                e.speed_mps = c.value_mps.unwrap_or(e.speed_mps).max(0.0);
            }
        }
        Ok(())
    }

    pub fn position_of(&self, entity: &str) -> Result<Position, MobilityError> {
        self.entities
            .get(entity)
            .map(|e| e.position())
            .ok_or_else(|| MobilityError::UnknownEntity(entity.to_string()))
    }

    pub fn state_of(&self, entity: &str) -> Option<EntityState> {
        self.entities.get(entity).map(|e| e.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::NS_PER_SEC;

    fn spec(id: &str, route: &[(f64, f64)], speed: f64) -> EntitySpec {
        EntitySpec {
            id: id.to_string(),
            route: route.iter().map(|&(x, y)| Position::new(x, y)).collect(),
            speed_mps: speed,
        }
    }

    #[test]
    fn straight_line_kinematics() {
        let mut m = Mobility::new(&[spec("e", &[(0.0, 0.0), (1000.0, 0.0)], 100.0)]);
        let pos = m.step(NS_PER_SEC / 10);
        assert_eq!(pos["e"], Position::new(10.0, 0.0));
    }

    #[test]
    fn polyline_arc_length() {
        // 3 m on the first leg, 2 m on the second
        let mut m = Mobility::new(&[spec("e", &[(0.0, 0.0), (3.0, 0.0), (3.0, 4.0)], 5.0)]);
        let pos = m.step(NS_PER_SEC);
        assert!((pos["e"].x - 3.0).abs() < 1e-9);
        assert!((pos["e"].y - 2.0).abs() < 1e-9);
    }

    #[test]
    fn train_displacement_during_message_latency() {
        // 360 km/h = 100 m/s for 10.34 ms moves the train 1.034 m
        let mut m = Mobility::new(&[spec("train", &[(0.0, 0.0), (2000.0, 0.0)], 100.0)]);
        let pos = m.step(10_340_000);
        assert!((pos["train"].x - 1.034).abs() < 1e-9);
    }

    #[test]
    fn stop_and_resume() {
        let mut m = Mobility::new(&[spec("e", &[(0.0, 0.0), (100.0, 0.0)], 10.0)]);
        let stop = EntityCommand {
            entity: "e".to_string(),
            kind: CommandKind::Stop,
            value_mps: None,
            issued_at: SimTime::ZERO,
        };
        m.apply_command(&stop).unwrap();
        let pos = m.step(NS_PER_SEC);
        assert_eq!(pos["e"], Position::new(0.0, 0.0));

        let resume = EntityCommand { kind: CommandKind::Resume, ..stop };
        m.apply_command(&resume).unwrap();
        let pos = m.step(NS_PER_SEC);
        assert_eq!(pos["e"], Position::new(10.0, 0.0));
    }

    #[test]
    fn clamps_at_route_end_exactly() {
        let mut m = Mobility::new(&[spec("e", &[(0.0, 0.0), (15.0, 0.0)], 10.0)]);
        m.step(NS_PER_SEC);
        m.step(NS_PER_SEC);
        assert_eq!(m.position_of("e").unwrap(), Position::new(15.0, 0.0));
        assert_eq!(m.state_of("e"), Some(EntityState::Finished));
        // further steps change nothing
        m.step(NS_PER_SEC);
        assert_eq!(m.position_of("e").unwrap(), Position::new(15.0, 0.0));
    }

    #[test]
    fn command_after_finish_is_flagged() {
        let mut m = Mobility::new(&[spec("e", &[(0.0, 0.0), (1.0, 0.0)], 10.0)]);
        m.step(NS_PER_SEC);
        let cmd = EntityCommand {
            entity: "e".to_string(),
            kind: CommandKind::Resume,
            value_mps: None,
            issued_at: SimTime::ZERO,
        };
        assert_eq!(
            m.apply_command(&cmd),
            Err(MobilityError::CommandAfterFinish("e".to_string()))
        );
    }

    #[test]
    fn unknown_entity() {
        let m = Mobility::new(&[]);
        assert!(matches!(
            m.position_of("ghost"),
            Err(MobilityError::UnknownEntity(_))
        ));
    }

    #[test]
    fn fresh_and_finished_positions() {
        let mut m = Mobility::new(&[spec("e", &[(1.0, 2.0), (3.0, 2.0)], 1.0)]);
        assert_eq!(m.position_of("e").unwrap(), Position::new(1.0, 2.0));
        m.step(5 * NS_PER_SEC);
        assert_eq!(m.position_of("e").unwrap(), Position::new(3.0, 2.0));
    }
}
