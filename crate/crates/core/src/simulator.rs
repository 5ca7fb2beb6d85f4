//! Cycle-time model of the collaborative pick-and-packaging cell.
//!
//! The robot works through its task list in order: move to the object, pick,
//! move to the assigned box, place. A box must have been put on the table by
//! the operator before the robot can place into it; the robot idles at the box
//! until then. The operator first brings every box from the staging point to
//! its position. Once a box holds its last object the operator walks to it,
//! removes it and carries it back to staging, serving boxes in the order they
//! were filled (ties by box index). Robot point-to-point motion follows a
//! trapezoidal velocity profile, operator walks are straight lines at constant
//! speed.

use serde::{Deserialize, Serialize};

use crate::domain::{distance, Agent, EntityId, EntityMap, EvaluationResult, LayoutVector, Point, TimelineEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    /// Entity whose position is the robot mounting point.
    pub base: EntityId,
    /// Entity where the end effector starts the cycle.
    pub home: EntityId,
    pub v_max: f64,
    pub a_max: f64,
    pub t_pick: f64,
    pub t_place: f64,
    pub reach_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanParams {
    pub v_walk: f64,
    pub t_place_box: f64,
    pub t_remove_box: f64,
    pub staging: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub id: EntityId,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub object: EntityId,
    #[serde(rename = "box")]
    pub container: EntityId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub robot: RobotParams,
    pub human: HumanParams,
    pub boxes: Vec<BoxSpec>,
    pub tasks: Vec<Task>,
    /// Objective reported for unreachable layouts. Defaults to [`CellConfig::default_penalty`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_objective: Option<f64>,
}

impl CellConfig {
    /// Checks parameter ranges and that every referenced entity is in `map`.
    pub fn validate(&self, map: &EntityMap) -> Result<()> {
        let r = &self.robot;
        let h = &self.human;
        let positive = [
            ("cell.robot.v_max", r.v_max),
            ("cell.robot.a_max", r.a_max),
            ("cell.robot.reach_radius", r.reach_radius),
            ("cell.human.v_walk", h.v_walk),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        let dwell = [
            ("cell.robot.t_pick", r.t_pick),
            ("cell.robot.t_place", r.t_place),
            ("cell.human.t_place_box", h.t_place_box),
            ("cell.human.t_remove_box", h.t_remove_box),
        ];
        for (field, v) in dwell {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be non-negative, got {v}")));
            }
        }
        if let Some(p) = self.penalty_objective {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::config("cell.penalty_objective", "must be positive"));
            }
        }
        for (field, id) in [("cell.robot.base", &r.base), ("cell.robot.home", &r.home)] {
            if !map.contains(id) {
                return Err(Error::config(field, format!("unknown entity `{id}`")));
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::config("cell.tasks", "at least one task is required"));
        }
        for (j, b) in self.boxes.iter().enumerate() {
            if !map.contains(&b.id) {
                return Err(Error::config(format!("cell.boxes[{j}]"), format!("unknown entity `{}`", b.id)));
            }
            if b.capacity == 0 {
                return Err(Error::config(format!("cell.boxes[{j}].capacity"), "must be at least 1"));
            }
            if self.boxes[..j].iter().any(|o| o.id == b.id) {
                return Err(Error::config(format!("cell.boxes[{j}]"), "duplicate box"));
            }
            let load = self.tasks.iter().filter(|t| t.container == b.id).count();
            if load == 0 {
                return Err(Error::config(format!("cell.boxes[{j}]"), format!("box `{}` has no tasks", b.id)));
            }
            if load > b.capacity {
                return Err(Error::config(
                    format!("cell.boxes[{j}].capacity"),
                    format!("box `{}` receives {load} objects but holds {}", b.id, b.capacity),
                ));
            }
        }
        for (k, t) in self.tasks.iter().enumerate() {
            if !map.contains(&t.object) {
                return Err(Error::config(format!("cell.tasks[{k}].object"), format!("unknown entity `{}`", t.object)));
            }
            if !self.boxes.iter().any(|b| b.id == t.container) {
                return Err(Error::config(format!("cell.tasks[{k}].box"), format!("`{}` is not a declared box", t.container)));
            }
        }
        Ok(())
    }

    /// Ten times a loose per-cycle upper bound: every task pays its dwell times
    /// plus a move across the whole reach disk.
    pub fn default_penalty(&self) -> f64 {
        let r = &self.robot;
        let per_task = r.t_pick + r.t_place + travel_time(2.0 * r.reach_radius, r.v_max, r.a_max);
        10.0 * self.tasks.len() as f64 * per_task
    }

    pub fn penalty(&self) -> f64 {
        self.penalty_objective.unwrap_or_else(|| self.default_penalty())
    }
}

/// Point-to-point duration under a trapezoidal (or, for short moves,
/// triangular) velocity profile.
pub fn travel_time(d: f64, v: f64, a: f64) -> f64 {
    if d >= v * v / a {
        d / v + v / a
    } else {
        2.0 * (d / a).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
    pub makespan_s: f64,
}

struct AgentTrack {
    agent: Agent,
    t: f64,
    at: Point,
    events: Vec<TimelineEvent>,
}

impl AgentTrack {
    fn new(agent: Agent, at: Point) -> Self {
        AgentTrack { agent, t: 0.0, at, events: Vec::new() }
    }

    fn act(&mut self, action: String, start: f64, duration: f64) {
        let end = start + duration;
        self.events.push(TimelineEvent { agent: self.agent, action, start_s: start, end_s: end });
        self.t = end;
    }

    fn go(&mut self, action: String, to: Point, duration: impl Fn(f64) -> f64) {
        let d = duration(distance(self.at, to));
        self.act(action, self.t, d);
        self.at = to;
    }
}

/// Two-agent schedule for layout `x`. Does not check reachability.
pub fn schedule(x: &LayoutVector, cell: &CellConfig) -> Result<Timeline> {
    let r = &cell.robot;
    let h = &cell.human;
    let robot_move = |d: f64| travel_time(d, r.v_max, r.a_max);
    let walk = |d: f64| d / h.v_walk;

    let box_pos: Vec<Point> = cell.boxes.iter().map(|b| x.position(&b.id)).collect::<Result<_>>()?;
    let box_index = |id: &EntityId| {
        cell.boxes
            .iter()
            .position(|b| &b.id == id)
            .ok_or_else(|| Error::config("cell.tasks", format!("`{id}` is not a declared box")))
    };

    // Operator puts every box on the table.
    let mut human = AgentTrack::new(Agent::Human, h.staging);
    let mut placed_at = Vec::with_capacity(cell.boxes.len());
    for (j, (b, &pos)) in cell.boxes.iter().zip(&box_pos).enumerate() {
        if j > 0 {
            human.go("walk_to:staging".into(), h.staging, walk);
        }
        human.go(format!("walk_to:{}", b.id), pos, walk);
        human.act(format!("place_box:{}", b.id), human.t, h.t_place_box);
        placed_at.push(human.t);
    }

    let mut robot = AgentTrack::new(Agent::Robot, x.position(&r.home)?);
    let mut last_task = vec![None; cell.boxes.len()];
    for (k, t) in cell.tasks.iter().enumerate() {
        last_task[box_index(&t.container)?] = Some(k);
    }
    let mut filled_at = vec![0.0; cell.boxes.len()];
    for (k, t) in cell.tasks.iter().enumerate() {
        let j = box_index(&t.container)?;
        let obj = x.position(&t.object)?;
        robot.go(format!("move_to:{}", t.object), obj, robot_move);
        robot.act(format!("pick:{}", t.object), robot.t, r.t_pick);
        robot.go(format!("move_to:{}", t.container), box_pos[j], robot_move);
        let start = robot.t.max(placed_at[j]);
        robot.act(format!("place:{}->{}", t.object, t.container), start, r.t_place);
        if last_task[j] == Some(k) {
            filled_at[j] = robot.t;
        }
    }

    let mut order: Vec<usize> = (0..cell.boxes.len()).filter(|&j| last_task[j].is_some()).collect();
    order.sort_by(|&a, &b| filled_at[a].total_cmp(&filled_at[b]).then(a.cmp(&b)));
    for j in order {
        human.t = human.t.max(filled_at[j]);
        human.go(format!("walk_to:{}", cell.boxes[j].id), box_pos[j], walk);
        human.act(format!("remove_box:{}", cell.boxes[j].id), human.t, h.t_remove_box);
        human.go("walk_to:staging".into(), h.staging, walk);
    }

    let makespan_s = robot.t.max(human.t);
    let mut events = robot.events;
    events.append(&mut human.events);
    // Stable: robot before human at equal start times.
    events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(Timeline { events, makespan_s })
}

/// Cycle time of layout `x`, or the penalty when an object or box lies outside
/// the robot's reach disk.
pub fn evaluate(x: &LayoutVector, cell: &CellConfig, with_timeline: bool) -> Result<EvaluationResult> {
    let base = x.position(&cell.robot.base)?;
    let mut points = Vec::with_capacity(cell.tasks.len() + cell.boxes.len());
    for t in &cell.tasks {
        points.push(x.position(&t.object)?);
    }
    for b in &cell.boxes {
        points.push(x.position(&b.id)?);
    }
    if points.iter().any(|&p| distance(base, p) > cell.robot.reach_radius) {
        return Ok(EvaluationResult::penalty(cell.penalty()));
    }
    let timeline = schedule(x, cell)?;
    let mut result = EvaluationResult::cycle_time(timeline.makespan_s);
    if with_timeline {
        result.timeline = Some(timeline.events);
    }
    Ok(result)
}

/// Embedded evaluator over a validated cell.
#[derive(Debug, Clone)]
pub struct CellSimulator {
    cell: CellConfig,
}

impl CellSimulator {
    pub fn new(cell: CellConfig, map: &EntityMap) -> Result<Self> {
        cell.validate(map)?;
        Ok(CellSimulator { cell })
    }

    pub fn cell(&self) -> &CellConfig {
        &self.cell
    }

    pub fn evaluate(&self, x: &LayoutVector, with_timeline: bool) -> Result<EvaluationResult> {
        evaluate(x, &self.cell, with_timeline)
    }
}
