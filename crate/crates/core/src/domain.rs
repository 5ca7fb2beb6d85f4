//! Layouts, search spaces, pairwise distance constraints and evaluation results.
//!
//! A layout is a flat coordinate vector `[x0, y0, x1, y1, ...]` in meters. The
//! [`EntityMap`] ties each coordinate pair to a named scene entity and also
//! carries the positions of entities that stay fixed during optimization, so
//! constraints can relate a movable entity to a fixed one.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar position in meters.
pub type Point = [f64; 2];

pub fn distance(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        EntityId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_owned())
    }
}

/// Where the x and y coordinates of an optimized entity live in the layout vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EntitySlot {
    pub id: EntityId,
    pub x_index: usize,
    pub y_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityMap {
    slots: Vec<EntitySlot>,
    fixed: Vec<(EntityId, Point)>,
}

impl EntityMap {
    /// Builds a map from explicit slots. Indices must cover `0..2 * slots.len()`
    /// exactly once and ids must be unique across slots and fixed entities.
    pub fn new(slots: Vec<EntitySlot>, fixed: Vec<(EntityId, Point)>) -> Result<Self> {
        let dim = 2 * slots.len();
        let mut used = vec![false; dim];
        for slot in &slots {
            for idx in [slot.x_index, slot.y_index] {
                if idx >= dim || used[idx] {
                    return Err(Error::config(
                        format!("entity_map.{}", slot.id),
                        format!("coordinate index {idx} out of range or used twice"),
                    ));
                }
                used[idx] = true;
            }
        }
        let mut ids: Vec<&EntityId> = slots
            .iter()
            .map(|s| &s.id)
            .chain(fixed.iter().map(|(id, _)| id))
            .collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(
                format!("entity_map.{}", w[0]),
                "duplicate entity id",
            ));
        }
        Ok(EntityMap { slots, fixed })
    }

    /// Optimized entities laid out in order: entity `k` owns coordinates `2k, 2k+1`.
    pub fn sequential(optimized: Vec<EntityId>, fixed: Vec<(EntityId, Point)>) -> Result<Self> {
        let slots = optimized
            .into_iter()
            .enumerate()
            .map(|(k, id)| EntitySlot {
                id,
                x_index: 2 * k,
                y_index: 2 * k + 1,
            })
            .collect();
        Self::new(slots, fixed)
    }

    pub fn dim(&self) -> usize {
        2 * self.slots.len()
    }

    pub fn slots(&self) -> &[EntitySlot] {
        &self.slots
    }

    pub fn fixed(&self) -> &[(EntityId, Point)] {
        &self.fixed
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.slots.iter().any(|s| &s.id == id) || self.fixed.iter().any(|(f, _)| f == id)
    }

    /// Position of `id` given the coordinates of the optimized entities.
    pub fn position(&self, coords: &[f64], id: &EntityId) -> Option<Point> {
        if let Some(slot) = self.slots.iter().find(|s| &s.id == id) {
            return Some([coords[slot.x_index], coords[slot.y_index]]);
        }
        self.fixed.iter().find(|(f, _)| f == id).map(|(_, p)| *p)
    }
}

/// A candidate layout: the coordinates of every optimized entity.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutVector {
    coords: Vec<f64>,
    map: Arc<EntityMap>,
}

impl LayoutVector {
    pub fn new(coords: Vec<f64>, map: Arc<EntityMap>) -> Result<Self> {
        if coords.len() != map.dim() {
            return Err(Error::DimensionMismatch {
                expected: map.dim(),
                found: coords.len(),
            });
        }
        Ok(LayoutVector { coords, map })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn map(&self) -> &Arc<EntityMap> {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn position(&self, id: &EntityId) -> Result<Point> {
        self.map
            .position(&self.coords, id)
            .ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Axis-aligned box of admissible coordinates, one closed interval per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    bounds: Vec<Interval>,
}

impl SearchSpace {
    pub fn new(bounds: Vec<Interval>) -> Result<Self> {
        for (d, b) in bounds.iter().enumerate() {
            if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi) {
                return Err(Error::config(
                    format!("bounds[{d}]"),
                    format!("invalid interval [{}, {}]", b.lo, b.hi),
                ));
            }
        }
        Ok(SearchSpace { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[Interval] {
        &self.bounds
    }

    pub fn contains(&self, coords: &[f64]) -> bool {
        coords.len() == self.bounds.len()
            && coords
                .iter()
                .zip(&self.bounds)
                .all(|(&c, b)| b.lo <= c && c <= b.hi)
    }

    /// Projects each coordinate onto its interval.
    pub fn clamp(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: raw.len(),
            });
        }
        Ok(raw
            .iter()
            .zip(&self.bounds)
            .map(|(&c, b)| c.clamp(b.lo, b.hi))
            .collect())
    }

    /// Length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        self.bounds
            .iter()
            .map(|b| b.width() * b.width())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// Satisfied when `d_min <= dist <= d_max`.
    #[default]
    InsideBand,
    /// Satisfied when the distance lies outside `(d_min, d_max)`.
    OutsideBand,
}

/// Pairwise Euclidean distance band between two entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceConstraint {
    pub entity_i: EntityId,
    pub entity_j: EntityId,
    pub d_min: f64,
    pub d_max: f64,
    #[serde(default)]
    pub mode: BandMode,
}

impl DistanceConstraint {
    pub fn new(
        entity_i: impl Into<EntityId>,
        entity_j: impl Into<EntityId>,
        d_min: f64,
        d_max: f64,
        mode: BandMode,
    ) -> Result<Self> {
        let c = DistanceConstraint {
            entity_i: entity_i.into(),
            entity_j: entity_j.into(),
            d_min,
            d_max,
            mode,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min >= 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::config(
                self.to_string(),
                "distances must satisfy 0 <= d_min < d_max",
            ));
        }
        if self.entity_i == self.entity_j {
            return Err(Error::config(
                self.to_string(),
                "a constraint must relate two distinct entities",
            ));
        }
        Ok(())
    }

    /// Standard-form value for the given pair positions: `<= 0` means satisfied.
    pub fn value(&self, pi: Point, pj: Point) -> f64 {
        let mid = 0.5 * (self.d_max + self.d_min);
        let half = 0.5 * (self.d_max - self.d_min);
        let g = (distance(pi, pj) - mid).abs() - half;
        match self.mode {
            BandMode::InsideBand => g,
            BandMode::OutsideBand => -g,
        }
    }
}

impl fmt::Display for DistanceConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            BandMode::InsideBand => "inside",
            BandMode::OutsideBand => "outside",
        };
        write!(
            f,
            "{}-{} {} [{}, {}]",
            self.entity_i, self.entity_j, mode, self.d_min, self.d_max
        )
    }
}

/// One value per constraint, `<= 0` meaning satisfied.
pub fn constraint_values(x: &LayoutVector, constraints: &[DistanceConstraint]) -> Result<Vec<f64>> {
    constraints
        .iter()
        .map(|c| Ok(c.value(x.position(&c.entity_i)?, x.position(&c.entity_j)?)))
        .collect()
}

pub fn is_feasible(
    x: &LayoutVector,
    space: &SearchSpace,
    constraints: &[DistanceConstraint],
) -> Result<bool> {
    let values = constraint_values(x, constraints)?;
    Ok(space.contains(x.coords()) && values.iter().all(|&g| g <= 0.0))
}

pub fn clamp_to_space(raw: &[f64], space: &SearchSpace, map: Arc<EntityMap>) -> Result<LayoutVector> {
    LayoutVector::new(space.clamp(raw)?, map)
}

/// Everything needed to decide whether a coordinate vector is an admissible
/// layout. Construction checks that every constraint refers to known entities,
/// so the hot-path checks below are infallible.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    map: Arc<EntityMap>,
    space: SearchSpace,
    constraints: Vec<DistanceConstraint>,
}

impl DesignProblem {
    pub fn new(
        map: Arc<EntityMap>,
        space: SearchSpace,
        constraints: Vec<DistanceConstraint>,
    ) -> Result<Self> {
        if space.dim() != map.dim() {
            return Err(Error::DimensionMismatch {
                expected: map.dim(),
                found: space.dim(),
            });
        }
        for c in &constraints {
            c.validate()?;
            for id in [&c.entity_i, &c.entity_j] {
                if !map.contains(id) {
                    return Err(Error::UnknownEntity(id.to_string()));
                }
            }
        }
        Ok(DesignProblem {
            map,
            space,
            constraints,
        })
    }

    /// Box-only problem over anonymous entities `e0, e1, ...`.
    pub fn unconstrained(space: SearchSpace) -> Result<Self> {
        if space.dim() % 2 != 0 {
            return Err(Error::config("bounds", "dimension must be even"));
        }
        let ids = (0..space.dim() / 2)
            .map(|k| EntityId::new(format!("e{k}")))
            .collect();
        let map = Arc::new(EntityMap::sequential(ids, Vec::new())?);
        Self::new(map, space, Vec::new())
    }

    pub fn map(&self) -> &Arc<EntityMap> {
        &self.map
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn constraints(&self) -> &[DistanceConstraint] {
        &self.constraints
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn layout(&self, coords: Vec<f64>) -> Result<LayoutVector> {
        LayoutVector::new(coords, self.map.clone())
    }

    pub fn constraint_values(&self, coords: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| {
                let pi = self.map.position(coords, &c.entity_i).expect("validated entity");
                let pj = self.map.position(coords, &c.entity_j).expect("validated entity");
                c.value(pi, pj)
            })
            .collect()
    }

    pub fn is_feasible(&self, coords: &[f64]) -> bool {
        self.space.contains(coords) && self.constraint_values(coords).iter().all(|&g| g <= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Robot,
    Human,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agent::Robot => "robot",
            Agent::Human => "human",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub agent: Agent,
    pub action: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Outcome of evaluating one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    /// Cycle time in seconds, or the penalty constant when `penalized`.
    pub objective: f64,
    pub feasible: bool,
    pub penalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeline: Option<Vec<TimelineEvent>>,
}

impl EvaluationResult {
    pub fn cycle_time(objective: f64) -> Self {
        EvaluationResult {
            objective,
            feasible: true,
            penalized: false,
            timeline: None,
        }
    }

    pub fn penalty(objective: f64) -> Self {
        EvaluationResult {
            objective,
            feasible: false,
            penalized: true,
            timeline: None,
        }
    }
}
