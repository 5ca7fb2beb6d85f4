//! Scenario files: the scene, its constraints, the cell process and the
//! optimizer settings in one JSON document.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{DesignProblem, DistanceConstraint, EntityId, EntityMap, Interval, Point, SearchSpace};
use crate::driver::OptimizerConfig;
use crate::error::{Error, Result};
use crate::simulator::{CellConfig, CellSimulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    RobotBase,
    Object,
    Box,
    FixedPoint,
}

/// Axis-aligned placement rectangle of an optimized entity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: Interval,
    pub y: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub id: EntityId,
    pub kind: EntityKind,
    pub optimized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub entities: Vec<EntitySpec>,
    #[serde(default)]
    pub constraints: Vec<DistanceConstraint>,
    pub cell: CellConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl ScenarioFile {
    /// Parses and validates. Syntax errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: ScenarioFile = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("scenario line {} column {}", e.line(), e.column()), e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario always serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut robots = 0;
        for (i, e) in self.entities.iter().enumerate() {
            let at = |field: &str| format!("entities[{i}]{field} ({})", e.id);
            if e.kind == EntityKind::RobotBase {
                robots += 1;
            }
            if e.optimized {
                let Some(rect) = e.bounds else {
                    return Err(Error::config(at(".bounds"), "optimized entity needs a bounds rectangle"));
                };
                for (axis, iv) in [("x", rect.x), ("y", rect.y)] {
                    if !(iv.lo <= iv.hi && iv.lo.is_finite() && iv.hi.is_finite()) {
                        return Err(Error::config(at(&format!(".bounds.{axis}")), "need finite lo <= hi"));
                    }
                }
                if e.position.is_some() {
                    return Err(Error::config(at(".position"), "optimized entity must not have a fixed position"));
                }
            } else {
                match e.position {
                    Some(p) if p.iter().all(|c| c.is_finite()) => {}
                    _ => return Err(Error::config(at(".position"), "fixed entity needs a finite position")),
                }
                if e.bounds.is_some() {
                    return Err(Error::config(at(".bounds"), "fixed entity must not have bounds"));
                }
            }
            if self.entities[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::config(at(".id"), "duplicate entity id"));
            }
        }
        if robots != 1 {
            return Err(Error::config("entities", format!("exactly one robot_base required, found {robots}")));
        }
        let map = self.entity_map()?;
        for (i, c) in self.constraints.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::config(format!("constraints[{i}]"), e.to_string()))?;
            for id in [&c.entity_i, &c.entity_j] {
                if !map.contains(id) {
                    return Err(Error::config(format!("constraints[{i}]"), format!("unknown entity `{id}`")));
                }
            }
        }
        self.cell.validate(&map)?;
        let kind_of = |id: &EntityId| self.entities.iter().find(|e| &e.id == id).map(|e| e.kind);
        if kind_of(&self.cell.robot.base) != Some(EntityKind::RobotBase) {
            return Err(Error::config("cell.robot.base", "must name the robot_base entity"));
        }
        for (k, t) in self.cell.tasks.iter().enumerate() {
            if kind_of(&t.object) != Some(EntityKind::Object) {
                return Err(Error::config(format!("cell.tasks[{k}].object"), format!("`{}` is not an object", t.object)));
            }
        }
        for (j, b) in self.cell.boxes.iter().enumerate() {
            if kind_of(&b.id) != Some(EntityKind::Box) {
                return Err(Error::config(format!("cell.boxes[{j}]"), format!("`{}` is not a box", b.id)));
            }
        }
        self.optimizer.validate()
    }

    /// Optimized entities in declaration order, then the fixed ones.
    pub fn entity_map(&self) -> Result<EntityMap> {
        let optimized = self.entities.iter().filter(|e| e.optimized).map(|e| e.id.clone()).collect();
        let fixed = self
            .entities
            .iter()
            .filter_map(|e| match (e.optimized, e.position) {
                (false, Some(p)) => Some((e.id.clone(), p)),
                _ => None,
            })
            .collect();
        EntityMap::sequential(optimized, fixed)
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        let bounds = self
            .entities
            .iter()
            .filter(|e| e.optimized)
            .flat_map(|e| {
                let r = e.bounds.expect("validated");
                [r.x, r.y]
            })
            .collect();
        SearchSpace::new(bounds)
    }

    pub fn problem(&self) -> Result<DesignProblem> {
        DesignProblem::new(Arc::new(self.entity_map()?), self.search_space()?, self.constraints.clone())
    }

    pub fn simulator(&self) -> Result<CellSimulator> {
        CellSimulator::new(self.cell.clone(), &self.entity_map()?)
    }

    /// Coordinate labels such as `robot.x`, in layout order.
    pub fn coordinate_labels(&self) -> Vec<String> {
        self.entities
            .iter()
            .filter(|e| e.optimized)
            .flat_map(|e| [format!("{}.x", e.id), format!("{}.y", e.id)])
            .collect()
    }
}
