//! Benchmark task identifiers, skills and task manifest files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown skill {0:?}")]
    UnknownSkill(String),
    #[error("invalid manifest for {task}: {reason}")]
    InvalidManifest { task: String, reason: String },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The five benchmark scenarios, in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    KitchenCleanup,
    AirFryer,
    AssemblyLine,
    CupToCup,
    CanStacking,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::KitchenCleanup,
        TaskId::AirFryer,
        TaskId::AssemblyLine,
        TaskId::CupToCup,
        TaskId::CanStacking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::KitchenCleanup => "kitchen_cleanup",
            TaskId::AirFryer => "air_fryer",
            TaskId::AssemblyLine => "assembly_line",
            TaskId::CupToCup => "cup_to_cup",
            TaskId::CanStacking => "can_stacking",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            TaskId::KitchenCleanup => "Kitchen Cleanup",
            TaskId::AirFryer => "Air Fryer Manipulation",
            TaskId::AssemblyLine => "Assembly Line Sorting",
            TaskId::CupToCup => "Cup-to-Cup Transfer",
            TaskId::CanStacking => "Can Stacking",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            TaskId::KitchenCleanup | TaskId::AirFryer | TaskId::CanStacking => 400,
            TaskId::CupToCup => 200,
            TaskId::AssemblyLine => 100,
        }
    }

    pub fn skills(self) -> &'static [Skill] {
        use Skill::*;
        match self {
            TaskId::KitchenCleanup => &[PickAndPlace, DualArm],
            TaskId::AirFryer => &[PickAndPlace, PushAndPull, DualArm],
            TaskId::AssemblyLine => &[PickAndPlace, DualArm, DynamicGrasping],
            TaskId::CupToCup => &[DualArm, Precision],
            TaskId::CanStacking => &[PickAndPlace, Precision],
        }
    }

    fn embedded_manifest(self) -> &'static str {
        match self {
            TaskId::KitchenCleanup => include_str!("../assets/tasks/kitchen_cleanup.json"),
            TaskId::AirFryer => include_str!("../assets/tasks/air_fryer.json"),
            TaskId::AssemblyLine => include_str!("../assets/tasks/assembly_line.json"),
            TaskId::CupToCup => include_str!("../assets/tasks/cup_to_cup.json"),
            TaskId::CanStacking => include_str!("../assets/tasks/can_stacking.json"),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match norm.as_str() {
            "kitchen" | "kitchencleanup" => TaskId::KitchenCleanup,
            "airfryer" | "airfryermanipulation" => TaskId::AirFryer,
            "assembly" | "assemblyline" | "assemblylinesorting" => TaskId::AssemblyLine,
            "cuptocup" | "cup2cup" | "cuptocuptransfer" => TaskId::CupToCup,
            "canstacking" | "cans" => TaskId::CanStacking,
            _ => return Err(TaskError::UnknownTask(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    PickAndPlace,
    DualArm,
    PushAndPull,
    DynamicGrasping,
    Precision,
}

impl Skill {
    pub const ALL: [Skill; 5] = [
        Skill::PickAndPlace,
        Skill::DualArm,
        Skill::PushAndPull,
        Skill::DynamicGrasping,
        Skill::Precision,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Skill::PickAndPlace => "Pick and Place",
            Skill::DualArm => "Dual-arm collaboration",
            Skill::PushAndPull => "Push and Pull",
            Skill::DynamicGrasping => "Dynamic grasping",
            Skill::Precision => "Precision control",
        }
    }
}

impl FromStr for Skill {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match norm.as_str() {
            "pickandplace" | "pickplace" => Skill::PickAndPlace,
            "dualarm" | "dualarmcollaboration" => Skill::DualArm,
            "pushandpull" | "pushpull" => Skill::PushAndPull,
            "dynamicgrasping" => Skill::DynamicGrasping,
            "precision" | "precisioncontrol" => Skill::Precision,
            _ => return Err(TaskError::UnknownSkill(s.to_string())),
        })
    }
}

/// Task → assessed skills, as shipped.
pub fn default_skill_map() -> BTreeMap<TaskId, Vec<Skill>> {
    TaskId::ALL.iter().map(|t| (*t, t.skills().to_vec())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    /// Point containment in the shape's local frame (cylinder axis = z).
    pub fn contains_local(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Box { extents } => (0..3).all(|i| p[i].abs() <= 0.5 * extents[i]),
            Shape::Cylinder { radius, height } => p.x.hypot(p.y) <= radius && p.z.abs() <= 0.5 * height,
            Shape::Sphere { radius } => p.norm() <= radius,
        }
    }

    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { extents } => extents[2],
            Shape::Cylinder { height, .. } => height,
            Shape::Sphere { radius } => 2.0 * radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    FreeItem,
    Container,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalBox {
    pub center: [f64; 3],
    pub extents: [f64; 3],
}

impl LocalBox {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= 0.5 * self.extents[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ObjectKind,
    /// World position, or offset in the parent's frame when `parent` is set.
    pub position: [f64; 3],
    #[serde(default)]
    pub graspable: bool,
    /// Initial position is sampled uniformly inside this box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn_box: Option<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawerSpec {
    pub name: String,
    pub closed_position: [f64; 3],
    pub axis: [f64; 3],
    pub max_travel: f64,
    pub shape: Shape,
    /// Volume counted as "inside the drawer", in the drawer frame.
    pub basket: LocalBox,
    /// Region where a closing hand latches the drawer, in the drawer frame.
    pub handle: LocalBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnEntry {
    pub time: f64,
    pub item: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConveyorSpec {
    pub belt: String,
    pub velocity: [f64; 3],
    /// Unattached items whose center lies here ride the belt.
    pub region: Aabb,
    pub spawn_schedule: Vec<SpawnEntry>,
    /// Item class → destination container; classes are drawn per seed.
    pub classes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConstants {
    pub grasp_radius: f64,
    pub close_threshold: f64,
    pub open_threshold: f64,
    pub open_frac: f64,
    pub close_frac: f64,
    pub stack_tol_xy: f64,
    pub stack_tol_z: f64,
    pub stable_frames: usize,
    pub lift_height: f64,
    /// Tilt (rad) beyond which a container spills its contents.
    pub pour_angle: f64,
    /// Per-tick uniform position jitter amplitude on riding berries (m).
    pub berry_jitter: f64,
}

impl Default for TaskConstants {
    fn default() -> Self {
        TaskConstants {
            grasp_radius: 0.06,
            close_threshold: 0.6,
            open_threshold: 0.3,
            open_frac: 0.7,
            close_frac: 0.1,
            stack_tol_xy: 0.02,
            stack_tol_z: 0.01,
            stable_frames: 60,
            lift_height: 0.05,
            pour_angle: 1.6,
            berry_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSpec {
    /// Object whose spawn (x, y) is binned.
    pub primary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub task_version: String,
    pub task_id: TaskId,
    pub instruction: String,
    pub skills: Vec<Skill>,
    pub default_trials: usize,
    pub max_ticks: u64,
    pub tick_hz: f64,
    pub constants: TaskConstants,
    pub objects: Vec<ObjectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drawer: Option<DrawerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conveyor: Option<ConveyorSpec>,
    pub heatmap: HeatmapSpec,
}

/// Names each task's predicate needs to find in its manifest.
fn required_names(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::KitchenCleanup => &["item", "basket"],
        TaskId::AirFryer => &["food"],
        TaskId::AssemblyLine => &["item_1", "item_2", "item_3"],
        TaskId::CupToCup => &["cup_left", "cup_right", "berry"],
        TaskId::CanStacking => &["can_a", "can_b"],
    }
}

impl TaskManifest {
    pub fn canonical(task: TaskId) -> Self {
        Self::from_json(task.embedded_manifest()).expect("embedded manifest is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, TaskError> {
        let m: TaskManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Loads `<dir>/<task_id>.json`.
    pub fn load(dir: &Path, task: TaskId) -> Result<Self, TaskError> {
        let m = Self::from_json(&std::fs::read_to_string(dir.join(format!("{task}.json")))?)?;
        if m.task_id != task {
            return Err(m.invalid(format!("file declares task {}", m.task_id)));
        }
        Ok(m)
    }

    fn invalid(&self, reason: impl Into<String>) -> TaskError {
        TaskError::InvalidManifest {
            task: self.task_id.to_string(),
            reason: reason.into(),
        }
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_hz
    }

    /// Number of recorded object poses (the drawer counts as one).
    pub fn object_count(&self) -> usize {
        self.objects.len() + usize::from(self.drawer.is_some())
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.task_version.is_empty() {
            return Err(self.invalid("empty task_version"));
        }
        if !(self.tick_hz > 0.0) || self.max_ticks == 0 {
            return Err(self.invalid("tick_hz and max_ticks must be positive"));
        }
        let c = &self.constants;
        if !(c.open_threshold < c.close_threshold) {
            return Err(self.invalid("open_threshold must be below close_threshold"));
        }
        if !(c.grasp_radius > 0.0 && c.stack_tol_xy > 0.0 && c.stack_tol_z > 0.0 && c.berry_jitter >= 0.0) {
            return Err(self.invalid("tolerances must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.name.as_str()) {
                return Err(self.invalid(format!("duplicate object {}", o.name)));
            }
            if let Some(b) = &o.spawn_box {
                if !b.is_valid() {
                    return Err(self.invalid(format!("inverted spawn box on {}", o.name)));
                }
            }
            if let Some(p) = &o.parent {
                match self.object_index(p) {
                    Some(i) if self.objects[i].kind == ObjectKind::Container && i + 1 < seen.len() => {}
                    _ => return Err(self.invalid(format!("{} has invalid parent {p}", o.name))),
                }
            }
        }
        for n in required_names(self.task_id) {
            if self.object_index(n).is_none() {
                return Err(self.invalid(format!("missing object {n}")));
            }
        }
        if self.object_index(&self.heatmap.primary).is_none() {
            return Err(self.invalid("heatmap primary object not found"));
        }
        if let Some(d) = &self.drawer {
            if !(d.max_travel > 0.0) || Vec3::from(d.axis).norm() < 1e-9 {
                return Err(self.invalid("drawer needs positive travel and a nonzero axis"));
            }
        } else if self.task_id == TaskId::AirFryer {
            return Err(self.invalid("air fryer requires a drawer"));
        }
        if let Some(cv) = &self.conveyor {
            if self.object_index(&cv.belt).is_none() || cv.classes.is_empty() {
                return Err(self.invalid("conveyor belt or classes missing"));
            }
            for e in &cv.spawn_schedule {
                if self.object_index(&e.item).is_none() || e.time < 0.0 {
                    return Err(self.invalid(format!("bad spawn entry {}", e.item)));
                }
            }
            for target in cv.classes.values() {
                if self.object_index(target).is_none() {
                    return Err(self.invalid(format!("unknown class target {target}")));
                }
            }
        } else if self.task_id == TaskId::AssemblyLine {
            return Err(self.invalid("assembly line requires a conveyor"));
        }
        Ok(())
    }
}
