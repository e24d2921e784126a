//! Deterministic kinematic desk-scale world for the five benchmark tasks.
//!
//! No dynamics: grasping is proximity plus hand closure, released objects
//! stay where they are let go, and containers carry whatever was released
//! inside them.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{PoseSE3, Quaternion, Vec3};
use crate::kinematics::{ActionVector26, DualArmModel, Side};
use crate::protocol::ObjectRecord;
use crate::task::{ObjectKind, Shape, TaskError, TaskId, TaskManifest};

const JITTER_SALT: u64 = 0x6265_7272_795f_6a74;

/// How an unattached object is held in place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Static,
    /// Rigidly carried by a container object.
    Rider { parent: usize, rel: PoseSE3 },
    /// Carried by the drawer.
    Drawer { rel: PoseSE3 },
    /// On the conveyor: `position = anchor + v·(tick − since)·dt`.
    Belt { anchor: Vec3, since: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u16,
    pub name: String,
    pub shape: Shape,
    pub kind: ObjectKind,
    pub graspable: bool,
    /// Sorting class for conveyor items.
    pub class: Option<String>,
    pub pose: PoseSE3,
    /// Inactive objects wait at their spawn pose and cannot be grasped.
    pub active: bool,
    pub spawn_tick: u64,
    pub attached_to: Option<Side>,
    pub support: Support,
}

impl SceneObject {
    pub fn contains_world(&self, p: &Vec3) -> bool {
        self.shape.contains_local(&self.pose.inverse().transform_point(p))
    }

    /// Angle between the object's local z axis and world up.
    pub fn tilt(&self) -> f64 {
        self.pose.orientation.rotate(&Vec3::z()).z.clamp(-1.0, 1.0).acos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DrawerLatch {
    side: Side,
    palm0: Vec3,
    opening0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawerState {
    pub id: u16,
    pub opening: f64,
    pub pose: PoseSE3,
    latch: Option<DrawerLatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HandState {
    pub closed: bool,
    pub holding: Option<usize>,
    grip: Option<PoseSE3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SceneEvent {
    Spawn { tick: u64, object: u16 },
    Grasp { tick: u64, side: Side, object: u16, from_other_hand: bool },
    Release { tick: u64, side: Side, object: u16 },
    DrawerLatch { tick: u64, side: Side },
    DrawerRelease { tick: u64, side: Side },
    /// Contents left a tilted container and landed in `into` (or on the table).
    Pour { tick: u64, from: u16, object: u16, into: Option<u16> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub positions: Vec<Vec3>,
    pub attached: [Option<u16>; 2],
    pub drawer_opening: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub events: Vec<SceneEvent>,
    pub ticks: Vec<TickRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub success: bool,
    pub detail: BTreeMap<String, bool>,
}

impl SuccessReport {
    fn from_detail(detail: BTreeMap<String, bool>) -> Self {
        SuccessReport {
            success: detail.values().all(|v| *v),
            detail,
        }
    }

    /// Names of unmet criteria, comma separated.
    pub fn failed_criteria(&self) -> String {
        self.detail
            .iter()
            .filter(|(_, ok)| !**ok)
            .map(|(k, _)| k.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: Arc<TaskManifest>,
    pub model: Arc<DualArmModel>,
    pub seed: u64,
    pub tick: u64,
    pub dt: f64,
    pub joints: ActionVector26,
    pub ee: [PoseSE3; 2],
    pub objects: Vec<SceneObject>,
    pub drawer: Option<DrawerState>,
    pub hands: [HandState; 2],
    pub history: History,
    primary_spawn: [f64; 2],
    jitter_rng: ChaCha8Rng,
}

impl Scene {
    /// Canonical manifest and robot model.
    pub fn reset_task(task: TaskId, seed: u64) -> Self {
        Self::reset(
            Arc::new(TaskManifest::canonical(task)),
            Arc::new(DualArmModel::canonical()),
            seed,
        )
    }

    /// Same as `reset_task`, by task name.
    pub fn reset_named(task: &str, seed: u64) -> Result<Self, TaskError> {
        Ok(Self::reset_task(task.parse()?, seed))
    }

    pub fn reset(manifest: Arc<TaskManifest>, model: Arc<DualArmModel>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = &*manifest;
        let mut objects: Vec<SceneObject> = Vec::with_capacity(m.objects.len());
        for (i, spec) in m.objects.iter().enumerate() {
            let mut p = Vec3::from(spec.position);
            if let Some(b) = &spec.spawn_box {
                for k in 0..3 {
                    p[k] = rng.random_range(b.min[k]..=b.max[k]);
                }
            }
            let support = match &spec.parent {
                Some(name) => Support::Rider {
                    parent: m.object_index(name).expect("validated parent"),
                    rel: PoseSE3::from_translation(p.x, p.y, p.z),
                },
                None => Support::Static,
            };
            let pose = match support {
                Support::Rider { parent, rel } => objects[parent].pose.compose(&rel),
                _ => PoseSE3::new(p, Quaternion::IDENTITY),
            };
            objects.push(SceneObject {
                id: i as u16,
                name: spec.name.clone(),
                shape: spec.shape,
                kind: spec.kind,
                graspable: spec.graspable,
                class: None,
                pose,
                active: true,
                spawn_tick: 0,
                attached_to: None,
                support,
            });
        }
        if let Some(cv) = &m.conveyor {
            let classes: Vec<&String> = cv.classes.keys().collect();
            for e in &cv.spawn_schedule {
                let o = &mut objects[m.object_index(&e.item).expect("validated item")];
                o.class = Some(classes[rng.random_range(0..classes.len())].clone());
                o.spawn_tick = (e.time * m.tick_hz).round() as u64;
                o.active = o.spawn_tick == 0;
                if o.active {
                    o.support = Support::Belt {
                        anchor: o.pose.position,
                        since: 0,
                    };
                }
            }
        }
        let drawer = m.drawer.as_ref().map(|d| DrawerState {
            id: objects.len() as u16,
            opening: 0.0,
            pose: PoseSE3::new(Vec3::from(d.closed_position), Quaternion::IDENTITY),
            latch: None,
        });
        let primary = &objects[m.object_index(&m.heatmap.primary).expect("validated")];
        let primary_spawn = [primary.pose.position.x, primary.pose.position.y];
        let joints = model.neutral_action();
        let ee = Side::BOTH.map(|s| model.ee_pose(&joints, s));
        let mut scene = Scene {
            dt: m.dt(),
            manifest: manifest.clone(),
            model,
            seed,
            tick: 0,
            joints,
            ee,
            objects,
            drawer,
            hands: [HandState::default(); 2],
            history: History::default(),
            primary_spawn,
            jitter_rng: ChaCha8Rng::seed_from_u64(seed ^ JITTER_SALT),
        };
        scene.record();
        scene
    }

    /// Overrides the integration step (default `1 / tick_hz`).
    pub fn with_dt(mut self, dt: f64) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        self.dt = dt;
        self
    }

    pub fn task(&self) -> TaskId {
        self.manifest.task_id
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    /// Spawn (x, y) of the heatmap's primary object.
    pub fn primary_spawn(&self) -> [f64; 2] {
        self.primary_spawn
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    fn idx(&self, name: &str) -> usize {
        self.manifest.object_index(name).expect("validated name")
    }

    pub fn palm(&self, side: Side) -> &PoseSE3 {
        &self.ee[side.index()]
    }

    pub fn closure(&self, side: Side) -> f64 {
        self.model.hand_closure(&self.joints, side)
    }

    /// Object poses in id order; the drawer, if any, comes last.
    pub fn object_records(&self) -> Vec<ObjectRecord> {
        let mut out: Vec<ObjectRecord> = self
            .objects
            .iter()
            .map(|o| ObjectRecord {
                id: o.id,
                pose: o.pose.to_array().map(|v| v as f32),
            })
            .collect();
        if let Some(d) = &self.drawer {
            out.push(ObjectRecord {
                id: d.id,
                pose: d.pose.to_array().map(|v| v as f32),
            });
        }
        out
    }

    /// Object poses in full precision, same order as `object_records`.
    pub fn object_poses(&self) -> Vec<PoseSE3> {
        let mut v: Vec<PoseSE3> = self.objects.iter().map(|o| o.pose).collect();
        v.extend(self.drawer.as_ref().map(|d| d.pose));
        v
    }

    /// Advances one tick. Commands are expected to be filtered upstream;
    /// they are only clamped to joint limits here.
    pub fn step(&mut self, action: &ActionVector26) {
        self.tick += 1;
        let mut a = *action;
        self.model.clamp(&mut a);
        self.joints = a;
        self.ee = Side::BOTH.map(|s| self.model.ee_pose(&a, s));
        self.spawn_due();
        for side in Side::BOTH {
            self.try_grasp(side);
        }
        self.update_drawer();
        self.update_poses();
        self.pour();
        self.jitter();
        self.record();
    }

    fn spawn_due(&mut self) {
        for o in self.objects.iter_mut().filter(|o| !o.active && o.spawn_tick <= self.tick) {
            o.active = true;
            o.support = Support::Belt {
                anchor: o.pose.position,
                since: self.tick,
            };
            self.history.events.push(SceneEvent::Spawn {
                tick: self.tick,
                object: o.id,
            });
        }
    }

    /// Applies the grasp hysteresis for one hand: a hand that closes past
    /// the close threshold latches the drawer handle or attaches the nearest
    /// graspable object within reach; a hand that opens below the open
    /// threshold lets go. Returns the object held afterwards.
    pub fn try_grasp(&mut self, side: Side) -> Option<u16> {
        let c = self.manifest.constants;
        let closure = self.closure(side);
        let h = side.index();
        if !self.hands[h].closed && closure > c.close_threshold {
            self.hands[h].closed = true;
            if !self.latch_drawer(side) {
                self.attach_nearest(side);
            }
        } else if self.hands[h].closed && closure < c.open_threshold {
            self.hands[h].closed = false;
            self.release(side);
        }
        self.hands[h].holding.map(|i| i as u16)
    }

    fn latch_drawer(&mut self, side: Side) -> bool {
        let (Some(d), Some(spec)) = (&mut self.drawer, &self.manifest.drawer) else {
            return false;
        };
        let palm = self.ee[side.index()].position;
        if d.latch.is_some() || !spec.handle.contains(&d.pose.inverse().transform_point(&palm)) {
            return false;
        }
        d.latch = Some(DrawerLatch {
            side,
            palm0: palm,
            opening0: d.opening,
        });
        self.history.events.push(SceneEvent::DrawerLatch { tick: self.tick, side });
        true
    }

    fn attach_nearest(&mut self, side: Side) {
        let palm = self.ee[side.index()].position;
        let radius = self.manifest.constants.grasp_radius;
        let best = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.active && o.graspable && o.attached_to != Some(side))
            .map(|(i, o)| (i, (o.pose.position - palm).norm()))
            .filter(|(_, d)| *d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((i, _)) = best else { return };
        let from_other = self.objects[i].attached_to.is_some();
        if let Some(other) = self.objects[i].attached_to {
            self.hands[other.index()].holding = None;
            self.hands[other.index()].grip = None;
        }
        let o = &mut self.objects[i];
        o.attached_to = Some(side);
        o.support = Support::Static;
        self.hands[side.index()].holding = Some(i);
        self.hands[side.index()].grip = Some(self.ee[side.index()].inverse().compose(&o.pose));
        self.history.events.push(SceneEvent::Grasp {
            tick: self.tick,
            side,
            object: i as u16,
            from_other_hand: from_other,
        });
    }

    fn release(&mut self, side: Side) {
        let h = side.index();
        if let Some(d) = &mut self.drawer {
            if d.latch.is_some_and(|l| l.side == side) {
                d.latch = None;
                self.history.events.push(SceneEvent::DrawerRelease { tick: self.tick, side });
            }
        }
        let Some(i) = self.hands[h].holding.take() else { return };
        self.hands[h].grip = None;
        self.objects[i].attached_to = None;
        self.objects[i].support = self.support_at(i);
        self.history.events.push(SceneEvent::Release {
            tick: self.tick,
            side,
            object: i as u16,
        });
    }

    /// True when `ancestor` carries `i`, directly or transitively.
    fn carried_by(&self, mut i: usize, ancestor: usize) -> bool {
        while let Support::Rider { parent, .. } = self.objects[i].support {
            if parent == ancestor {
                return true;
            }
            i = parent;
        }
        false
    }

    /// Support for an object let go at its current pose.
    fn support_at(&self, i: usize) -> Support {
        let pose = self.objects[i].pose;
        let p = pose.position;
        let container = self.objects.iter().enumerate().find(|(j, c)| {
            *j != i && c.kind == ObjectKind::Container && !self.carried_by(*j, i) && c.contains_world(&p)
        });
        if let Some((j, c)) = container {
            return Support::Rider {
                parent: j,
                rel: c.pose.inverse().compose(&pose),
            };
        }
        if let (Some(d), Some(spec)) = (&self.drawer, &self.manifest.drawer) {
            if spec.basket.contains(&d.pose.inverse().transform_point(&p)) {
                return Support::Drawer {
                    rel: d.pose.inverse().compose(&pose),
                };
            }
        }
        if let Some(cv) = &self.manifest.conveyor {
            if cv.region.contains(&p) {
                return Support::Belt {
                    anchor: p,
                    since: self.tick,
                };
            }
        }
        Support::Static
    }

    fn update_drawer(&mut self) {
        let (Some(d), Some(spec)) = (&mut self.drawer, &self.manifest.drawer) else {
            return;
        };
        let axis = Vec3::from(spec.axis).normalize();
        if let Some(l) = d.latch {
            let palm = self.ee[l.side.index()].position;
            d.opening = (l.opening0 + axis.dot(&(palm - l.palm0))).clamp(0.0, spec.max_travel);
        }
        d.pose.position = Vec3::from(spec.closed_position) + axis * d.opening;
    }

    fn depth(&self, mut i: usize) -> usize {
        let mut n = 0;
        while let Support::Rider { parent, .. } = self.objects[i].support {
            n += 1;
            i = parent;
        }
        n
    }

    fn update_poses(&mut self) {
        for side in Side::BOTH {
            let hand = self.hands[side.index()];
            if let (Some(i), Some(grip)) = (hand.holding, hand.grip) {
                self.objects[i].pose = self.ee[side.index()].compose(&grip);
            }
        }
        if let Some(cv) = &self.manifest.conveyor {
            let v = Vec3::from(cv.velocity);
            for o in self.objects.iter_mut().filter(|o| o.attached_to.is_none()) {
                if let Support::Belt { anchor, since } = o.support {
                    let p = anchor + v * ((self.tick - since) as f64 * self.dt);
                    o.pose.position = p;
                    if !cv.region.contains(&p) {
                        o.support = Support::Static;
                    }
                }
            }
        }
        let drawer_pose = self.drawer.as_ref().map(|d| d.pose);
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by_key(|&i| self.depth(i));
        for i in order {
            if self.objects[i].attached_to.is_some() {
                continue;
            }
            match self.objects[i].support {
                Support::Rider { parent, rel } => self.objects[i].pose = self.objects[parent].pose.compose(&rel),
                Support::Drawer { rel } => {
                    self.objects[i].pose = drawer_pose.expect("drawer support needs a drawer").compose(&rel)
                }
                _ => {}
            }
        }
    }

    /// Contents of a container tilted past the pour angle drop straight
    /// down from its mouth into the container below, or onto the table.
    fn pour(&mut self) {
        let limit = self.manifest.constants.pour_angle;
        for c in 0..self.objects.len() {
            if self.objects[c].kind != ObjectKind::Container || self.objects[c].tilt() <= limit {
                continue;
            }
            let riders: Vec<usize> = (0..self.objects.len())
                .filter(|&i| matches!(self.objects[i].support, Support::Rider { parent, .. } if parent == c))
                .collect();
            for i in riders {
                let src = &self.objects[c];
                let mouth = src.pose.transform_point(&Vec3::new(0.0, 0.0, 0.5 * src.shape.height()));
                let half = 0.5 * self.objects[i].shape.height();
                let target = self
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| {
                        *j != c && *j != i && o.kind == ObjectKind::Container && !self.carried_by(*j, c) && {
                            let local = o.pose.inverse().transform_point(&mouth);
                            let floor = Vec3::new(local.x, local.y, 0.0);
                            o.tilt() < 0.5 * limit && o.shape.contains_local(&floor) && local.z >= -0.5 * o.shape.height()
                        }
                    })
                    .max_by(|a, b| a.1.pose.position.z.total_cmp(&b.1.pose.position.z))
                    .map(|(j, _)| j);
                let (pose, support) = match target {
                    Some(j) => {
                        let o = &self.objects[j];
                        let local = o.pose.inverse().transform_point(&mouth);
                        let rel = PoseSE3::from_translation(local.x, local.y, -0.5 * o.shape.height() + half);
                        (o.pose.compose(&rel), Support::Rider { parent: j, rel })
                    }
                    None => (
                        PoseSE3::new(Vec3::new(mouth.x, mouth.y, half), self.objects[i].pose.orientation),
                        Support::Static,
                    ),
                };
                self.objects[i].pose = pose;
                self.objects[i].support = support;
                self.history.events.push(SceneEvent::Pour {
                    tick: self.tick,
                    from: c as u16,
                    object: i as u16,
                    into: target.map(|j| j as u16),
                });
            }
        }
    }

    fn jitter(&mut self) {
        let amp = self.manifest.constants.berry_jitter;
        if amp <= 0.0 {
            return;
        }
        for o in self.objects.iter_mut().filter(|o| o.name == "berry") {
            if let Support::Rider { .. } = o.support {
                let d = Vec3::new(
                    self.jitter_rng.random_range(-amp..=amp),
                    self.jitter_rng.random_range(-amp..=amp),
                    0.0,
                );
                o.pose.position += d;
            }
        }
    }

    fn record(&mut self) {
        let attached = self.hands.map(|h| h.holding.map(|i| i as u16));
        self.history.ticks.push(TickRecord {
            tick: self.tick,
            positions: self.objects.iter().map(|o| o.pose.position).collect(),
            attached,
            drawer_opening: self.drawer.as_ref().map(|d| d.opening),
        });
    }

    /// Task predicate over the current state and the recorded history.
    pub fn evaluate_success(&self) -> SuccessReport {
        let c = &self.manifest.constants;
        let mut detail = BTreeMap::new();
        match self.task() {
            TaskId::KitchenCleanup => {
                let item = self.idx("item");
                let basket = &self.objects[self.idx("basket")];
                let o = &self.objects[item];
                detail.insert("inBasket".into(), basket.contains_world(&o.pose.position));
                detail.insert("released".into(), o.attached_to.is_none());
                let first = |s: Side| {
                    self.history.events.iter().find_map(|e| match *e {
                        SceneEvent::Grasp { tick, side, object, .. } if side == s && object as usize == item => Some(tick),
                        _ => None,
                    })
                };
                let handover = matches!((first(Side::Left), first(Side::Right)), (Some(l), Some(r)) if l < r);
                detail.insert("handover".into(), handover);
            }
            TaskId::AirFryer => {
                let spec = self.manifest.drawer.as_ref().expect("validated drawer");
                let d = self.drawer.as_ref().expect("validated drawer");
                let opened = self
                    .history
                    .ticks
                    .iter()
                    .filter_map(|t| t.drawer_opening)
                    .any(|o| o > c.open_frac * spec.max_travel);
                let food = &self.objects[self.idx("food")];
                let inside = spec.basket.contains(&d.pose.inverse().transform_point(&food.pose.position));
                detail.insert("opened".into(), opened);
                detail.insert("foodInside".into(), inside);
                detail.insert("closed".into(), d.opening < c.close_frac * spec.max_travel);
            }
            TaskId::CanStacking => {
                let (a, b) = (self.idx("can_a"), self.idx("can_b"));
                let height = 0.5 * (self.objects[a].shape.height() + self.objects[b].shape.height());
                let check = |pa: &Vec3, pb: &Vec3| {
                    let (top, bottom) = if pa.z >= pb.z { (pa, pb) } else { (pb, pa) };
                    let xy = (top.x - bottom.x).hypot(top.y - bottom.y) <= c.stack_tol_xy;
                    let z = (top.z - (bottom.z + height)).abs() < c.stack_tol_z;
                    (xy, z)
                };
                let (xy, z) = check(&self.objects[a].pose.position, &self.objects[b].pose.position);
                let released = self.hands.iter().all(|h| h.holding.is_none());
                let n = c.stable_frames;
                let ticks = &self.history.ticks;
                let stable = ticks.len() >= n
                    && ticks[ticks.len() - n..].iter().all(|t| {
                        let (xy, z) = check(&t.positions[a], &t.positions[b]);
                        xy && z && t.attached.iter().all(Option::is_none)
                    });
                detail.insert("xyAlignment".into(), xy);
                detail.insert("zContact".into(), z);
                detail.insert("released".into(), released);
                detail.insert("stable".into(), stable);
            }
            TaskId::CupToCup => {
                let (left, right, berry) = (self.idx("cup_left"), self.idx("cup_right"), self.idx("berry"));
                let inside = self.objects[left].contains_world(&self.objects[berry].pose.position);
                let pour_tick = self.history.events.iter().rev().find_map(|e| match *e {
                    SceneEvent::Pour { tick, object, into, .. }
                        if object as usize == berry && into == Some(left as u16) =>
                    {
                        Some(tick)
                    }
                    _ => None,
                });
                let lifted = pour_tick.and_then(|t| self.history.ticks.iter().find(|r| r.tick == t)).is_some_and(|r| {
                    [left, right].iter().all(|&cup| {
                        r.positions[cup].z - 0.5 * self.objects[cup].shape.height() > c.lift_height
                    })
                });
                detail.insert("berryInLeftCup".into(), inside);
                detail.insert("liftedDuringTransfer".into(), lifted);
            }
            TaskId::AssemblyLine => {
                let cv = self.manifest.conveyor.as_ref().expect("validated conveyor");
                for e in &cv.spawn_schedule {
                    let o = &self.objects[self.idx(&e.item)];
                    let ok = o.active
                        && o.attached_to.is_none()
                        && o.class.as_ref().is_some_and(|cls| {
                            self.objects[self.idx(&cv.classes[cls])].contains_world(&o.pose.position)
                        });
                    detail.insert(format!("{}Sorted", e.item), ok);
                }
            }
        }
        SuccessReport::from_detail(detail)
    }
}
