//! Synthetic two-agent driving sequences.
//!
//! A sequence is a run of short clips. Each clip lays out a straight road with
//! a random global heading, spawns moving and parked vehicles plus roadside
//! obstacles, and drives the ego agent along it while the reference agent
//! keeps the scheduled separation. Clouds are ray cast independently for each
//! agent, so objects hidden from one agent may be plain to the other.

pub mod io;
mod lidar;
mod reference;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{transform_box, wrap_angle, Box3, Point3, Pose};
use crate::rng::{derive_seed, stream, TAG_SPAWN};

pub use lidar::{render_cloud, PointLabel, RenderedCloud, SensorModel, WorldState};
pub use reference::{distance_recall_curve, make_reference_predictions, NoiseModel, RecallBin};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub velocity: [f64; 2],
}

impl VehicleState {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn advanced(&self, dt: f64) -> VehicleState {
        let mut v = *self;
        v.bbox.cx += self.velocity[0] * dt;
        v.bbox.cy += self.velocity[1] * dt;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Reference,
    #[serde(rename = "self")]
    SelfTrained,
    GroundTruth,
}

/// A box with the scores attached to it along the labelling pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranker_score: Option<f64>,
    pub source: LabelSource,
}

impl LabeledBox {
    pub fn ground_truth(bbox: Box3) -> Self {
        LabeledBox {
            bbox,
            confidence: 1.0,
            ranker_score: None,
            source: LabelSource::GroundTruth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub frame_id: u64,
    pub clip_id: u64,
    pub timestamp: f64,
    pub frame_dt: f64,
    pub ego_pose: Pose,
    pub ref_pose: Pose,
    pub gt_boxes: Vec<VehicleState>,
    #[serde(default)]
    pub obstacles: Vec<Box3>,
    #[serde(with = "io::flat_points")]
    pub ego_cloud: Vec<Point3>,
    #[serde(with = "io::flat_points")]
    pub ref_cloud: Vec<Point3>,
    /// Vehicle returns per ground-truth box, aligned with `gt_boxes`.
    pub ego_hits: Vec<u32>,
    pub ref_hits: Vec<u32>,
    pub ego_ref_distance: f64,
}

impl SceneFrame {
    pub fn world_to_ego(&self) -> Pose {
        self.ego_pose.inverse()
    }

    pub fn ref_to_ego(&self) -> Pose {
        Pose::relative(&self.ref_pose, &self.ego_pose)
    }

    /// Ground truth in the ego frame for boxes with at least `min_points` ego returns.
    pub fn ego_gt(&self, min_points: u32) -> Vec<Box3> {
        let to_ego = self.world_to_ego();
        self.gt_boxes
            .iter()
            .zip(&self.ego_hits)
            .filter(|(_, &n)| n >= min_points)
            .map(|(v, _)| transform_box(&v.bbox, &to_ego))
            .collect()
    }

    pub fn world_state(&self) -> WorldState {
        WorldState {
            vehicles: self.gt_boxes.clone(),
            obstacles: self.obstacles.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_frames: usize,
    pub frames_per_clip: usize,
    pub frame_dt: f64,
    pub n_vehicles: usize,
    pub n_obstacles: usize,
    /// Ego–reference distance at the first and last frame; linear in between.
    pub separation: [f64; 2],
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub max_speed: f64,
    pub parked_fraction: f64,
    /// Longitudinal spawn margin beyond the agents' extent.
    pub spawn_margin: f64,
    pub ego_sensor: SensorModel,
    pub ref_sensor: SensorModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_frames: 200,
            frames_per_clip: 10,
            frame_dt: 0.1,
            n_vehicles: 24,
            n_obstacles: 14,
            separation: [5.0, 95.0],
            length_range: [3.5, 6.0],
            width_range: [1.6, 2.2],
            height_range: [1.4, 2.0],
            max_speed: 27.0,
            parked_fraction: 0.3,
            spawn_margin: 70.0,
            ego_sensor: SensorModel::default(),
            ref_sensor: SensorModel::default(),
        }
    }
}

const LANE_WIDTH: f64 = 3.5;
const PARKING_OFFSET: f64 = 9.0;
const SIDEWALK: [f64; 2] = [11.0, 15.0];

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::config("n_frames", "must be >= 1"));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::config("frames_per_clip", "must be >= 1"));
        }
        if !(self.frame_dt > 0.0) {
            return Err(Error::config("frame_dt", "must be > 0"));
        }
        let [a, b] = self.separation;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::config("separation", "distances must be positive"));
        }
        for (name, r, floor) in [
            ("length_range", self.length_range, 0.5),
            ("width_range", self.width_range, 0.3),
            ("height_range", self.height_range, 0.3),
        ] {
            if !(r[0] >= floor && r[1] >= r[0]) {
                return Err(Error::config(name, format!("needs {floor} <= lo <= hi")));
            }
        }
        if !(self.max_speed >= 0.0) {
            return Err(Error::config("max_speed", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.parked_fraction) {
            return Err(Error::config("parked_fraction", "must lie in [0, 1]"));
        }
        if !(self.spawn_margin >= 0.0) {
            return Err(Error::config("spawn_margin", "must be >= 0"));
        }
        self.ego_sensor.validate()?;
        self.ref_sensor.validate()?;
        Ok(())
    }

    pub fn scheduled_distance(&self, frame: usize) -> f64 {
        let [a, b] = self.separation;
        if self.n_frames <= 1 {
            a
        } else {
            a + (b - a) * frame as f64 / (self.n_frames - 1) as f64
        }
    }
}

struct ClipLayout {
    origin: [f64; 2],
    heading: f64,
    ego_speed: f64,
    ego_lane: f64,
    ref_lane: f64,
    ref_side: f64,
}

impl ClipLayout {
    /// Road coordinates (s along, t across) to world.
    fn to_world(&self, s: f64, t: f64) -> [f64; 2] {
        let (sn, cs) = self.heading.sin_cos();
        [
            self.origin[0] + cs * s - sn * t,
            self.origin[1] + sn * s + cs * t,
        ]
    }

    fn agent_road_positions(&self, t: f64, distance: f64) -> ([f64; 2], [f64; 2]) {
        let ego = [self.ego_speed * t, self.ego_lane];
        let dt = (self.ref_lane - self.ego_lane).clamp(-distance, distance);
        let ds = (distance * distance - dt * dt).max(0.0).sqrt();
        (ego, [ego[0] + self.ref_side * ds, self.ego_lane + dt])
    }

    fn pose(&self, road: [f64; 2]) -> Pose {
        let w = self.to_world(road[0], road[1]);
        Pose {
            x: w[0],
            y: w[1],
            z: 0.0,
            yaw: self.heading,
        }
    }
}

/// Generates a deterministic sequence for `cfg` and `seed`.
pub fn generate_sequence(cfg: &WorldConfig, seed: u64) -> Result<Vec<SceneFrame>> {
    cfg.validate()?;
    let n_clips = cfg.n_frames.div_ceil(cfg.frames_per_clip);
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for clip in 0..n_clips {
        let mut rng = stream(seed, &[TAG_SPAWN, clip as u64]);
        let layout = ClipLayout {
            origin: [
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
            ],
            heading: wrap_angle(rng.random_range(-PI..PI)),
            ego_speed: rng.random_range(6.0..14.0),
            ego_lane: -0.5 * LANE_WIDTH,
            ref_lane: if rng.random_bool(0.5) {
                -0.5 * LANE_WIDTH
            } else {
                -1.5 * LANE_WIDTH
            },
            ref_side: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        };
        let first = clip * cfg.frames_per_clip;
        let last = ((clip + 1) * cfg.frames_per_clip).min(cfg.n_frames);
        let agents: Vec<AgentSnapshot> = (first..last)
            .map(|k| {
                let t = (k - first) as f64 * cfg.frame_dt;
                let (ego, reference) = layout.agent_road_positions(t, cfg.scheduled_distance(k));
                AgentSnapshot { t, ego, reference }
            })
            .collect();
        let (vehicles, obstacles) = spawn_clip(cfg, &layout, &agents, &mut rng);
        for (a, k) in agents.iter().zip(first..last) {
            let world = WorldState {
                vehicles: vehicles.iter().map(|v| v.advanced(a.t)).collect(),
                obstacles: obstacles.clone(),
            };
            let poses = (layout.pose(a.ego), layout.pose(a.reference));
            frames.push(build_frame(cfg, seed, k, clip, world, poses));
        }
    }
    Ok(frames)
}

struct AgentSnapshot {
    t: f64,
    ego: [f64; 2],
    reference: [f64; 2],
}

fn build_frame(
    cfg: &WorldConfig,
    seed: u64,
    k: usize,
    clip: usize,
    world: WorldState,
    (ego_pose, ref_pose): (Pose, Pose),
) -> SceneFrame {
    let ego = render_cloud(
        &world,
        &ego_pose,
        &cfg.ego_sensor,
        derive_seed(seed, &[k as u64, 0]),
    );
    let refc = render_cloud(
        &world,
        &ref_pose,
        &cfg.ref_sensor,
        derive_seed(seed, &[k as u64, 1]),
    );
    let hits = |c: &RenderedCloud| -> Vec<u32> {
        world
            .vehicles
            .iter()
            .map(|v| c.count(PointLabel::Vehicle(v.id)) as u32)
            .collect()
    };
    SceneFrame {
        frame_id: k as u64,
        clip_id: clip as u64,
        timestamp: k as f64 * cfg.frame_dt,
        frame_dt: cfg.frame_dt,
        ego_pose,
        ref_pose,
        ego_hits: hits(&ego),
        ref_hits: hits(&refc),
        gt_boxes: world.vehicles,
        obstacles: world.obstacles,
        ego_cloud: ego.points,
        ref_cloud: refc.points,
        ego_ref_distance: ego_pose.bev_distance(&ref_pose),
    }
}

/// `frame` seen by a reference agent at `ref_pose` instead: the reference
/// cloud, its hit counts and the separation are recomputed.
pub fn with_reference_pose(
    frame: &SceneFrame,
    ref_pose: Pose,
    sensor: &SensorModel,
    seed: u64,
) -> Result<SceneFrame> {
    sensor.validate()?;
    let world = frame.world_state();
    let refc = render_cloud(
        &world,
        &ref_pose,
        sensor,
        derive_seed(seed, &[frame.frame_id, 1]),
    );
    Ok(SceneFrame {
        ref_pose,
        ref_hits: world
            .vehicles
            .iter()
            .map(|v| refc.count(PointLabel::Vehicle(v.id)) as u32)
            .collect(),
        ref_cloud: refc.points,
        ego_ref_distance: frame.ego_pose.bev_distance(&ref_pose),
        ..frame.clone()
    })
}

fn spawn_clip(
    cfg: &WorldConfig,
    layout: &ClipLayout,
    agents: &[AgentSnapshot],
    rng: &mut ChaCha8Rng,
) -> (Vec<VehicleState>, Vec<Box3>) {
    let s_lo = agents
        .iter()
        .map(|a| a.ego[0].min(a.reference[0]))
        .fold(f64::MAX, f64::min)
        - cfg.spawn_margin;
    let s_hi = agents
        .iter()
        .map(|a| a.ego[0].max(a.reference[0]))
        .fold(f64::MIN, f64::max)
        + cfg.spawn_margin;
    let times: Vec<f64> = agents.iter().map(|a| a.t).collect();
    let sensors: Vec<[Point3; 2]> = agents
        .iter()
        .map(|a| {
            let e = layout.to_world(a.ego[0], a.ego[1]);
            let r = layout.to_world(a.reference[0], a.reference[1]);
            [[e[0], e[1], 0.0], [r[0], r[1], 0.0]]
        })
        .collect();
    let yaw_noise = Normal::new(0.0, 0.03).unwrap();
    let lat_noise = Normal::new(0.0, 0.2).unwrap();

    let mut vehicles: Vec<VehicleState> = Vec::with_capacity(cfg.n_vehicles);
    let mut attempts = 0;
    while vehicles.len() < cfg.n_vehicles && attempts < cfg.n_vehicles * 60 {
        attempts += 1;
        let parked = rng.random_bool(cfg.parked_fraction);
        let (t, dir, speed) = if parked {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let dir = if rng.random_bool(0.5) { 0.0 } else { PI };
            (side * PARKING_OFFSET + lat_noise.sample(rng), dir, 0.0)
        } else {
            let lane = rng.random_range(0..4) as f64;
            let t = (lane - 1.5) * LANE_WIDTH + lat_noise.sample(rng).clamp(-0.4, 0.4);
            // right-hand traffic: lanes left of the centre line run against the road heading
            let dir = if t < 0.0 { 0.0 } else { PI };
            // urban traffic: mostly slow, occasionally near the limit
            let speed = cfg.max_speed * rng.random::<f64>().powi(2);
            (t, dir, speed)
        };
        let s = rng.random_range(s_lo..s_hi);
        let size = [
            rng.random_range(cfg.length_range[0]..=cfg.length_range[1]),
            rng.random_range(cfg.width_range[0]..=cfg.width_range[1]),
            rng.random_range(cfg.height_range[0]..=cfg.height_range[1]),
        ];
        let yaw = wrap_angle(layout.heading + dir + yaw_noise.sample(rng));
        let c = layout.to_world(s, t);
        let v = VehicleState {
            id: vehicles.len() as u32,
            bbox: Box3 {
                cx: c[0],
                cy: c[1],
                cz: 0.5 * size[2],
                l: size[0],
                w: size[1],
                h: size[2],
                yaw,
            },
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
        };
        if placement_ok(&v, &vehicles, &times, &sensors) {
            vehicles.push(v);
        }
    }

    let mut obstacles: Vec<Box3> = Vec::with_capacity(cfg.n_obstacles);
    let mut attempts = 0;
    while obstacles.len() < cfg.n_obstacles && attempts < cfg.n_obstacles * 60 {
        attempts += 1;
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let t = side * rng.random_range(SIDEWALK[0]..SIDEWALK[1]);
        let s = rng.random_range(s_lo..s_hi);
        let c = layout.to_world(s, t);
        let (l, w, h) = if rng.random_bool(0.5) {
            let d = rng.random_range(0.2..0.4);
            (d, d, rng.random_range(2.5..5.0))
        } else {
            (
                rng.random_range(0.8..2.5),
                rng.random_range(0.6..1.4),
                rng.random_range(0.6..1.5),
            )
        };
        let b = Box3 {
            cx: c[0],
            cy: c[1],
            cz: 0.5 * h,
            l,
            w,
            h,
            yaw: wrap_angle(rng.random_range(-PI..PI)),
        };
        let clear = obstacles
            .iter()
            .all(|o| crate::geom::bev_intersection(o, &b) == 0.0);
        if clear {
            obstacles.push(b);
        }
    }
    (vehicles, obstacles)
}

fn placement_ok(
    v: &VehicleState,
    placed: &[VehicleState],
    times: &[f64],
    sensors: &[[Point3; 2]],
) -> bool {
    for (ti, &t) in times.iter().enumerate() {
        let mut grown = v.advanced(t).bbox;
        grown.l += 1.0;
        grown.w += 1.0;
        grown.cz = 0.0;
        if sensors[ti].iter().any(|&p| {
            let mut clearance = grown;
            clearance.l += 2.0;
            clearance.w += 2.0;
            clearance.contains(p, 1.0)
        }) {
            return false;
        }
        for o in placed {
            if crate::geom::bev_intersection(&grown, &o.advanced(t).bbox) > 0.0 {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_frames: 12,
            frames_per_clip: 4,
            n_vehicles: 10,
            n_obstacles: 4,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_sequence(&small(), 5).unwrap();
        let b = generate_sequence(&small(), 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_sequence(&small(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_world_still_has_ground() {
        let cfg = WorldConfig {
            n_vehicles: 0,
            n_obstacles: 0,
            ..small()
        };
        for f in generate_sequence(&cfg, 1).unwrap() {
            assert!(f.gt_boxes.is_empty());
            assert!(!f.ego_cloud.is_empty());
            assert!(!f.ref_cloud.is_empty());
        }
    }

    #[test]
    fn separation_schedule_is_followed() {
        let cfg = WorldConfig {
            n_frames: 30,
            frames_per_clip: 10,
            separation: [10.0, 90.0],
            n_vehicles: 5,
            ..WorldConfig::default()
        };
        let frames = generate_sequence(&cfg, 2).unwrap();
        for (k, f) in frames.iter().enumerate() {
            let want = 10.0 + 80.0 * k as f64 / 29.0;
            let got = f.ego_pose.bev_distance(&f.ref_pose);
            assert!((got - want).abs() < 0.5, "frame {k}: {got} vs {want}");
            assert!((f.ego_ref_distance - got).abs() < 1e-9);
        }
    }

    #[test]
    fn vehicles_move_with_their_velocity() {
        let frames = generate_sequence(&small(), 3).unwrap();
        let (a, b) = (&frames[0], &frames[1]);
        assert_eq!(a.clip_id, b.clip_id);
        for (va, vb) in a.gt_boxes.iter().zip(&b.gt_boxes) {
            assert!((vb.bbox.cx - va.bbox.cx - va.velocity[0] * a.frame_dt).abs() < 1e-9);
            assert!((vb.bbox.cy - va.bbox.cy - va.velocity[1] * a.frame_dt).abs() < 1e-9);
            assert!(va.speed() <= 27.0 + 1e-9);
            assert!((3.5..=6.0).contains(&va.bbox.l));
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = WorldConfig {
            frame_dt: 0.0,
            ..small()
        };
        let err = generate_sequence(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("frame_dt"), "{err}");
        let cfg = WorldConfig {
            ego_sensor: SensorModel {
                dropout_prob: 1.0,
                ..SensorModel::default()
            },
            ..small()
        };
        let err = generate_sequence(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("dropout_prob"), "{err}");
    }
}
