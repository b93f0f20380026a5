//! BEV ray casting against box-shaped scene objects.
//!
//! Each azimuth ray stops at the first footprint it enters. Elevation channels
//! then decide whether a return lands on that object's side face, on the
//! ground in front of it, on the ground behind it (beam passes over) or nowhere.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Box3, Point3, Pose};
use crate::rng::{stream, TAG_RENDER};

use super::VehicleState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    pub beam_count: usize,
    pub azimuth_resolution: f64,
    pub max_range: f64,
    pub hit_jitter_sigma: f64,
    pub dropout_prob: f64,
    /// Sensor height above the agent's ground plane.
    pub mount_height: f64,
    /// Elevation of the lowest and highest channel, radians.
    pub elevation_range: [f64; 2],
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            beam_count: 32,
            azimuth_resolution: 0.3f64.to_radians(),
            max_range: 100.0,
            hit_jitter_sigma: 0.02,
            dropout_prob: 0.05,
            mount_height: 1.9,
            elevation_range: [(-10.0f64).to_radians(), 2.0f64.to_radians()],
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if self.beam_count == 0 {
            return Err(Error::config("sensor.beam_count", "must be >= 1"));
        }
        if !(self.azimuth_resolution > 0.0 && self.azimuth_resolution < 1.0) {
            return Err(Error::config(
                "sensor.azimuth_resolution",
                "must lie in (0, 1) rad",
            ));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::config("sensor.max_range", "must be > 0"));
        }
        if !(self.hit_jitter_sigma >= 0.0) {
            return Err(Error::config("sensor.hit_jitter_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config("sensor.dropout_prob", "must lie in [0, 1)"));
        }
        if !(self.mount_height > 0.0) {
            return Err(Error::config("sensor.mount_height", "must be > 0"));
        }
        let [lo, hi] = self.elevation_range;
        if !(lo < hi && lo > -1.5 && hi < 1.5) {
            return Err(Error::config(
                "sensor.elevation_range",
                "needs lo < hi within (-1.5, 1.5) rad",
            ));
        }
        Ok(())
    }

    fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.elevation_range;
        if self.beam_count == 1 {
            return vec![0.5 * (lo + hi)];
        }
        let step = (hi - lo) / (self.beam_count - 1) as f64;
        (0..self.beam_count).map(|k| lo + step * k as f64).collect()
    }
}

/// What a return hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointLabel {
    Ground,
    Vehicle(u32),
    Obstacle(u32),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub vehicles: Vec<VehicleState>,
    pub obstacles: Vec<Box3>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderedCloud {
    pub points: Vec<Point3>,
    pub labels: Vec<PointLabel>,
}

impl RenderedCloud {
    pub fn count(&self, label: PointLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

// Vehicle bodies sit this far inside their bounding boxes, so returns land
// inside the annotated box rather than on its boundary.
const BODY_INSET: f64 = 0.15;

// Range quantisation of the emitted returns.
const QUANTUM: f64 = 1e-3;

fn quantize(v: f64) -> f64 {
    (v / QUANTUM).round() * QUANTUM
}

struct Target {
    local: Box3,
    label: PointLabel,
    reach: f64,
}

/// Ray entry distance into a box footprint, in the box-local slab formulation.
fn ray_entry(b: &Box3, dir: [f64; 2]) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let o = [-(c * b.cx + s * b.cy), -(-s * b.cx + c * b.cy)];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]];
    let half = [0.5 * b.l, 0.5 * b.w];
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for k in 0..2 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
        } else {
            let t1 = (-half[k] - o[k]) / d[k];
            let t2 = (half[k] - o[k]) / d[k];
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
    }
    if tmax < tmin.max(0.0) {
        None
    } else {
        Some(tmin.max(0.0))
    }
}

/// Renders one agent's cloud, expressed in that agent's frame.
pub fn render_cloud(
    world: &WorldState,
    agent_pose: &Pose,
    sensor: &SensorModel,
    seed: u64,
) -> RenderedCloud {
    let to_agent = agent_pose.inverse();
    let mut targets: Vec<Target> = Vec::new();
    let mut push = |b: &Box3, label: PointLabel| {
        let local = crate::geom::transform_box(b, &to_agent);
        let reach = local.bev_range() - 0.5 * local.bev_diagonal();
        if reach <= sensor.max_range {
            targets.push(Target {
                local,
                label,
                reach,
            });
        }
    };
    for v in &world.vehicles {
        let mut body = v.bbox;
        body.l = (body.l - 2.0 * BODY_INSET).max(0.5 * body.l);
        body.w = (body.w - 2.0 * BODY_INSET).max(0.5 * body.w);
        push(&body, PointLabel::Vehicle(v.id));
    }
    for (i, o) in world.obstacles.iter().enumerate() {
        push(o, PointLabel::Obstacle(i as u32));
    }

    let elevations: Vec<f64> = sensor.elevations();
    let tans: Vec<f64> = elevations.iter().map(|e| e.tan()).collect();
    let mut rng = stream(seed, &[TAG_RENDER]);
    let jitter = Normal::new(0.0, sensor.hit_jitter_sigma.max(0.0)).unwrap();
    let n_az = (std::f64::consts::TAU / sensor.azimuth_resolution).round() as usize;
    let mount = sensor.mount_height;

    let mut out = RenderedCloud::default();
    for ia in 0..n_az {
        let phi = -std::f64::consts::PI + (ia as f64 + 0.5) * std::f64::consts::TAU / n_az as f64;
        let dir = [phi.cos(), phi.sin()];
        let mut hit: Option<(f64, usize)> = None;
        for (ti, t) in targets.iter().enumerate() {
            if hit.is_some_and(|(best, _)| t.reach > best) {
                continue;
            }
            if let Some(r) = ray_entry(&t.local, dir) {
                if r <= sensor.max_range && hit.is_none_or(|(best, _)| r < best) {
                    hit = Some((r, ti));
                }
            }
        }
        for &tan in &tans {
            let ground_r = if tan < 0.0 { Some(mount / -tan) } else { None };
            let mut ret: Option<(f64, f64, PointLabel)> = None;
            match hit {
                Some((r, ti)) if ground_r.is_none_or(|g| g >= r) => {
                    let t = &targets[ti];
                    let z = mount + r * tan;
                    let bottom = t.local.cz - 0.5 * t.local.h;
                    let top = t.local.cz + 0.5 * t.local.h;
                    if z >= bottom && z <= top {
                        ret = Some((r, z, t.label));
                    } else if let Some(g) = ground_r {
                        // passes over the object and lands behind it
                        if z > top && g <= sensor.max_range {
                            ret = Some((g, 0.0, PointLabel::Ground));
                        }
                    }
                }
                _ => {
                    if let Some(g) = ground_r {
                        if g <= sensor.max_range {
                            ret = Some((g, 0.0, PointLabel::Ground));
                        }
                    }
                }
            }
            let Some((r, z, label)) = ret else { continue };
            if sensor.dropout_prob > 0.0 && rng.random::<f64>() < sensor.dropout_prob {
                continue;
            }
            let mut p = [r * dir[0], r * dir[1], z];
            if sensor.hit_jitter_sigma > 0.0 {
                for v in p.iter_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
            out.points
                .push([quantize(p[0]), quantize(p[1]), quantize(p[2])]);
            out.labels.push(label);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car_at(id: u32, x: f64, y: f64) -> VehicleState {
        VehicleState {
            id,
            bbox: Box3::new([x, y, 0.8], [4.5, 1.9, 1.6], 0.0).unwrap(),
            velocity: [0.0, 0.0],
        }
    }

    fn clean_sensor() -> SensorModel {
        SensorModel {
            hit_jitter_sigma: 0.0,
            dropout_prob: 0.0,
            ..SensorModel::default()
        }
    }

    #[test]
    fn ray_entry_hits_front_face() {
        let b = Box3::new([10.0, 0.0, 0.0], [4.0, 2.0, 1.0], 0.0).unwrap();
        assert!((ray_entry(&b, [1.0, 0.0]).unwrap() - 8.0).abs() < 1e-12);
        assert!(ray_entry(&b, [-1.0, 0.0]).is_none());
        assert!(ray_entry(&b, [0.0, 1.0]).is_none());
    }

    #[test]
    fn point_count_falls_with_range() {
        let s = clean_sensor();
        let near = WorldState {
            vehicles: vec![car_at(0, 10.0, 0.0)],
            obstacles: vec![],
        };
        let far = WorldState {
            vehicles: vec![car_at(0, 40.0, 0.0)],
            obstacles: vec![],
        };
        let a = render_cloud(&near, &Pose::IDENTITY, &s, 1).count(PointLabel::Vehicle(0));
        let b = render_cloud(&far, &Pose::IDENTITY, &s, 1).count(PointLabel::Vehicle(0));
        assert!(a > b && b > 0, "near {a} far {b}");
    }

    #[test]
    fn occluded_box_gets_no_points() {
        let s = SensorModel::default();
        let mut blocker = car_at(0, 10.0, 0.0);
        blocker.bbox.w = 6.0;
        blocker.bbox.l = 2.0;
        let world = WorldState {
            vehicles: vec![blocker, car_at(1, 30.0, 0.0)],
            obstacles: vec![],
        };
        let c = render_cloud(&world, &Pose::IDENTITY, &s, 3);
        assert!(c.count(PointLabel::Vehicle(0)) > 0);
        assert_eq!(c.count(PointLabel::Vehicle(1)), 0);
    }

    #[test]
    fn deterministic_without_noise() {
        let s = clean_sensor();
        let world = WorldState {
            vehicles: vec![car_at(0, 12.0, 3.0)],
            obstacles: vec![],
        };
        let pose = Pose::new(1.0, -2.0, 0.0, 0.4).unwrap();
        let a = render_cloud(&world, &pose, &s, 9);
        let b = render_cloud(&world, &pose, &s, 9);
        assert_eq!(a, b);
        assert!(a.count(PointLabel::Ground) > 0);
    }

    #[test]
    fn returns_are_in_agent_frame() {
        let s = clean_sensor();
        let world = WorldState {
            vehicles: vec![car_at(0, 20.0, 5.0)],
            obstacles: vec![],
        };
        let pose = Pose::new(15.0, 5.0, 0.0, 0.0).unwrap();
        let c = render_cloud(&world, &pose, &s, 0);
        let car: Vec<_> = c
            .points
            .iter()
            .zip(&c.labels)
            .filter(|(_, l)| **l == PointLabel::Vehicle(0))
            .map(|(p, _)| *p)
            .collect();
        assert!(!car.is_empty());
        // the body's rear face sits 2.75 m plus the inset ahead of the sensor
        let rear = 2.75 + BODY_INSET;
        assert!(car
            .iter()
            .all(|p| (p[0] - rear).abs() < 1e-2 && p[1].abs() < 1.0));
    }
}
