//! Yaw-only box geometry in a right-handed frame (x forward, y left, z up).
//!
//! Boxes are centred on `(cx, cy, cz)` with `l` along the heading, `w` across
//! it and `h` vertical. All overlap measures work on the bird's-eye-view
//! footprint, optionally combined with the vertical interval.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

/// Tolerance used by the polygon clipper and the polygon invariants.
pub const GEOM_EPS: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite("yaw"));
    }
    Ok(wrap_angle(a))
}

/// Infallible variant of [`normalize_yaw`] for values already known finite.
pub(crate) fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3 {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Box3 {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: normalize_yaw(yaw)?,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box"));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::config("box", "sizes must be positive"));
        }
        if self.yaw <= -PI || self.yaw > PI {
            return Err(Error::config("box.yaw", "yaw must lie in (-pi, pi]"));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3 {
        [self.cx, self.cy, self.cz]
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_diagonal(&self) -> f64 {
        self.l.hypot(self.w)
    }

    pub fn bev_range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    /// Expresses a point in this box's frame (origin at the centre, x along heading).
    pub fn to_local(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn to_world(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * p[0] - s * p[1],
            self.cy + s * p[0] + c * p[1],
            self.cz + p[2],
        ]
    }

    pub fn contains(&self, p: Point3, expand: f64) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * expand * self.l
            && q[1].abs() <= 0.5 * expand * self.w
            && q[2].abs() <= 0.5 * expand * self.h
    }

    /// Same footprint, heading flipped by pi when that brings it closer to `reference`.
    pub fn yaw_aligned_to(&self, reference: f64) -> Box3 {
        let d = wrap_angle(self.yaw - reference);
        if d.abs() > 0.5 * PI {
            Box3 {
                yaw: wrap_angle(self.yaw + PI),
                ..*self
            }
        } else {
            *self
        }
    }
}

/// Yaw-only rigid transform; maps points of the agent frame into the parent frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        yaw: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Result<Self> {
        Ok(Pose {
            x,
            y,
            z,
            yaw: normalize_yaw(yaw)?,
        })
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.x,
            s * p[0] + c * p[1] + self.y,
            p[2] + self.z,
        ]
    }

    pub fn inverse(&self) -> Pose {
        let (s, c) = self.yaw.sin_cos();
        Pose {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            z: -self.z,
            yaw: wrap_angle(-self.yaw),
        }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let t = self.apply([other.x, other.y, other.z]);
        Pose {
            x: t[0],
            y: t[1],
            z: t[2],
            yaw: wrap_angle(self.yaw + other.yaw),
        }
    }

    /// Transform taking coordinates in `from`'s frame to coordinates in `to`'s frame,
    /// where both poses are given relative to a shared world frame.
    pub fn relative(from: &Pose, to: &Pose) -> Pose {
        to.inverse().compose(from)
    }

    pub fn bev_distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon2 {
    vertices: Vec<Point2>,
}

impl Polygon2 {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::config("polygon", "needs at least 3 vertices"));
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            if (a[0] - b[0]).abs() <= GEOM_EPS && (a[1] - b[1]).abs() <= GEOM_EPS {
                return Err(Error::config("polygon", "repeated consecutive vertex"));
            }
            let c = vertices[(i + 2) % n];
            if cross(a, b, c) < -GEOM_EPS {
                return Err(Error::config("polygon", "not convex and counter-clockwise"));
            }
        }
        Ok(Polygon2 { vertices })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), v| (sx + v[0], sy + v[1]));
        [sx / n, sy / n]
    }
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn shoelace(v: &[Point2]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

pub fn box_corners_bev(b: &Box3) -> Polygon2 {
    let (s, c) = b.yaw.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let vertices = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
        .iter()
        .map(|q| [b.cx + c * q[0] - s * q[1], b.cy + s * q[0] + c * q[1]])
        .collect();
    Polygon2 { vertices }
}

/// Area of the intersection of two convex CCW polygons (half-plane clipping).
pub fn convex_intersection_area(p: &Polygon2, q: &Polygon2) -> f64 {
    if p.area() <= GEOM_EPS || q.area() <= GEOM_EPS {
        return 0.0;
    }
    let mut poly: Vec<Point2> = p.vertices.clone();
    let clip = &q.vertices;
    let mut next = Vec::with_capacity(poly.len() + 4);
    for i in 0..clip.len() {
        if poly.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        next.clear();
        for j in 0..poly.len() {
            let cur = poly[j];
            let prev = poly[(j + poly.len() - 1) % poly.len()];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            let cur_in = dc >= -GEOM_EPS;
            let prev_in = dp >= -GEOM_EPS;
            if cur_in {
                if !prev_in {
                    next.push(intersect(prev, cur, dp, dc));
                }
                next.push(cur);
            } else if prev_in {
                next.push(intersect(prev, cur, dp, dc));
            }
        }
        std::mem::swap(&mut poly, &mut next);
    }
    shoelace(&poly).max(0.0)
}

fn intersect(p: Point2, q: Point2, dp: f64, dq: f64) -> Point2 {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn bev_intersection(a: &Box3, b: &Box3) -> f64 {
    let reach = 0.5 * (a.bev_diagonal() + b.bev_diagonal());
    if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
        return 0.0;
    }
    convex_intersection_area(&box_corners_bev(a), &box_corners_bev(b))
}

pub fn iou_bev(a: &Box3, b: &Box3) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3, b: &Box3) -> f64 {
    if a == b {
        return 1.0;
    }
    let lo = (a.cz - 0.5 * a.h).max(b.cz - 0.5 * b.h);
    let hi = (a.cz + 0.5 * a.h).min(b.cz + 0.5 * b.h);
    let dz = (hi - lo).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn transform_box(b: &Box3, src_to_dst: &Pose) -> Box3 {
    let c = src_to_dst.apply(b.center());
    Box3 {
        cx: c[0],
        cy: c[1],
        cz: c[2],
        yaw: wrap_angle(b.yaw + src_to_dst.yaw),
        ..*b
    }
}

pub fn transform_points(cloud: &[Point3], src_to_dst: &Pose) -> Vec<Point3> {
    cloud.iter().map(|&p| src_to_dst.apply(p)).collect()
}

pub fn points_in_box(cloud: &[Point3], b: &Box3, expand: f64) -> Vec<Point3> {
    cloud
        .iter()
        .copied()
        .filter(|&p| b.contains(p, expand))
        .collect()
}

pub fn count_points_in_box(cloud: &[Point3], b: &Box3, expand: f64) -> usize {
    cloud.iter().filter(|&&p| b.contains(p, expand)).count()
}

/// Greedy non-maximum suppression on BEV IoU. Returns kept indices by descending score.
pub fn nms(boxes: &[Box3], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "nms boxes/scores",
            left: boxes.len(),
            right: scores.len(),
        });
    }
    let order = descending_order(scores);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou_bev(&boxes[k], &boxes[i]) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending value, ties by ascending index; NaN sorts last.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let va = values[a];
        let vb = values[b];
        match (va.is_nan(), vb.is_nan()) {
            (true, true) => a.cmp(&b),
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => vb.partial_cmp(&va).unwrap().then(a.cmp(&b)),
        }
    });
    idx
}

/// Andrew's monotone chain; CCW without collinear points.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Oriented rectangle in the plane, `l >= w`, yaw along the long side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect2 {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub yaw: f64,
}

/// Minimum-area enclosing rectangle of a point set via rotating calipers over its hull.
pub fn min_area_rect(points: &[Point2]) -> Option<Rect2> {
    let hull = convex_hull(points);
    match hull.len() {
        0 => return None,
        1 => {
            return Some(Rect2 {
                cx: hull[0][0],
                cy: hull[0][1],
                l: 0.0,
                w: 0.0,
                yaw: 0.0,
            })
        }
        2 => {
            let d = [hull[1][0] - hull[0][0], hull[1][1] - hull[0][1]];
            return Some(Rect2 {
                cx: 0.5 * (hull[0][0] + hull[1][0]),
                cy: 0.5 * (hull[0][1] + hull[1][1]),
                l: d[0].hypot(d[1]),
                w: 0.0,
                yaw: wrap_angle(d[1].atan2(d[0])),
            });
        }
        _ => {}
    }
    let n = hull.len();
    let dot = |a: Point2, b: Point2| a[0] * b[0] + a[1] * b[1];
    let edge_dir = |i: usize| {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = d[0].hypot(d[1]);
        [d[0] / len, d[1] / len]
    };
    // Calipers: `right` maximises projection on the edge, `top` the distance
    // from it, `left` minimises projection. All advance monotonically.
    let mut right = 0usize;
    let mut top = 0usize;
    let mut left = 0usize;
    let mut best: Option<(f64, Rect2)> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let v = [-u[1], u[0]];
        let base = hull[i];
        let proj_u = |k: usize| dot([hull[k][0] - base[0], hull[k][1] - base[1]], u);
        let proj_v = |k: usize| dot([hull[k][0] - base[0], hull[k][1] - base[1]], v);
        if i == 0 {
            right = i;
        }
        while proj_u((right + 1) % n) > proj_u(right) + GEOM_EPS {
            right = (right + 1) % n;
        }
        if i == 0 {
            top = right;
        }
        while proj_v((top + 1) % n) > proj_v(top) + GEOM_EPS {
            top = (top + 1) % n;
        }
        if i == 0 {
            left = top;
        }
        while proj_u((left + 1) % n) < proj_u(left) - GEOM_EPS {
            left = (left + 1) % n;
        }
        let umax = proj_u(right);
        let umin = proj_u(left);
        let vmax = proj_v(top);
        let area = (umax - umin) * vmax;
        if best.as_ref().is_none_or(|(a, _)| area < *a - GEOM_EPS) {
            let mu = 0.5 * (umax + umin);
            let mv = 0.5 * vmax;
            let cx = base[0] + mu * u[0] + mv * v[0];
            let cy = base[1] + mu * u[1] + mv * v[1];
            let (eu, ev) = (umax - umin, vmax);
            let rect = if eu >= ev {
                Rect2 {
                    cx,
                    cy,
                    l: eu,
                    w: ev,
                    yaw: wrap_angle(u[1].atan2(u[0])),
                }
            } else {
                Rect2 {
                    cx,
                    cy,
                    l: ev,
                    w: eu,
                    yaw: wrap_angle(v[1].atan2(v[0])),
                }
            };
            best = Some((area, rect));
        }
    }
    best.map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Box3 {
        Box3::new([cx, cy, cz], [l, w, h], yaw).unwrap()
    }

    fn square(cx: f64, cy: f64, side: f64) -> Polygon2 {
        box_corners_bev(&bx(cx, cy, 0.0, side, side, 1.0, 0.0))
    }

    fn monte_carlo_iou(a: &Box3, b: &Box3, n: usize, seed: u64) -> f64 {
        let pa = box_corners_bev(a);
        let pb = box_corners_bev(b);
        let all: Vec<Point2> = pa.vertices().iter().chain(pb.vertices()).copied().collect();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for v in &all {
            x0 = x0.min(v[0]);
            x1 = x1.max(v[0]);
            y0 = y0.min(v[1]);
            y1 = y1.max(v[1]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut inter, mut union) = (0usize, 0usize);
        for _ in 0..n {
            let p = [rng.random_range(x0..x1), rng.random_range(y0..y1), 0.0];
            let ia = a.contains([p[0], p[1], a.cz], 1.0);
            let ib = b.contains([p[0], p[1], b.cz], 1.0);
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn normalize_yaw_examples() {
        assert_eq!(normalize_yaw(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(normalize_yaw(3.0 * PI).unwrap(), PI, epsilon = 1e-12);
        assert_eq!(normalize_yaw(-PI).unwrap(), PI);
        assert!(normalize_yaw(f64::NAN).is_err());
        assert!(normalize_yaw(f64::INFINITY).is_err());
        let r = normalize_yaw(-7.5).unwrap();
        assert!(r > -PI && r <= PI);
        assert_abs_diff_eq!(((r + 7.5) / TAU).round() * TAU, r + 7.5, epsilon = 1e-12);
    }

    #[test]
    fn corners_axis_aligned_and_quarter_turn() {
        let b = bx(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0);
        let c = box_corners_bev(&b);
        let expect = [[1.0, 0.5], [-1.0, 0.5], [-1.0, -0.5], [1.0, -0.5]];
        for (got, want) in c.vertices().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-12);
            assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-12);
        }
        assert!(c.area() > 0.0, "corners must be counter-clockwise");

        let r = box_corners_bev(&bx(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, PI / 2.0));
        let xs: Vec<f64> = r.vertices().iter().map(|v| v[0].abs()).collect();
        let ys: Vec<f64> = r.vertices().iter().map(|v| v[1].abs()).collect();
        for x in xs {
            assert_abs_diff_eq!(x, 0.5, epsilon = 1e-12);
        }
        for y in ys {
            assert_abs_diff_eq!(y, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn corners_match_trig_expansion() {
        let b = bx(1.0, 2.0, 0.0, 4.5, 1.9, 1.6, 0.3);
        let c = box_corners_bev(&b);
        let (s, co) = (0.3f64.sin(), 0.3f64.cos());
        // hand expansion of R(yaw) * (±l/2, ±w/2) + centre
        let want = [
            [1.0 + 2.25 * co - 0.95 * s, 2.0 + 2.25 * s + 0.95 * co],
            [1.0 - 2.25 * co - 0.95 * s, 2.0 - 2.25 * s + 0.95 * co],
            [1.0 - 2.25 * co + 0.95 * s, 2.0 - 2.25 * s - 0.95 * co],
            [1.0 + 2.25 * co + 0.95 * s, 2.0 + 2.25 * s - 0.95 * co],
        ];
        for (g, w) in c.vertices().iter().zip(want.iter()) {
            assert_abs_diff_eq!(g[0], w[0], epsilon = 1e-12);
            assert_abs_diff_eq!(g[1], w[1], epsilon = 1e-12);
        }
        let cen = c.centroid();
        assert_abs_diff_eq!(cen[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cen[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn polygon_invariants_enforced() {
        assert!(Polygon2::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
        assert!(Polygon2::new(vec![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]).is_err());
        // clockwise
        assert!(Polygon2::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_err());
        assert!(Polygon2::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).is_ok());
    }

    #[test]
    fn intersection_area_examples() {
        let s = square(0.0, 0.0, 1.0);
        assert_abs_diff_eq!(convex_intersection_area(&s, &s), 1.0, epsilon = 1e-12);
        assert_eq!(convex_intersection_area(&s, &square(5.0, 0.0, 1.0)), 0.0);
        let r = box_corners_bev(&bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0));
        // frozen from a 10^6-sample Monte Carlo run; closed form 2(sqrt2 - 1)
        let want = 2.0 * (2f64.sqrt() - 1.0);
        assert_abs_diff_eq!(convex_intersection_area(&s, &r), want, epsilon = 1e-9);
        assert_abs_diff_eq!(
            convex_intersection_area(&s, &r),
            convex_intersection_area(&r, &s),
            epsilon = 1e-12
        );
        let flat = Polygon2 {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        };
        assert_eq!(convex_intersection_area(&s, &flat), 0.0);
    }

    #[test]
    fn monte_carlo_oracle_for_rotated_square() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0);
        let mc = monte_carlo_iou(&a, &b, 1_000_000, 7);
        assert_abs_diff_eq!(iou_bev(&a, &b), mc, epsilon = 0.005);
        assert_abs_diff_eq!(iou_bev(&a, &b), 0.7071, epsilon = 1e-4);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_bev(&a, &a), 1.0);
        assert_eq!(iou_3d(&a, &a), 1.0);
        let b = bx(0.5, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(iou_bev(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        let up = bx(0.0, 0.0, 1.5, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_3d(&a, &up), 0.0);
        let half = bx(0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(iou_3d(&a, &half), 1.0 / 3.0, epsilon = 1e-12);
        // same footprint different placement still equal in BEV
        assert_abs_diff_eq!(iou_bev(&a, &up), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_examples() {
        let b = bx(1.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        assert_eq!(transform_box(&b, &Pose::IDENTITY), b);
        let t = transform_box(&b, &Pose::new(1.0, 2.0, 0.0, 0.0).unwrap());
        assert_eq!((t.cx, t.cy, t.cz, t.yaw), (2.0, 2.0, 0.0, 0.0));
        let r = transform_box(&b, &Pose::new(0.0, 0.0, 0.0, PI / 2.0).unwrap());
        assert_abs_diff_eq!(r.cx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.cy, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.yaw, PI / 2.0, epsilon = 1e-12);
        assert_eq!((r.l, r.w, r.h), (4.0, 2.0, 1.5));
    }

    #[test]
    fn relative_pose_maps_between_frames() {
        let a = Pose::new(10.0, -3.0, 0.0, 0.7).unwrap();
        let b = Pose::new(-4.0, 8.0, 0.5, -2.1).unwrap();
        let p = [1.5, -2.0, 0.3];
        let world = a.apply(p);
        let in_b = b.inverse().apply(world);
        let via = Pose::relative(&a, &b).apply(p);
        for k in 0..3 {
            assert_abs_diff_eq!(in_b[k], via[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn points_in_box_examples() {
        let b = bx(3.0, -1.0, 0.8, 4.0, 2.0, 1.6, 0.4);
        assert_eq!(points_in_box(&[b.center()], &b, 1.0).len(), 1);
        let p = b.to_world([0.5 * b.l * 1.5, 0.0, 0.0]);
        assert!(points_in_box(&[p], &b, 1.0).is_empty());
        assert_eq!(points_in_box(&[p], &b, 3.0).len(), 1);
        assert!(points_in_box(&[], &b, 1.0).is_empty());
    }

    #[test]
    fn points_in_box_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = bx(2.0, 1.0, 0.5, 4.5, 1.9, 1.6, -1.1);
        let cloud: Vec<Point3> = (0..5000)
            .map(|_| {
                [
                    rng.random_range(-6.0..10.0),
                    rng.random_range(-7.0..9.0),
                    rng.random_range(-3.0..4.0),
                ]
            })
            .collect();
        for expand in [1.0, 3.0] {
            let got = points_in_box(&cloud, &b, expand);
            let (s, c) = (-b.yaw).sin_cos();
            let want: Vec<Point3> = cloud
                .iter()
                .copied()
                .filter(|p| {
                    let dx = p[0] - b.cx;
                    let dy = p[1] - b.cy;
                    let lx = c * dx - s * dy;
                    let ly = s * dx + c * dy;
                    lx.abs() <= expand * b.l / 2.0
                        && ly.abs() <= expand * b.w / 2.0
                        && (p[2] - b.cz).abs() <= expand * b.h / 2.0
                })
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn nms_examples() {
        let a = bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        assert_eq!(nms(&[a], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.9, 0.8], 0.5).unwrap(), vec![0]);
        let b = bx(10.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        let c = bx(20.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        assert_eq!(
            nms(&[a, b, c], &[0.2, 0.9, 0.5], 0.5).unwrap(),
            vec![1, 2, 0]
        );
        assert!(nms(&[a, b], &[0.2], 0.5).is_err());
        // equal scores: lower index first
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn min_area_rect_recovers_rotated_rectangle() {
        let truth = bx(5.0, -2.0, 0.0, 4.0, 1.5, 1.0, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts: Vec<Point2> = box_corners_bev(&truth).vertices().to_vec();
        for _ in 0..200 {
            let q = truth.to_world([
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.75..0.75),
                0.0,
            ]);
            pts.push([q[0], q[1]]);
        }
        let r = min_area_rect(&pts).unwrap();
        assert_abs_diff_eq!(r.cx, 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.cy, -2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.l, 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.w, 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(wrap_angle(2.0 * (r.yaw - 0.6)), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn min_area_rect_matches_exhaustive_edge_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(3..40);
            let pts: Vec<Point2> = (0..n)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0)])
                .collect();
            let hull = convex_hull(&pts);
            if hull.len() < 3 {
                continue;
            }
            let mut best = f64::MAX;
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let th = (b[1] - a[1]).atan2(b[0] - a[0]);
                let (s, c) = th.sin_cos();
                let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
                for p in &hull {
                    let u = c * p[0] + s * p[1];
                    let v = -s * p[0] + c * p[1];
                    u0 = u0.min(u);
                    u1 = u1.max(u);
                    v0 = v0.min(v);
                    v1 = v1.max(v);
                }
                best = best.min((u1 - u0) * (v1 - v0));
            }
            let r = min_area_rect(&pts).unwrap();
            assert_abs_diff_eq!(r.l * r.w, best, epsilon = 1e-7);
            assert!(r.l >= r.w);
            let rb = Box3 {
                cx: r.cx,
                cy: r.cy,
                cz: 0.0,
                l: r.l + 1e-6,
                w: r.w + 1e-6,
                h: 1.0,
                yaw: r.yaw,
            };
            assert!(pts.iter().all(|p| rb.contains([p[0], p[1], 0.0], 1.0)));
        }
    }

    #[test]
    fn min_area_rect_degenerate_inputs() {
        assert!(min_area_rect(&[]).is_none());
        let one = min_area_rect(&[[1.0, 2.0]]).unwrap();
        assert_eq!((one.cx, one.cy, one.l, one.w), (1.0, 2.0, 0.0, 0.0));
        let line = min_area_rect(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(line.l, 8f64.sqrt(), epsilon = 1e-12);
        assert_eq!(line.w, 0.0);
    }

    #[test]
    fn yaw_alignment_flips_only_when_closer() {
        let b = bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.1);
        assert_eq!(b.yaw_aligned_to(0.0), b);
        let f = b.yaw_aligned_to(PI);
        assert_abs_diff_eq!(f.yaw, wrap_angle(0.1 + PI), epsilon = 1e-12);
        assert_abs_diff_eq!(iou_bev(&b, &f), 1.0, epsilon = 1e-9);
    }
}
