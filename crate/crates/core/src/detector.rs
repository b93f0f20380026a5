//! Small trainable detector: RANSAC ground removal, BEV grid clustering,
//! rectangle fitting, then a point-set network that scores and regresses
//! each proposal.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    convex_hull, iou_bev, min_area_rect, nms, wrap_angle, Box3, Point2, Point3, Rect2,
};
use crate::net::{self, Evaluator, NetSpec, TrainConfig, Weights, OFFSET_DIM};
use crate::ranker::{apply_offset, crop_normalized, encode_offset, ranker_loss};
use crate::rng::{derive_seed, stream, TAG_DETECT, TAG_GROUND};
use crate::simkit::{LabelSource, LabeledBox, SceneFrame};

/// Per-proposal descriptor: size, viewing direction in the box frame, range.
pub const DETECTOR_FEATURES: usize = 6;
const MIN_EXTENT: f64 = 0.2;
/// Steepest ground normal accepted, radians from vertical.
const MAX_GROUND_TILT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub ground_ransac_iters: usize,
    pub ground_inlier_eps: f64,
    pub bev_cell: f64,
    pub min_cluster_points: usize,
    pub match_iou_for_training: f64,
    pub nms_iou: f64,
    /// Size used to complete partially seen objects, `(l, w, h)`.
    pub prior_size: [f64; 3],
    pub max_points: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            ground_ransac_iters: 100,
            ground_inlier_eps: 0.1,
            bev_cell: 0.5,
            min_cluster_points: 5,
            match_iou_for_training: 0.3,
            nms_iou: 0.1,
            prior_size: [4.75, 1.9, 1.7],
            max_points: 256,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ground_ransac_iters == 0 {
            return Err(Error::config(
                "detector.ground_ransac_iters",
                "must be >= 1",
            ));
        }
        if !(self.ground_inlier_eps > 0.0) {
            return Err(Error::config("detector.ground_inlier_eps", "must be > 0"));
        }
        if !(self.bev_cell > 0.0) {
            return Err(Error::config("detector.bev_cell", "must be > 0"));
        }
        if self.min_cluster_points == 0 {
            return Err(Error::config("detector.min_cluster_points", "must be >= 1"));
        }
        if !(self.match_iou_for_training > 0.0 && self.match_iou_for_training < 1.0) {
            return Err(Error::config(
                "detector.match_iou_for_training",
                "must lie in (0, 1)",
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::config("detector.nms_iou", "must lie in (0, 1]"));
        }
        if self.prior_size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("detector.prior_size", "sizes must be > 0"));
        }
        if self.max_points == 0 {
            return Err(Error::config("detector.max_points", "must be >= 1"));
        }
        Ok(())
    }
}

/// `normal . p + d = 0` with a unit normal pointing up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub d: f64,
}

impl Plane {
    fn through(a: Point3, b: Point3, c: Point3) -> Option<Plane> {
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let mut n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len < 1e-9 {
            return None;
        }
        let sign = if n[2] < 0.0 { -1.0 } else { 1.0 };
        n = n.map(|x| sign * x / len);
        Some(Plane {
            normal: n,
            d: -(n[0] * a[0] + n[1] * a[1] + n[2] * a[2]),
        })
    }

    pub fn signed_distance(&self, p: Point3) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] + self.d
    }

    /// Angle between the normal and the vertical.
    pub fn tilt(&self) -> f64 {
        self.normal[2].clamp(-1.0, 1.0).acos()
    }
}

/// Least-squares `z = a x + b y + c` over `pts`.
fn refit(pts: &[Point3]) -> Option<Plane> {
    let n = pts.len() as f64;
    let mean = pts
        .iter()
        .fold([0.0; 3], |m, p| [m[0] + p[0], m[1] + p[1], m[2] + p[2]]);
    let mean = mean.map(|v| v / n);
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in pts {
        let (x, y, z) = (p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxz += x * z;
        syz += y * z;
    }
    let det = sxx * syy - sxy * sxy;
    if det.abs() < 1e-9 {
        return None;
    }
    let a = (sxz * syy - syz * sxy) / det;
    let b = (syz * sxx - sxz * sxy) / det;
    let len = (a * a + b * b + 1.0).sqrt();
    let normal = [-a / len, -b / len, 1.0 / len];
    let d = -(normal[0] * mean[0] + normal[1] * mean[1] + normal[2] * mean[2]);
    Some(Plane { normal, d })
}

/// RANSAC ground plane; returns the points more than `eps` above it.
/// Fewer than three points come back unchanged with no plane.
pub fn remove_ground(
    cloud: &[Point3],
    cfg: &ProposalConfig,
    seed: u64,
) -> (Vec<Point3>, Option<Plane>) {
    if cloud.len() < 3 {
        return (cloud.to_vec(), None);
    }
    let eps = cfg.ground_inlier_eps;
    let mut rng = stream(seed, &[TAG_GROUND]);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..cfg.ground_ransac_iters {
        let i = rng.random_range(0..cloud.len());
        let j = rng.random_range(0..cloud.len());
        let k = rng.random_range(0..cloud.len());
        let Some(pl) = Plane::through(cloud[i], cloud[j], cloud[k]) else {
            continue;
        };
        if pl.tilt() > MAX_GROUND_TILT {
            continue;
        }
        let inliers = cloud
            .iter()
            .filter(|p| pl.signed_distance(**p).abs() <= eps)
            .count();
        if best.is_none_or(|(n, _)| inliers > n) {
            best = Some((inliers, pl));
        }
    }
    let Some((_, mut plane)) = best else {
        return (cloud.to_vec(), None);
    };
    let inliers: Vec<Point3> = cloud
        .iter()
        .filter(|p| plane.signed_distance(**p).abs() <= eps)
        .copied()
        .collect();
    if let Some(p) = refit(&inliers).filter(|p| p.tilt() <= MAX_GROUND_TILT) {
        plane = p;
    }
    let above = cloud
        .iter()
        .filter(|p| plane.signed_distance(**p) > eps)
        .copied()
        .collect();
    (above, Some(plane))
}

/// 4-connected components of occupied BEV cells; each entry lists point
/// indices. Components come out ordered by their smallest cell.
pub fn cluster_bev(points: &[Point3], cell: f64) -> Vec<Vec<usize>> {
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut keys: Vec<(i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();
    let mut seen: HashMap<(i64, i64), bool> = keys.iter().map(|k| (*k, false)).collect();
    let mut out = Vec::new();
    for start in keys {
        if seen[&start] {
            continue;
        }
        seen.insert(start, true);
        let mut queue = VecDeque::from([start]);
        let mut members = Vec::new();
        while let Some(c) = queue.pop_front() {
            members.extend_from_slice(&cells[&c]);
            for n in [
                (c.0 + 1, c.1),
                (c.0 - 1, c.1),
                (c.0, c.1 + 1),
                (c.0, c.1 - 1),
            ] {
                if let Some(s) = seen.get_mut(&n) {
                    if !*s {
                        *s = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Rectangle fit that resolves the area ties of L-shaped outlines: among
/// hull-edge orientations whose enclosing rectangle is within `AREA_SLACK`
/// of the minimum area, the one whose sides lie closest to the points wins.
pub fn fit_rect(pts: &[Point2]) -> Option<Rect2> {
    const AREA_SLACK: f64 = 1.05;
    let best = min_area_rect(pts)?;
    let hull = convex_hull(pts);
    if hull.len() < 3 {
        return Some(best);
    }
    let min_area = best.l * best.w;
    let mut pick: Option<(f64, Rect2)> = None;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
        let r = rect_along(pts, yaw);
        if r.l * r.w > AREA_SLACK * min_area + 1e-9 {
            continue;
        }
        let cost = edge_closeness(pts, &r);
        if pick.is_none_or(|(c, _)| cost < c - 1e-12) {
            pick = Some((cost, r));
        }
    }
    Some(pick.map_or(best, |p| p.1))
}

fn rect_along(pts: &[Point2], yaw: f64) -> Rect2 {
    let (s, c) = yaw.sin_cos();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let (cu, cv) = (0.5 * (umin + umax), 0.5 * (vmin + vmax));
    let (l, w, yaw) = if umax - umin >= vmax - vmin {
        (umax - umin, vmax - vmin, yaw)
    } else {
        (vmax - vmin, umax - umin, yaw + 0.5 * std::f64::consts::PI)
    };
    Rect2 {
        cx: c * cu - s * cv,
        cy: s * cu + c * cv,
        l,
        w,
        yaw: wrap_angle(yaw),
    }
}

/// Mean distance from each point to the nearest rectangle side.
fn edge_closeness(pts: &[Point2], r: &Rect2) -> f64 {
    let (s, c) = r.yaw.sin_cos();
    let mut total = 0.0;
    for p in pts {
        let dx = p[0] - r.cx;
        let dy = p[1] - r.cy;
        let u = (c * dx + s * dy).abs();
        let v = (-s * dx + c * dy).abs();
        total += (0.5 * r.l - u).abs().min((0.5 * r.w - v).abs());
    }
    total / pts.len() as f64
}

/// Box completed to the prior size along heading `yaw`, keeping the seen
/// extent and growing away from the sensor at the origin.
fn completed(pts: &[Point2], yaw: f64, prior: [f64; 2]) -> (f64, f64, f64, f64) {
    let (s, c) = yaw.sin_cos();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let grow = |lo: f64, hi: f64, size: f64| -> (f64, f64) {
        if hi - lo >= size {
            return (0.5 * (lo + hi), hi - lo);
        }
        // the sensor sits at 0 in this frame
        if lo >= 0.0 {
            (lo + 0.5 * size, size)
        } else if hi <= 0.0 {
            (hi - 0.5 * size, size)
        } else {
            (0.5 * (lo + hi), size)
        }
    };
    let (cu, l) = grow(umin, umax, prior[0]);
    let (cv, w) = grow(vmin, vmax, prior[1]);
    (c * cu - s * cv, s * cu + c * cv, l, w)
}

/// Box hypotheses for every cluster: the fitted rectangle and two
/// prior-size completions, one per axis of the rectangle.
pub fn propose(nonground: &[Point3], cfg: &ProposalConfig) -> Vec<Box3> {
    let mut out = Vec::new();
    for members in cluster_bev(nonground, cfg.bev_cell) {
        if members.len() < cfg.min_cluster_points {
            continue;
        }
        let pts: Vec<Point2> = members
            .iter()
            .map(|&i| [nonground[i][0], nonground[i][1]])
            .collect();
        let (zmin, zmax) = members.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &i| {
            (lo.min(nonground[i][2]), hi.max(nonground[i][2]))
        });
        let Some(r) = fit_rect(&pts) else { continue };
        let h = (zmax - zmin).max(MIN_EXTENT);
        let cz = 0.5 * (zmin + zmax);
        out.push(Box3 {
            cx: r.cx,
            cy: r.cy,
            cz,
            l: r.l.max(MIN_EXTENT),
            w: r.w.max(MIN_EXTENT),
            h,
            yaw: wrap_angle(r.yaw),
        });
        for yaw in [r.yaw, r.yaw + 0.5 * std::f64::consts::PI] {
            let (cx, cy, l, w) = completed(&pts, yaw, [cfg.prior_size[0], cfg.prior_size[1]]);
            let hh = h.max(cfg.prior_size[2]);
            out.push(Box3 {
                cx,
                cy,
                cz: zmax - 0.5 * hh,
                l,
                w,
                h: hh,
                yaw: wrap_angle(yaw),
            });
        }
    }
    out
}

fn features(b: &Box3) -> [f64; DETECTOR_FEATURES] {
    let sensor = b.to_local([0.0, 0.0, b.cz]);
    let view = sensor[1].atan2(sensor[0]);
    [b.l, b.w, b.h, view.cos(), view.sin(), b.bev_range() / 50.0]
}

/// Proposals of one frame with their network inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameProposals {
    pub boxes: Vec<Box3>,
    pub crops: Vec<Vec<[f32; 3]>>,
    pub features: Vec<[f64; DETECTOR_FEATURES]>,
}

/// Ground removal, clustering and cropping for one cloud.
pub fn prepare(cloud: &[Point3], cfg: &ProposalConfig, seed: u64) -> Result<FrameProposals> {
    cfg.validate()?;
    let (nonground, _) = remove_ground(cloud, cfg, seed);
    Ok(prepare_from_nonground(cloud, &nonground, cfg, seed))
}

/// Like [`prepare`] with ground already removed.
pub fn prepare_from_nonground(
    cloud: &[Point3],
    nonground: &[Point3],
    cfg: &ProposalConfig,
    seed: u64,
) -> FrameProposals {
    let boxes = propose(nonground, cfg);
    let mut rng = stream(seed, &[TAG_DETECT]);
    let crops = boxes
        .iter()
        .map(|b| crop_normalized(cloud, b, cfg.max_points, &mut rng))
        .collect();
    let features = boxes.iter().map(features).collect();
    FrameProposals {
        boxes,
        crops,
        features,
    }
}

pub fn prepare_frames(
    frames: &[SceneFrame],
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Vec<FrameProposals>> {
    frames
        .iter()
        .map(|f| {
            prepare(
                &f.ego_cloud,
                cfg,
                derive_seed(seed, &[TAG_DETECT, f.frame_id]),
            )
        })
        .collect()
}

pub fn detector_spec(base: &NetSpec) -> NetSpec {
    NetSpec {
        extra_feature_dim: DETECTOR_FEATURES,
        ..base.clone()
    }
}

/// Trains the proposal scorer against per-frame pseudo labels. Proposals
/// matching a label at `match_iou_for_training` learn its IoU and offset;
/// the rest learn a score of 0.
pub fn train_detector(
    frames: &[SceneFrame],
    labels: &[Vec<LabeledBox>],
    spec: &NetSpec,
    train: &TrainConfig,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Weights> {
    let props = prepare_frames(frames, cfg, seed)?;
    train_on_proposals(&props, labels, spec, train, cfg, seed)
}

struct Target {
    frame: usize,
    index: usize,
    iou: f64,
    offset: [f64; OFFSET_DIM],
}

pub fn train_on_proposals(
    props: &[FrameProposals],
    labels: &[Vec<LabeledBox>],
    spec: &NetSpec,
    train: &TrainConfig,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Weights> {
    let init = net::init_weights(&detector_spec(spec), derive_seed(seed, &[TAG_DETECT]))?;
    fit_proposals(props, labels, init, train, cfg, seed)
}

/// Continues training `init` on new labels.
pub fn fine_tune_on_proposals(
    init: &Weights,
    props: &[FrameProposals],
    labels: &[Vec<LabeledBox>],
    train: &TrainConfig,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Weights> {
    init.validate()?;
    if init.spec.extra_feature_dim != DETECTOR_FEATURES {
        return Err(Error::ShapeMismatch(format!(
            "detector weights take {} features, expected {DETECTOR_FEATURES}",
            init.spec.extra_feature_dim
        )));
    }
    fit_proposals(props, labels, init.clone(), train, cfg, seed)
}

fn fit_proposals(
    props: &[FrameProposals],
    labels: &[Vec<LabeledBox>],
    init: Weights,
    train: &TrainConfig,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Weights> {
    if props.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "frames/labels",
            left: props.len(),
            right: labels.len(),
        });
    }
    if props.is_empty() {
        return Err(Error::Empty("training frames"));
    }
    let mut targets = Vec::new();
    for (fi, (p, ls)) in props.iter().zip(labels).enumerate() {
        for (pi, b) in p.boxes.iter().enumerate() {
            let best = ls
                .iter()
                .map(|l| (iou_bev(b, &l.bbox), l.bbox))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let (iou, offset) = match best {
                Some((iou, l)) if iou >= cfg.match_iou_for_training => (iou, encode_offset(b, &l)),
                _ => (0.0, [0.0; OFFSET_DIM]),
            };
            targets.push(Target {
                frame: fi,
                index: pi,
                iou,
                offset,
            });
        }
    }
    if targets.is_empty() {
        return Err(Error::Empty("detector proposals"));
    }
    let (w, _) = net::fit(
        init,
        targets.len(),
        train,
        seed,
        |i| {
            let t = &targets[i];
            let p = &props[t.frame];
            (&p.crops[t.index][..], &p.features[t.index][..])
        },
        |i, pred| {
            let t = &targets[i];
            let g = ranker_loss(pred, t.iou, &t.offset);
            (g.loss, g.d_iou, g.d_offset)
        },
    )?;
    Ok(w)
}

/// Scores prepared proposals, applies the regressed offsets and runs NMS.
pub fn detect_prepared(
    w: &Weights,
    props: &FrameProposals,
    cfg: &ProposalConfig,
) -> Result<Vec<LabeledBox>> {
    if w.spec.extra_feature_dim != DETECTOR_FEATURES {
        return Err(Error::ShapeMismatch(format!(
            "detector weights take {} features, expected {DETECTOR_FEATURES}",
            w.spec.extra_feature_dim
        )));
    }
    let mut ev = Evaluator::new(w);
    let mut boxes = Vec::with_capacity(props.boxes.len());
    let mut scores = Vec::with_capacity(props.boxes.len());
    for ((b, crop), f) in props.boxes.iter().zip(&props.crops).zip(&props.features) {
        let p = ev.eval(crop, f)?;
        boxes.push(apply_offset(b, &p.offset));
        scores.push(p.iou.clamp(0.0, 1.0));
    }
    let keep = nms(&boxes, &scores, cfg.nms_iou)?;
    Ok(keep
        .into_iter()
        .map(|i| LabeledBox {
            bbox: boxes[i],
            confidence: scores[i],
            ranker_score: None,
            source: LabelSource::SelfTrained,
        })
        .collect())
}

pub fn detect(
    w: &Weights,
    cloud: &[Point3],
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Vec<LabeledBox>> {
    let props = prepare(cloud, cfg, seed)?;
    detect_prepared(w, &props, cfg)
}
