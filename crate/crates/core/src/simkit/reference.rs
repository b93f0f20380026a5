//! Reference-agent predictions with the two failure modes of shared labels:
//! viewpoint mismatch (only what the reference sees, minus random misses,
//! plus clutter) and mislocalisation (sync delay times velocity, GPS offset).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{transform_box, wrap_angle, Box3};
use crate::metrics::match_labels;
use crate::rng::{stream, TAG_REFERENCE};

use super::{LabelSource, LabeledBox, SceneFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-axis std of the reference's localisation offset, metres.
    pub gps_sigma: f64,
    pub sync_delay_frames: u32,
    /// Chance that each emitted true label brings along one clutter box.
    pub ref_fp_rate: f64,
    pub ref_fn_rate: f64,
    pub conf_noise_sigma: f64,
    /// Returns the reference needs on an object before its detector fires.
    pub ref_min_points: u32,
    pub ref_max_range: f64,
    /// Point count at which the confidence proxy reaches 1 - 1/e.
    pub conf_saturation: f64,
    /// Share of clutter boxes that land on a roadside obstacle rather than
    /// in open space.
    pub fp_on_obstacle: f64,
    /// The reference detector's own box error at `ref_max_range`, growing
    /// linearly from zero at the reference: per-axis centre std (m), log
    /// size std and yaw std (rad).
    pub far_center_sigma: f64,
    pub far_size_sigma: f64,
    pub far_yaw_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            gps_sigma: 0.2,
            sync_delay_frames: 1,
            ref_fp_rate: 0.15,
            ref_fn_rate: 0.05,
            conf_noise_sigma: 0.05,
            ref_min_points: 5,
            ref_max_range: 80.0,
            conf_saturation: 20.0,
            fp_on_obstacle: 0.5,
            far_center_sigma: 0.6,
            far_size_sigma: 0.15,
            far_yaw_sigma: 0.15,
        }
    }
}

impl NoiseModel {
    /// No localisation noise, no random misses, no clutter.
    pub fn noiseless() -> Self {
        NoiseModel {
            gps_sigma: 0.0,
            sync_delay_frames: 0,
            ref_fp_rate: 0.0,
            ref_fn_rate: 0.0,
            conf_noise_sigma: 0.0,
            far_center_sigma: 0.0,
            far_size_sigma: 0.0,
            far_yaw_sigma: 0.0,
            ..NoiseModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gps_sigma >= 0.0 && self.gps_sigma.is_finite()) {
            return Err(Error::config("gps_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ref_fp_rate) {
            return Err(Error::config("ref_fp_rate", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ref_fn_rate) {
            return Err(Error::config("ref_fn_rate", "must lie in [0, 1)"));
        }
        if !(self.conf_noise_sigma >= 0.0) {
            return Err(Error::config("conf_noise_sigma", "must be >= 0"));
        }
        if !(self.ref_max_range > 0.0) {
            return Err(Error::config("ref_max_range", "must be > 0"));
        }
        if !(self.conf_saturation > 0.0) {
            return Err(Error::config("conf_saturation", "must be > 0"));
        }
        for (name, v) in [
            ("far_center_sigma", self.far_center_sigma),
            ("far_size_sigma", self.far_size_sigma),
            ("far_yaw_sigma", self.far_yaw_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.fp_on_obstacle) {
            return Err(Error::config("fp_on_obstacle", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Simulated reference predictions for every frame, in the ego frame.
pub fn make_reference_predictions(
    frames: &[SceneFrame],
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<Vec<LabeledBox>>> {
    noise.validate()?;
    Ok(frames
        .iter()
        .map(|f| reference_frame(f, noise, seed))
        .collect())
}

fn reference_frame(f: &SceneFrame, noise: &NoiseModel, seed: u64) -> Vec<LabeledBox> {
    let mut rng = stream(seed, &[TAG_REFERENCE, f.frame_id]);
    let gps = Normal::new(0.0, noise.gps_sigma).unwrap();
    let conf_noise = Normal::new(0.0, noise.conf_noise_sigma).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let offset = [gps.sample(&mut rng), gps.sample(&mut rng)];
    let lag = noise.sync_delay_frames as f64 * f.frame_dt;
    let to_ego = f.world_to_ego();

    let mut world_labels: Vec<(Box3, f64)> = Vec::new();
    for (v, &hits) in f.gt_boxes.iter().zip(&f.ref_hits) {
        let range = (v.bbox.cx - f.ref_pose.x).hypot(v.bbox.cy - f.ref_pose.y);
        // draws happen for every object so that the stream does not depend on visibility
        let miss = rng.random::<f64>() < noise.ref_fn_rate;
        let cn = conf_noise.sample(&mut rng);
        let err: [f64; 5] = std::array::from_fn(|_| unit.sample(&mut rng));
        if hits < noise.ref_min_points || range > noise.ref_max_range || miss {
            continue;
        }
        let k = range / noise.ref_max_range;
        let mut b = v.bbox;
        b.cx += offset[0] - v.velocity[0] * lag + k * noise.far_center_sigma * err[0];
        b.cy += offset[1] - v.velocity[1] * lag + k * noise.far_center_sigma * err[1];
        b.l *= (k * noise.far_size_sigma * err[2]).exp();
        b.w *= (k * noise.far_size_sigma * err[3]).exp();
        b.yaw = wrap_angle(b.yaw + k * noise.far_yaw_sigma * err[4]);
        let conf = (1.0 - (-(hits as f64) / noise.conf_saturation).exp()) + cn;
        world_labels.push((b, conf.clamp(0.0, 1.0)));
    }

    let nearby: Vec<&Box3> = f
        .obstacles
        .iter()
        .filter(|o| (o.cx - f.ref_pose.x).hypot(o.cy - f.ref_pose.y) <= noise.ref_max_range)
        .collect();
    let n_true = world_labels.len();
    for _ in 0..n_true {
        if rng.random::<f64>() >= noise.ref_fp_rate {
            continue;
        }
        let r = rng.random_range(5.0..noise.ref_max_range);
        let a = rng.random_range(-PI..PI);
        let h = rng.random_range(1.4..2.0);
        let mut b = Box3 {
            cx: f.ref_pose.x + r * a.cos(),
            cy: f.ref_pose.y + r * a.sin(),
            cz: 0.5 * h,
            l: rng.random_range(3.5..6.0),
            w: rng.random_range(1.6..2.2),
            h,
            yaw: wrap_angle(rng.random_range(-PI..PI)),
        };
        let pick = rng.random_range(0..nearby.len().max(1));
        if !nearby.is_empty() && rng.random::<f64>() < noise.fp_on_obstacle {
            // the reference's detector mistakes roadside clutter for a car
            let o = nearby[pick];
            b.cx = o.cx;
            b.cy = o.cy;
        }
        world_labels.push((b, rng.random_range(0.2..0.6)));
    }

    world_labels
        .into_iter()
        .map(|(b, confidence)| LabeledBox {
            bbox: transform_box(&b, &to_ego),
            confidence,
            ranker_score: None,
            source: LabelSource::Reference,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallBin {
    pub lo: f64,
    pub hi: f64,
    pub frames: usize,
    pub gt: usize,
    /// `None` when the bin holds no ground truth.
    pub recall: Option<f64>,
}

/// Recall of `labels` against `gt` grouped by ego–reference distance.
pub fn distance_recall_curve(
    frames: &[SceneFrame],
    labels: &[Vec<LabeledBox>],
    gt: &[Vec<Box3>],
    iou_thresh: f64,
    bin_edges: &[f64],
) -> Result<Vec<RecallBin>> {
    if frames.len() != labels.len() || frames.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "frames/labels/gt",
            left: frames.len(),
            right: labels.len().min(gt.len()),
        });
    }
    let mut bins: Vec<RecallBin> = bin_edges
        .windows(2)
        .map(|w| RecallBin {
            lo: w[0],
            hi: w[1],
            frames: 0,
            gt: 0,
            recall: None,
        })
        .collect();
    let mut hits = vec![0usize; bins.len()];
    for ((f, l), g) in frames.iter().zip(labels).zip(gt) {
        let d = f.ego_ref_distance;
        let Some(bi) = bins.iter().position(|b| d >= b.lo && d < b.hi) else {
            continue;
        };
        bins[bi].frames += 1;
        bins[bi].gt += g.len();
        hits[bi] += match_labels(l, g, iou_thresh).pairs.len();
    }
    for (b, h) in bins.iter_mut().zip(hits) {
        b.recall = (b.gt > 0).then(|| h as f64 / b.gt as f64);
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::iou_bev;
    use crate::simkit::{generate_sequence, VehicleState, WorldConfig};

    fn frames(n: usize) -> Vec<SceneFrame> {
        let cfg = WorldConfig {
            n_frames: n,
            n_vehicles: 12,
            ..WorldConfig::default()
        };
        generate_sequence(&cfg, 0).unwrap()
    }

    #[test]
    fn noiseless_labels_equal_ground_truth() {
        let fr = frames(6);
        let labels = make_reference_predictions(&fr, &NoiseModel::noiseless(), 1).unwrap();
        for (f, l) in fr.iter().zip(&labels) {
            assert!(l.iter().all(|b| b.source == LabelSource::Reference));
            let gt = f.ego_gt(0);
            for b in l {
                let best = gt.iter().map(|g| iou_bev(g, &b.bbox)).fold(0.0, f64::max);
                assert!(best > 1.0 - 1e-9, "best IoU {best}");
            }
        }
    }

    #[test]
    fn sync_delay_displacement_at_highway_speed() {
        let mut fr = frames(1);
        let f = &mut fr[0];
        let yaw = 0.3;
        f.gt_boxes = vec![VehicleState {
            id: 0,
            bbox: Box3::new(
                [f.ref_pose.x + 10.0, f.ref_pose.y, 0.8],
                [4.5, 1.9, 1.6],
                yaw,
            )
            .unwrap(),
            velocity: [26.8 * yaw.cos(), 26.8 * yaw.sin()],
        }];
        f.ref_hits = vec![100];
        f.ego_hits = vec![100];
        let noise = NoiseModel {
            sync_delay_frames: 1,
            ..NoiseModel::noiseless()
        };
        let labels = make_reference_predictions(&fr, &noise, 0).unwrap();
        let gt = fr[0].ego_gt(0)[0];
        let b = labels[0][0].bbox;
        let d = (b.cx - gt.cx).hypot(b.cy - gt.cy);
        assert!((d - 2.68).abs() < 1e-9, "displacement {d}");
    }

    #[test]
    fn gps_error_follows_folded_normal_mean() {
        let mut fr = frames(1);
        let mut base = fr.remove(0);
        base.ego_cloud = Vec::new();
        base.ref_cloud = Vec::new();
        let mut many = Vec::new();
        for k in 0..10_000u64 {
            let mut f = base.clone();
            f.frame_id = k;
            f.gt_boxes = vec![VehicleState {
                id: 0,
                bbox: Box3::new(
                    [f.ref_pose.x + 10.0, f.ref_pose.y, 0.8],
                    [4.5, 1.9, 1.6],
                    0.0,
                )
                .unwrap(),
                velocity: [0.0, 0.0],
            }];
            f.ref_hits = vec![50];
            f.ego_hits = vec![50];
            many.push(f);
        }
        let noise = NoiseModel {
            gps_sigma: 0.2,
            sync_delay_frames: 0,
            ..NoiseModel::noiseless()
        };
        let labels = make_reference_predictions(&many, &noise, 3).unwrap();
        let mut sum = 0.0;
        for (f, l) in many.iter().zip(&labels) {
            let g = f.ego_gt(0)[0];
            sum += (l[0].bbox.cx - g.cx).abs() + (l[0].bbox.cy - g.cy).abs();
        }
        let mean_abs = sum / (2.0 * many.len() as f64);
        let want = 0.2 * (2.0 / PI).sqrt();
        assert!((mean_abs - want).abs() < 0.005, "{mean_abs} vs {want}");
        // radial error: Rayleigh mean sigma * sqrt(pi / 2)
        let radial: f64 = many
            .iter()
            .zip(&labels)
            .map(|(f, l)| {
                let g = f.ego_gt(0)[0];
                (l[0].bbox.cx - g.cx).hypot(l[0].bbox.cy - g.cy)
            })
            .sum::<f64>()
            / many.len() as f64;
        assert!((radial - 0.2 * (PI / 2.0).sqrt()).abs() < 0.005, "{radial}");
    }

    #[test]
    fn recall_curve_examples() {
        let fr = frames(10);
        let gt: Vec<Vec<Box3>> = fr.iter().map(|f| f.ego_gt(5)).collect();
        let perfect: Vec<Vec<LabeledBox>> = gt
            .iter()
            .map(|g| g.iter().map(|&b| LabeledBox::ground_truth(b)).collect())
            .collect();
        let curve = distance_recall_curve(
            &fr,
            &perfect,
            &gt,
            0.5,
            &[0.0, 20.0, 40.0, 60.0, 80.0, 100.0],
        )
        .unwrap();
        for b in &curve {
            if b.gt > 0 {
                assert_eq!(b.recall, Some(1.0));
            } else {
                assert_eq!(b.recall, None);
            }
        }
        let one =
            distance_recall_curve(&fr[..1], &perfect[..1], &gt[..1], 0.5, &[0.0, 50.0, 100.0])
                .unwrap();
        assert_eq!(one.iter().filter(|b| b.frames > 0).count(), 1);
        assert!(distance_recall_curve(&fr, &perfect[..2], &gt, 0.5, &[0.0, 1.0]).is_err());
    }
}
