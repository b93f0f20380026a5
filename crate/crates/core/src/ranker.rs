//! Box ranker: predicts how well a candidate box fits the points around it
//! and the offset that would move it onto the object. Used to refine
//! mislocalised labels by sampling candidates and keeping the best one, and
//! to drop labels whose best candidate still scores low.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{descending_order, iou_3d, iou_bev, wrap_angle, Box3, Point3};
use crate::net::{self, Evaluator, NetSpec, Prediction, TrainConfig, Weights, OFFSET_DIM};
use crate::rng::{derive_seed, stream, TAG_REFINE, TAG_SAMPLES};
use crate::simkit::{LabeledBox, SceneFrame};

/// Crop extent around a candidate, as a multiple of its size.
pub const CROP_SCALE: f64 = 3.0;
const MIN_SIZE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    #[default]
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3, b: &Box3) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerSample {
    /// Points in the candidate frame divided by the candidate half sizes.
    pub points: Vec<[f32; 3]>,
    /// Candidate `(l, w, h)`.
    pub box_features: [f64; 3],
    pub target_iou: f64,
    pub target_offset: [f64; OFFSET_DIM],
}

/// Offset taking `from` onto `to`: centre shift in the frame of `from`
/// divided by its BEV diagonal, log size ratios, heading difference.
pub fn encode_offset(from: &Box3, to: &Box3) -> [f64; OFFSET_DIM] {
    let to = to.yaw_aligned_to(from.yaw);
    let d = from.bev_diagonal();
    let local = from.to_local(to.center());
    [
        local[0] / d,
        local[1] / d,
        local[2] / d,
        (to.l / from.l).ln(),
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
        wrap_angle(to.yaw - from.yaw),
    ]
}

/// Inverse of [`encode_offset`]. Non-finite offsets leave the box unchanged.
pub fn apply_offset(from: &Box3, off: &[f64; OFFSET_DIM]) -> Box3 {
    if off.iter().any(|v| !v.is_finite()) {
        return *from;
    }
    let d = from.bev_diagonal();
    let c = from.to_world([off[0] * d, off[1] * d, off[2] * d]);
    // keep sizes inside a sane band even for wild predictions
    let ratio = |v: f64| v.clamp(-3.0, 3.0).exp();
    Box3 {
        cx: c[0],
        cy: c[1],
        cz: c[2],
        l: (from.l * ratio(off[3])).max(MIN_SIZE),
        w: (from.w * ratio(off[4])).max(MIN_SIZE),
        h: (from.h * ratio(off[5])).max(MIN_SIZE),
        yaw: wrap_angle(from.yaw + off[6]),
    }
}

/// Points of `cloud` inside the candidate's crop, in its frame, normalised
/// by its half sizes, subsampled to at most `max_points`.
pub fn crop_normalized(
    cloud: &[Point3],
    b: &Box3,
    max_points: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f32; 3]> {
    let mut out = Vec::new();
    crop_into(cloud, b, &mut out);
    if out.len() > max_points {
        let mut keep = sample_indices(rng, out.len(), max_points).into_vec();
        keep.sort_unstable();
        out = keep.into_iter().map(|i| out[i]).collect();
    }
    out
}

fn crop_into(cloud: &[Point3], b: &Box3, out: &mut Vec<[f32; 3]>) {
    out.clear();
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    let lim = CROP_SCALE;
    for p in cloud {
        let dx = p[0] - b.cx;
        let dy = p[1] - b.cy;
        let x = (c * dx + s * dy) / hl;
        if x.abs() > lim {
            continue;
        }
        let y = (-s * dx + c * dy) / hw;
        if y.abs() > lim {
            continue;
        }
        let z = (p[2] - b.cz) / hh;
        if z.abs() > lim {
            continue;
        }
        out.push([x as f32, y as f32, z as f32]);
    }
}

fn box_features(b: &Box3) -> [f64; 3] {
    [b.l, b.w, b.h]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Naive,
    Coarse,
    Fine,
}

/// Candidate noise. In coarse mode `translation` is the half-width of a
/// uniform xy window and size and heading stay fixed; otherwise all scales
/// are Gaussian standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub mode: SamplerMode,
    pub translation: f64,
    pub z: f64,
    /// `(l, w, h)` noise, metres.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl SamplerSpec {
    pub fn naive() -> Self {
        SamplerSpec {
            mode: SamplerMode::Naive,
            translation: 1.0,
            z: 1.0,
            size: [0.1; 3],
            yaw: 0.1,
        }
    }

    pub fn coarse() -> Self {
        SamplerSpec {
            mode: SamplerMode::Coarse,
            translation: 1.0,
            z: 0.5,
            size: [0.0; 3],
            yaw: 0.0,
        }
    }

    pub fn fine() -> Self {
        SamplerSpec {
            mode: SamplerMode::Fine,
            translation: 0.25,
            z: 0.25,
            size: [0.4, 0.2, 0.2],
            yaw: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.translation,
            self.z,
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("sampler", "scales must be finite and >= 0"));
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        0.0
    }
}

pub fn sample_candidates(
    init: &Box3,
    spec: &SamplerSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Box3>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("sampler.n", "must be >= 1"));
    }
    let mut rng = stream(seed, &[TAG_REFINE]);
    Ok((0..n).map(|_| draw(init, spec, &mut rng)).collect())
}

fn draw(init: &Box3, spec: &SamplerSpec, rng: &mut ChaCha8Rng) -> Box3 {
    let mut b = *init;
    match spec.mode {
        SamplerMode::Coarse => {
            if spec.translation > 0.0 {
                b.cx += rng.random_range(-spec.translation..=spec.translation);
                b.cy += rng.random_range(-spec.translation..=spec.translation);
            }
            b.cz += gauss(rng, spec.z);
        }
        SamplerMode::Naive | SamplerMode::Fine => {
            b.cx += gauss(rng, spec.translation);
            b.cy += gauss(rng, spec.translation);
            b.cz += gauss(rng, spec.z);
            b.l = (b.l + gauss(rng, spec.size[0])).max(MIN_SIZE);
            b.w = (b.w + gauss(rng, spec.size[1])).max(MIN_SIZE);
            b.h = (b.h + gauss(rng, spec.size[2])).max(MIN_SIZE);
            b.yaw = wrap_angle(b.yaw + gauss(rng, spec.yaw));
        }
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub per_box: usize,
    /// Ego returns a ground-truth box needs to be used.
    pub min_points: u32,
    pub max_points: usize,
    pub occlusion_prob: f64,
    /// Width range of the removed sector, degrees.
    pub occlusion_sector_deg: [f64; 2],
    /// Upper end of the uniform point-drop probability.
    pub max_drop: f64,
    pub iou: IouKind,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            per_box: 100,
            min_points: 5,
            max_points: 256,
            occlusion_prob: 0.5,
            occlusion_sector_deg: [30.0, 120.0],
            max_drop: 0.5,
            iou: IouKind::Bev,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_box == 0 {
            return Err(Error::config("samples.per_box", "must be >= 1"));
        }
        if self.max_points == 0 {
            return Err(Error::config("samples.max_points", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::config(
                "samples.occlusion_prob",
                "must lie in [0, 1]",
            ));
        }
        let [lo, hi] = self.occlusion_sector_deg;
        if !(lo >= 0.0 && lo <= hi && hi <= 360.0) {
            return Err(Error::config(
                "samples.occlusion_sector_deg",
                "needs 0 <= lo <= hi <= 360",
            ));
        }
        if !(0.0..1.0).contains(&self.max_drop) {
            return Err(Error::config("samples.max_drop", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Points within `radius` of `center` in BEV.
fn near_points(cloud: &[Point3], center: [f64; 2], radius: f64) -> Vec<Point3> {
    let r2 = radius * radius;
    cloud
        .iter()
        .filter(|p| {
            let dx = p[0] - center[0];
            let dy = p[1] - center[1];
            dx * dx + dy * dy <= r2
        })
        .copied()
        .collect()
}

/// A BEV disk of points around an anchor, falling back to the whole cloud
/// for crops reaching outside it.
struct LocalCloud<'a> {
    full: &'a [Point3],
    near: Vec<Point3>,
    center: [f64; 2],
    radius: f64,
}

impl<'a> LocalCloud<'a> {
    fn new(full: &'a [Point3], anchor: &Box3, margin: f64) -> Self {
        let center = [anchor.cx, anchor.cy];
        let radius = 0.5 * CROP_SCALE * anchor.bev_diagonal() + margin;
        LocalCloud {
            full,
            near: near_points(full, center, radius),
            center,
            radius,
        }
    }

    fn for_box(&self, b: &Box3) -> &[Point3] {
        let reach = (b.cx - self.center[0]).hypot(b.cy - self.center[1])
            + 0.5 * CROP_SCALE * b.bev_diagonal();
        if reach <= self.radius {
            &self.near
        } else {
            self.full
        }
    }
}

fn augment(points: &mut Vec<[f32; 3]>, cfg: &SampleConfig, rng: &mut ChaCha8Rng) {
    if rng.random::<f64>() < cfg.occlusion_prob {
        let [lo, hi] = cfg.occlusion_sector_deg;
        let width = rng.random_range(lo..=hi).to_radians();
        let start = rng.random_range(-PI..PI);
        points.retain(|p| {
            let a = (p[1] as f64).atan2(p[0] as f64);
            let rel = (a - start).rem_euclid(2.0 * PI);
            rel > width
        });
    }
    let drop = rng.random_range(0.0..=cfg.max_drop);
    if drop > 0.0 {
        points.retain(|_| rng.random::<f64>() >= drop);
    }
    if points.len() > cfg.max_points {
        let mut keep = sample_indices(rng, points.len(), cfg.max_points).into_vec();
        keep.sort_unstable();
        *points = keep.into_iter().map(|i| points[i]).collect();
    }
}

/// Training samples from annotated frames: naive-noise candidates around
/// each visible ground-truth box, cropped and augmented.
pub fn gen_training_samples(
    frames: &[SceneFrame],
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Vec<RankerSample>> {
    cfg.validate()?;
    let naive = SamplerSpec::naive();
    let mut out = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for (bi, gt) in f.ego_gt(cfg.min_points).iter().enumerate() {
            let box_seed = derive_seed(seed, &[TAG_SAMPLES, fi as u64, bi as u64]);
            let cands = sample_candidates(gt, &naive, cfg.per_box, box_seed)?;
            let local = LocalCloud::new(&f.ego_cloud, gt, 5.0);
            let mut rng = stream(box_seed, &[TAG_SAMPLES]);
            let mut buf = Vec::new();
            for c in &cands {
                crop_into(local.for_box(c), c, &mut buf);
                let mut pts = buf.clone();
                augment(&mut pts, cfg, &mut rng);
                out.push(RankerSample {
                    points: pts,
                    box_features: box_features(c),
                    target_iou: cfg.iou.iou(c, gt),
                    target_offset: encode_offset(c, gt),
                });
            }
        }
    }
    Ok(out)
}

/// IoU-loss weight relative to the offset loss.
pub const IOU_LOSS_WEIGHT: f64 = 5.0;
/// Offsets are only supervised for candidates at least this good.
pub const OFFSET_MASK_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_iou: f64,
    pub d_offset: [f64; OFFSET_DIM],
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// `5 (iou - t)^2 + [t >= 0.3] * sum SmoothL1(offset - t_offset)`.
pub fn ranker_loss(
    pred: &Prediction,
    target_iou: f64,
    target_offset: &[f64; OFFSET_DIM],
) -> LossGrad {
    let e = pred.iou - target_iou;
    let mut loss = IOU_LOSS_WEIGHT * e * e;
    let d_iou = 2.0 * IOU_LOSS_WEIGHT * e;
    let mut d_offset = [0.0; OFFSET_DIM];
    if target_iou >= OFFSET_MASK_IOU {
        for k in 0..OFFSET_DIM {
            let (v, d) = smooth_l1(pred.offset[k] - target_offset[k]);
            loss += v;
            d_offset[k] = d;
        }
    }
    LossGrad {
        loss,
        d_iou,
        d_offset,
    }
}

pub fn train_ranker(
    samples: &[RankerSample],
    spec: &NetSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Weights> {
    train_ranker_logged(samples, spec, cfg, seed).map(|r| r.0)
}

/// As [`train_ranker`], also returning the mean training loss per epoch.
pub fn train_ranker_logged(
    samples: &[RankerSample],
    spec: &NetSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Weights, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("ranker samples"));
    }
    if spec.extra_feature_dim != 3 {
        return Err(Error::config(
            "net.extra_feature_dim",
            "the ranker takes (l, w, h), so it must be 3",
        ));
    }
    let init = net::init_weights(spec, seed)?;
    net::fit(
        init,
        samples.len(),
        cfg,
        seed,
        |i| (&samples[i].points[..], &samples[i].box_features[..]),
        |i, p| {
            let s = &samples[i];
            let g = ranker_loss(p, s.target_iou, &s.target_offset);
            (g.loss, g.d_iou, g.d_offset)
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Total candidates per box; C2F splits them evenly between stages.
    pub n_samples: usize,
    pub top_k: usize,
    pub apply_offset: bool,
    pub ranker_threshold: f64,
    pub max_points: usize,
    pub coarse: SamplerSpec,
    pub fine: SamplerSpec,
    pub naive: SamplerSpec,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            n_samples: 512,
            top_k: 3,
            apply_offset: true,
            ranker_threshold: 0.5,
            max_points: 256,
            coarse: SamplerSpec::coarse(),
            fine: SamplerSpec::fine(),
            naive: SamplerSpec::naive(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || self.n_samples % 2 != 0 {
            return Err(Error::config("refine.n_samples", "must be even and >= 2"));
        }
        if self.top_k == 0 || self.top_k > self.coarse_n() {
            return Err(Error::config(
                "refine.top_k",
                "must lie in [1, n_samples / 2]",
            ));
        }
        if !(0.0..=1.0).contains(&self.ranker_threshold) {
            return Err(Error::config(
                "refine.ranker_threshold",
                "must lie in [0, 1]",
            ));
        }
        if self.max_points == 0 {
            return Err(Error::config("refine.max_points", "must be >= 1"));
        }
        self.coarse.validate()?;
        self.fine.validate()?;
        self.naive.validate()
    }

    pub fn coarse_n(&self) -> usize {
        self.n_samples / 2
    }

    pub fn fine_n(&self) -> usize {
        self.n_samples - self.n_samples / 2
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Naive,
    #[default]
    C2f,
}

/// `n` split as evenly as possible into `k` parts, larger parts first.
pub fn split_even(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

struct Scorer<'w, 'c> {
    ev: Evaluator<'w>,
    cloud: LocalCloud<'c>,
    rng: ChaCha8Rng,
    max_points: usize,
    buf: Vec<[f32; 3]>,
}

impl<'w, 'c> Scorer<'w, 'c> {
    fn new(
        w: &'w Weights,
        cloud: &'c [Point3],
        anchor: &Box3,
        max_points: usize,
        seed: u64,
    ) -> Self {
        Scorer {
            ev: Evaluator::new(w),
            cloud: LocalCloud::new(cloud, anchor, 6.0),
            rng: stream(seed, &[TAG_REFINE, 1]),
            max_points,
            buf: Vec::new(),
        }
    }

    /// Prediction and whether the crop held any point.
    fn score(&mut self, b: &Box3) -> Result<(Prediction, bool)> {
        crop_into(self.cloud.for_box(b), b, &mut self.buf);
        if self.buf.is_empty() {
            return Ok((Prediction::EMPTY, false));
        }
        if self.buf.len() > self.max_points {
            let mut keep =
                sample_indices(&mut self.rng, self.buf.len(), self.max_points).into_vec();
            keep.sort_unstable();
            let picked: Vec<[f32; 3]> = keep.into_iter().map(|i| self.buf[i]).collect();
            self.buf = picked;
        }
        let p = self.ev.eval(&self.buf, &box_features(b))?;
        Ok((p, true))
    }

    fn score_all(&mut self, boxes: &[Box3]) -> Result<(Vec<Prediction>, bool)> {
        let mut any = false;
        let mut out = Vec::with_capacity(boxes.len());
        for b in boxes {
            let (p, has) = self.score(b)?;
            any |= has;
            out.push(p);
        }
        Ok((out, any))
    }
}

/// Ranker prediction for a single box against `cloud`.
pub fn score_box(
    w: &Weights,
    cloud: &[Point3],
    b: &Box3,
    max_points: usize,
    seed: u64,
) -> Result<Prediction> {
    Scorer::new(w, cloud, b, max_points, seed)
        .score(b)
        .map(|r| r.0)
}

fn best_of(preds: &[Prediction]) -> usize {
    let ious: Vec<f64> = preds.iter().map(|p| p.iou).collect();
    descending_order(&ious)[0]
}

/// Samples candidates around `init`, scores them with the ranker and
/// returns the best one (offset-corrected when enabled) with its predicted
/// IoU as `ranker_score`.
pub fn refine_box(
    w: &Weights,
    cloud: &[Point3],
    init: &LabeledBox,
    cfg: &RefineConfig,
    mode: RefineMode,
    seed: u64,
) -> Result<LabeledBox> {
    cfg.validate()?;
    let mut scorer = Scorer::new(w, cloud, &init.bbox, cfg.max_points, seed);
    let finish = |b: &Box3, p: &Prediction| {
        let bbox = if cfg.apply_offset {
            apply_offset(b, &p.offset)
        } else {
            *b
        };
        LabeledBox {
            bbox,
            ranker_score: Some(p.iou),
            ..*init
        }
    };
    let empty = LabeledBox {
        ranker_score: Some(0.0),
        ..*init
    };
    match mode {
        RefineMode::Naive => {
            let cands = sample_candidates(&init.bbox, &cfg.naive, cfg.n_samples, seed)?;
            let (preds, any) = scorer.score_all(&cands)?;
            if !any {
                return Ok(empty);
            }
            let i = best_of(&preds);
            Ok(finish(&cands[i], &preds[i]))
        }
        RefineMode::C2f => {
            let coarse = sample_candidates(&init.bbox, &cfg.coarse, cfg.coarse_n(), seed)?;
            let (preds, any) = scorer.score_all(&coarse)?;
            if !any {
                return Ok(empty);
            }
            let ious: Vec<f64> = preds.iter().map(|p| p.iou).collect();
            let top: Vec<usize> = descending_order(&ious)
                .into_iter()
                .take(cfg.top_k)
                .collect();
            let mut fine = Vec::with_capacity(cfg.fine_n());
            for (j, (&ti, n)) in top
                .iter()
                .zip(split_even(cfg.fine_n(), top.len()))
                .enumerate()
            {
                if n == 0 {
                    continue;
                }
                let anchor = if cfg.apply_offset {
                    apply_offset(&coarse[ti], &preds[ti].offset)
                } else {
                    coarse[ti]
                };
                let s = derive_seed(seed, &[TAG_REFINE, j as u64 + 2]);
                fine.extend(sample_candidates(&anchor, &cfg.fine, n, s)?);
            }
            let (fpreds, _) = scorer.score_all(&fine)?;
            let i = best_of(&fpreds);
            Ok(finish(&fine[i], &fpreds[i]))
        }
    }
}

/// Keeps labels whose ranker score reaches `threshold`, in order.
pub fn filter_by_ranker(labels: &[LabeledBox], threshold: f64) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let s = l.ranker_score.ok_or(Error::MissingScore { index: i })?;
        if s >= threshold {
            out.push(*l);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::LabelSource;
    use rand::SeedableRng;

    fn car() -> Box3 {
        Box3::new([12.0, -3.0, 0.8], [4.6, 1.9, 1.6], 0.4).unwrap()
    }

    #[test]
    fn offset_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = draw(&car(), &SamplerSpec::naive(), &mut rng);
            let b = draw(&car(), &SamplerSpec::naive(), &mut rng);
            let back = apply_offset(&a, &encode_offset(&a, &b));
            for (x, y) in [
                (back.cx, b.cx),
                (back.cy, b.cy),
                (back.cz, b.cz),
                (back.l, b.l),
                (back.w, b.w),
                (back.h, b.h),
            ] {
                assert!((x - y).abs() < 1e-6);
            }
            assert!(wrap_angle(back.yaw - b.yaw).abs() < 1e-6);
        }
        assert_eq!(encode_offset(&car(), &car()), [0.0; OFFSET_DIM]);
    }

    #[test]
    fn zero_noise_returns_init() {
        let spec = SamplerSpec {
            mode: SamplerMode::Naive,
            translation: 0.0,
            z: 0.0,
            size: [0.0; 3],
            yaw: 0.0,
        };
        assert_eq!(sample_candidates(&car(), &spec, 1, 3).unwrap(), vec![car()]);
        assert!(sample_candidates(&car(), &spec, 0, 3).is_err());
        let bad = SamplerSpec { z: -1.0, ..spec };
        assert!(sample_candidates(&car(), &bad, 1, 3).is_err());
    }

    #[test]
    fn coarse_keeps_size_and_heading() {
        let init = car();
        let c = sample_candidates(&init, &SamplerSpec::coarse(), 500, 1).unwrap();
        for b in &c {
            assert_eq!((b.l, b.w, b.h, b.yaw), (init.l, init.w, init.h, init.yaw));
            assert!((b.cx - init.cx).abs() <= 1.0 && (b.cy - init.cy).abs() <= 1.0);
        }
    }

    #[test]
    fn naive_translation_std_is_one() {
        let init = car();
        let c = sample_candidates(&init, &SamplerSpec::naive(), 100_000, 2).unwrap();
        let dx: Vec<f64> = c.iter().map(|b| b.cx - init.cx).collect();
        let mean = dx.iter().sum::<f64>() / dx.len() as f64;
        let var = dx.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (dx.len() - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn loss_examples() {
        let zero = [0.0; OFFSET_DIM];
        let p = Prediction {
            iou: 0.8,
            offset: zero,
        };
        assert_eq!(ranker_loss(&p, 0.8, &zero).loss, 0.0);
        let off = Prediction {
            iou: 0.3,
            offset: [2.0; OFFSET_DIM],
        };
        let l = ranker_loss(&off, 0.2, &zero);
        assert!((l.loss - 5.0 * 0.01).abs() < 1e-12);
        assert_eq!(l.d_offset, zero);
        let l = ranker_loss(&off, 0.3, &zero);
        assert!((l.loss - (0.0 + 7.0 * 1.5)).abs() < 1e-12);
        assert_eq!(l.d_offset, [1.0; OFFSET_DIM]);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let t = [0.1, -0.3, 0.0, 0.2, 0.05, -0.1, 0.3];
        let p = Prediction {
            iou: 0.55,
            offset: [0.4, 0.9, -1.7, 0.1, 0.3, 2.5, -0.2],
        };
        let g = ranker_loss(&p, 0.6, &t);
        let h = 1e-6;
        let f = |q: &Prediction| ranker_loss(q, 0.6, &t).loss;
        let mut q = p;
        q.iou += h;
        let mut r = p;
        r.iou -= h;
        assert!(((f(&q) - f(&r)) / (2.0 * h) - g.d_iou).abs() < 1e-6);
        for k in 0..OFFSET_DIM {
            let mut q = p;
            q.offset[k] += h;
            let mut r = p;
            r.offset[k] -= h;
            assert!(((f(&q) - f(&r)) / (2.0 * h) - g.d_offset[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn split_is_even() {
        assert_eq!(split_even(256, 3), vec![86, 85, 85]);
        assert_eq!(split_even(256, 3).iter().sum::<usize>(), 256);
        assert_eq!(split_even(2, 3), vec![1, 1, 0]);
    }

    fn labeled(score: Option<f64>) -> LabeledBox {
        LabeledBox {
            bbox: car(),
            confidence: 0.9,
            ranker_score: score,
            source: LabelSource::Reference,
        }
    }

    #[test]
    fn ranker_filter_examples() {
        let ls = vec![labeled(Some(0.4)), labeled(Some(0.6)), labeled(Some(1.0))];
        assert_eq!(filter_by_ranker(&ls, 0.0).unwrap(), ls);
        assert_eq!(filter_by_ranker(&ls, 0.5).unwrap(), ls[1..].to_vec());
        assert_eq!(filter_by_ranker(&ls, 1.0).unwrap(), ls[2..].to_vec());
        assert!(matches!(
            filter_by_ranker(&[labeled(None)], 0.1),
            Err(Error::MissingScore { index: 0 })
        ));
    }

    #[test]
    fn crop_normalises_by_half_size() {
        let b = Box3::new([0.0, 0.0, 1.0], [4.0, 2.0, 2.0], 0.0).unwrap();
        let cloud = vec![
            [2.0, 1.0, 2.0],
            [6.0, 0.0, 1.0],
            [6.5, 0.0, 1.0],
            [0.0, 0.0, -2.5],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = crop_normalized(&cloud, &b, 256, &mut rng);
        assert_eq!(c, vec![[1.0, 1.0, 1.0], [3.0, 0.0, 0.0]]);
        let many: Vec<Point3> = (0..1000).map(|i| [i as f64 * 1e-3, 0.0, 1.0]).collect();
        assert_eq!(crop_normalized(&many, &b, 256, &mut rng).len(), 256);
    }

    #[test]
    fn no_points_keeps_init_with_zero_score() {
        let w = net::init_weights(&NetSpec::default(), 0).unwrap();
        let init = labeled(None);
        let cfg = RefineConfig {
            n_samples: 16,
            ..RefineConfig::default()
        };
        for mode in [RefineMode::Naive, RefineMode::C2f] {
            let out = refine_box(&w, &[[200.0, 0.0, 0.0]], &init, &cfg, mode, 1).unwrap();
            assert_eq!(out.bbox, init.bbox);
            assert_eq!(out.ranker_score, Some(0.0));
        }
    }
}
