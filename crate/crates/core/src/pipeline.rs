//! Label preparation and the two self-training rounds.
//!
//! Round one refines the reference labels with the ranker and trains the
//! detector on frames where the two agents were close. Round two lets that
//! detector label every frame, filters its output by a distance-dependent
//! confidence bar and the ranker, and retrains on everything.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{self, detect_prepared, remove_ground, FrameProposals, ProposalConfig};
use crate::error::{Error, Result};
use crate::geom::{count_points_in_box, nms, Box3, Point3};
use crate::metrics::{average_precision, Roi};
use crate::net::{NetSpec, TrainConfig, Weights};
use crate::ranker::{filter_by_ranker, refine_box, score_box, RefineConfig, RefineMode};
use crate::rng::{derive_seed, TAG_GROUND, TAG_REFINE};
use crate::simkit::{LabelSource, LabeledBox, SceneFrame};

/// Which frames the first round trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    #[default]
    Near,
    Far,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub roi_x: [f64; 2],
    pub roi_y: [f64; 2],
    /// Non-ground ego points a label must contain to survive basic filtering.
    pub min_points: usize,
    /// Ego–reference distance up to which a frame counts as near, metres.
    pub t_er: f64,
    pub t_c: f64,
    pub lambda: f64,
    pub threshold_cap: f64,
    pub refine: RefineConfig,
    pub step1_refine_mode: RefineMode,
    pub step2_refine_mode: RefineMode,
    pub detector: ProposalConfig,
    pub detector_net: NetSpec,
    pub detector_train: TrainConfig,
    pub rounds: usize,
    pub curriculum: Curriculum,
    pub step2_distance_filter: bool,
    pub step2_ranker_filter: bool,
    /// Adds refined reference labels of frames within `t_er` to the
    /// second-round labels.
    pub step2_union_near_reference: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            roi_x: [-80.0, 80.0],
            roi_y: [-40.0, 40.0],
            min_points: 1,
            t_er: 40.0,
            t_c: 0.2,
            lambda: 1.0,
            threshold_cap: 0.95,
            refine: RefineConfig::default(),
            step1_refine_mode: RefineMode::C2f,
            step2_refine_mode: RefineMode::C2f,
            detector: ProposalConfig::default(),
            detector_net: NetSpec {
                point_mlp_widths: vec![16, 32, 64],
                head_hidden: 32,
                extra_feature_dim: detector::DETECTOR_FEATURES,
            },
            detector_train: TrainConfig {
                epochs: 24,
                batch_size: 64,
                lr: 2e-3,
                final_lr_ratio: 0.01,
            },
            rounds: 2,
            curriculum: Curriculum::Near,
            step2_distance_filter: true,
            step2_ranker_filter: true,
            step2_union_near_reference: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("roi_x", self.roi_x), ("roi_y", self.roi_y)] {
            if !(r[0] < r[1]) {
                return Err(Error::config(name, "needs lo < hi"));
            }
        }
        if !(self.t_er > 0.0) {
            return Err(Error::config("t_er", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.t_c) {
            return Err(Error::config("t_c", "must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be >= 0"));
        }
        if !(self.threshold_cap > self.t_c && self.threshold_cap <= 1.0) {
            return Err(Error::config("threshold_cap", "must lie in (t_c, 1]"));
        }
        if !(1..=2).contains(&self.rounds) {
            return Err(Error::config("rounds", "must be 1 or 2"));
        }
        self.refine.validate()?;
        self.detector.validate()?;
        self.detector_net.validate()?;
        self.detector_train.validate()
    }

    pub fn roi(&self) -> Roi {
        Roi {
            x: self.roi_x,
            y: self.roi_y,
        }
    }

    /// `min(cap, T_c + lambda / d)`.
    pub fn confidence_threshold(&self, d: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::config("distance", "must be > 0"));
        }
        Ok((self.t_c + self.lambda / d).min(self.threshold_cap))
    }
}

/// Keeps labels centred in the ROI that hold at least `min_points` of
/// `cloud` (normally the non-ground ego points).
pub fn basic_filter(
    labels: &[LabeledBox],
    cloud: &[Point3],
    cfg: &PipelineConfig,
) -> Vec<LabeledBox> {
    let roi = cfg.roi();
    labels
        .iter()
        .filter(|l| {
            roi.contains(&l.bbox) && count_points_in_box(cloud, &l.bbox, 1.0) >= cfg.min_points
        })
        .copied()
        .collect()
}

/// Indices of frames with ego–reference distance `<= t_er` and the rest.
pub fn curriculum_split(frames: &[SceneFrame], t_er: f64) -> (Vec<usize>, Vec<usize>) {
    (0..frames.len()).partition(|&i| frames[i].ego_ref_distance <= t_er)
}

pub fn distance_conf_filter(
    labels: &[LabeledBox],
    d: f64,
    cfg: &PipelineConfig,
) -> Result<Vec<LabeledBox>> {
    let t = cfg.confidence_threshold(d)?;
    Ok(labels
        .iter()
        .filter(|l| l.confidence >= t)
        .copied()
        .collect())
}

/// Indices of the first `per_clip` frames of every clip of
/// `frames_per_clip` consecutive frames.
pub fn annotated_subset(len: usize, frames_per_clip: usize, per_clip: usize) -> Vec<usize> {
    (0..len)
        .filter(|i| i % frames_per_clip.max(1) < per_clip)
        .collect()
}

/// Per-frame work shared by every stage: non-ground points for basic
/// filtering and detector proposals.
pub struct Prepared<'a> {
    pub frames: &'a [SceneFrame],
    pub nonground: Vec<Vec<Point3>>,
    pub proposals: Vec<FrameProposals>,
}

impl<'a> Prepared<'a> {
    pub fn new(frames: &'a [SceneFrame], cfg: &ProposalConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (nonground, proposals) = frames
            .par_iter()
            .map(|f| {
                let s = derive_seed(seed, &[TAG_GROUND, f.frame_id]);
                let (ng, _) = remove_ground(&f.ego_cloud, cfg, s);
                let props = detector::prepare_from_nonground(&f.ego_cloud, &ng, cfg, s);
                (ng, props)
            })
            .unzip();
        Ok(Prepared {
            frames,
            nonground,
            proposals,
        })
    }

    fn subset(&self, idx: &[usize]) -> Vec<FrameProposals> {
        idx.iter().map(|&i| self.proposals[i].clone()).collect()
    }
}

fn refine_frame(
    ranker: &Weights,
    frame: &SceneFrame,
    labels: &[LabeledBox],
    cfg: &PipelineConfig,
    mode: RefineMode,
    seed: u64,
) -> Result<Vec<LabeledBox>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = derive_seed(seed, &[TAG_REFINE, frame.frame_id, i as u64]);
            refine_box(ranker, &frame.ego_cloud, l, &cfg.refine, mode, s)
        })
        .collect()
}

/// Basic filter, ranker refinement and ranker thresholding of reference
/// labels for every frame.
pub fn refine_reference_labels(
    data: &Prepared,
    labels: &[Vec<LabeledBox>],
    ranker: &Weights,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<Vec<LabeledBox>>> {
    check_len(data.frames, labels)?;
    data.frames
        .par_iter()
        .zip(labels)
        .zip(&data.nonground)
        .map(|((f, l), ng)| {
            let kept = basic_filter(l, ng, cfg);
            let refined = refine_frame(ranker, f, &kept, cfg, cfg.step1_refine_mode, seed)?;
            filter_by_ranker(&refined, cfg.refine.ranker_threshold)
        })
        .collect()
}

fn check_len<T>(frames: &[SceneFrame], labels: &[T]) -> Result<()> {
    if frames.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "frames/labels",
            left: frames.len(),
            right: labels.len(),
        });
    }
    Ok(())
}

/// Trains a detector on the frames `idx` of `data`.
pub fn train_on(
    data: &Prepared,
    idx: &[usize],
    labels: &[Vec<LabeledBox>],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Weights> {
    check_len(data.frames, labels)?;
    let props = data.subset(idx);
    let ls: Vec<Vec<LabeledBox>> = idx.iter().map(|&i| labels[i].clone()).collect();
    detector::train_on_proposals(
        &props,
        &ls,
        &cfg.detector_net,
        &cfg.detector_train,
        &cfg.detector,
        seed,
    )
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub detector: Weights,
    /// Labels for every frame of the dataset.
    pub labels: Vec<Vec<LabeledBox>>,
    /// Frames the detector was trained on.
    pub trained_on: Vec<usize>,
}

/// Fine-tunes `init` on the frames `idx` of `data`.
pub fn fine_tune_on(
    init: &Weights,
    data: &Prepared,
    idx: &[usize],
    labels: &[Vec<LabeledBox>],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Weights> {
    check_len(data.frames, labels)?;
    let props = data.subset(idx);
    let ls: Vec<Vec<LabeledBox>> = idx.iter().map(|&i| labels[i].clone()).collect();
    detector::fine_tune_on_proposals(init, &props, &ls, &cfg.detector_train, &cfg.detector, seed)
}

/// First round: refined reference labels, detector trained on the
/// curriculum's frames.
pub fn run_step1(
    data: &Prepared,
    ref_labels: &[Vec<LabeledBox>],
    ranker: &Weights,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StepOutput> {
    cfg.validate()?;
    let labels = refine_reference_labels(data, ref_labels, ranker, cfg, seed)?;
    step1_from_labels(data, labels, cfg, seed)
}

/// First round from already refined labels.
pub fn step1_from_labels(
    data: &Prepared,
    labels: Vec<Vec<LabeledBox>>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StepOutput> {
    let (near, far) = curriculum_split(data.frames, cfg.t_er);
    let idx = match cfg.curriculum {
        Curriculum::Near => near,
        Curriculum::Far => far,
        Curriculum::All => (0..data.frames.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::config(
            "t_er",
            format!(
                "no frames selected for the first round with {:?} curriculum; adjust t_er",
                cfg.curriculum
            ),
        ));
    }
    // Same number of gradient steps as a run over every frame, so a small
    // near set is not undertrained.
    let mut c = cfg.clone();
    c.detector_train.epochs = (cfg.detector_train.epochs * data.frames.len()).div_ceil(idx.len());
    let detector = train_on(data, &idx, &labels, &c, seed)?;
    Ok(StepOutput {
        detector,
        labels,
        trained_on: idx,
    })
}

/// Second-round labels: detections filtered by distance-dependent
/// confidence, refined and filtered by the ranker.
pub fn step2_labels(
    data: &Prepared,
    step1: &StepOutput,
    ranker: &Weights,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<Vec<LabeledBox>>> {
    (0..data.frames.len())
        .into_par_iter()
        .map(|fi| {
            let f = &data.frames[fi];
            let mut dets = detect_prepared(&step1.detector, &data.proposals[fi], &cfg.detector)?;
            if cfg.step2_distance_filter {
                dets = distance_conf_filter(&dets, f.ego_ref_distance.max(1e-3), cfg)?;
            }
            let s = derive_seed(seed, &[TAG_REFINE, 2]);
            let mut refined = refine_frame(ranker, f, &dets, cfg, cfg.step2_refine_mode, s)?;
            if cfg.step2_ranker_filter {
                refined = filter_by_ranker(&refined, cfg.refine.ranker_threshold)?;
            }
            if cfg.step2_union_near_reference && f.ego_ref_distance <= cfg.t_er {
                refined.extend(step1.labels[fi].iter().copied());
                refined = nms_labels(&refined, cfg.detector.nms_iou)?;
            }
            Ok(refined)
        })
        .collect()
}

fn nms_labels(labels: &[LabeledBox], iou: f64) -> Result<Vec<LabeledBox>> {
    let boxes: Vec<Box3> = labels.iter().map(|l| l.bbox).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|l| l.ranker_score.unwrap_or(l.confidence))
        .collect();
    let mut keep = nms(&boxes, &scores, iou)?;
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| labels[i]).collect())
}

/// Second round: relabel every frame with the first-round detector and
/// fine-tune it on all frames.
pub fn run_step2(
    data: &Prepared,
    step1: &StepOutput,
    ranker: &Weights,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StepOutput> {
    cfg.validate()?;
    let labels = step2_labels(data, step1, ranker, cfg, seed)?;
    let all: Vec<usize> = (0..data.frames.len()).collect();
    let detector = fine_tune_on(
        &step1.detector,
        data,
        &all,
        &labels,
        cfg,
        derive_seed(seed, &[2]),
    )?;
    Ok(StepOutput {
        detector,
        labels,
        trained_on: all,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub step1: StepOutput,
    pub step2: Option<StepOutput>,
}

impl PipelineOutput {
    pub fn final_step(&self) -> &StepOutput {
        self.step2.as_ref().unwrap_or(&self.step1)
    }
}

/// Both rounds (or only the first when `rounds == 1`).
pub fn run_pipeline(
    data: &Prepared,
    ref_labels: &[Vec<LabeledBox>],
    ranker: &Weights,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PipelineOutput> {
    let step1 = run_step1(data, ref_labels, ranker, cfg, seed)?;
    let step2 = if cfg.rounds >= 2 {
        Some(run_step2(data, &step1, ranker, cfg, seed)?)
    } else {
        None
    };
    Ok(PipelineOutput { step1, step2 })
}

/// Union of several reference label sets, scored by the ranker and
/// de-duplicated by NMS on that score. Survivors keep their union order.
pub fn merge_multi_reference(
    sets: &[Vec<LabeledBox>],
    ranker: &Weights,
    ego_cloud: &[Point3],
    nms_iou: f64,
    max_points: usize,
    seed: u64,
) -> Result<Vec<LabeledBox>> {
    if sets.is_empty() {
        return Err(Error::Empty("reference label sets"));
    }
    let mut union: Vec<LabeledBox> = sets.iter().flatten().copied().collect();
    for (i, l) in union.iter_mut().enumerate() {
        let s = derive_seed(seed, &[TAG_REFINE, 3, i as u64]);
        l.ranker_score = Some(score_box(ranker, ego_cloud, &l.bbox, max_points, s)?.iou);
    }
    nms_labels(&union, nms_iou)
}

/// Evaluation ground truth: ego-frame boxes with at least `min_points`
/// ego returns.
pub fn eval_ground_truth(frames: &[SceneFrame], min_points: u32) -> Vec<Vec<Box3>> {
    frames.iter().map(|f| f.ego_gt(min_points)).collect()
}

/// Detections of `w` on every prepared frame.
pub fn detect_all(
    w: &Weights,
    data: &Prepared,
    cfg: &ProposalConfig,
) -> Result<Vec<Vec<LabeledBox>>> {
    data.proposals
        .iter()
        .map(|p| detect_prepared(w, p, cfg))
        .collect()
}

/// BEV AP of `w` on `data` against `gt`.
pub fn detector_ap(
    w: &Weights,
    data: &Prepared,
    gt: &[Vec<Box3>],
    iou: f64,
    cfg: &PipelineConfig,
) -> Result<f64> {
    let dets = detect_all(w, data, &cfg.detector)?;
    Ok(average_precision(&dets, gt, iou, &cfg.roi()).unwrap_or(0.0))
}

/// Ground-truth boxes as labels, for upper-bound training.
pub fn ground_truth_labels(gt: &[Vec<Box3>]) -> Vec<Vec<LabeledBox>> {
    gt.iter()
        .map(|g| g.iter().map(|b| LabeledBox::ground_truth(*b)).collect())
        .collect()
}

pub fn relabel(labels: &mut [Vec<LabeledBox>], source: LabelSource) {
    for l in labels.iter_mut().flatten() {
        l.source = source;
    }
}
