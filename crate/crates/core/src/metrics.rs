//! Label-quality and BEV detection metrics.

use serde::{Deserialize, Serialize};

use crate::geom::{descending_order, iou_bev, Box3};
use crate::simkit::LabeledBox;

/// Axis-aligned region of interest in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Default for Roi {
    fn default() -> Self {
        Roi {
            x: [-80.0, 80.0],
            y: [-40.0, 40.0],
        }
    }
}

impl Roi {
    pub fn contains(&self, b: &Box3) -> bool {
        b.cx >= self.x[0] && b.cx <= self.x[1] && b.cy >= self.y[0] && b.cy <= self.y[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub lo: f64,
    pub hi: f64,
}

impl RangeBin {
    pub fn new(lo: f64, hi: f64) -> Self {
        RangeBin { lo, hi }
    }

    pub fn contains(&self, b: &Box3) -> bool {
        let r = b.bev_range();
        r >= self.lo && r < self.hi
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub range_bins: Vec<RangeBin>,
    pub roi: Roi,
    /// Minimum ego returns for a ground-truth box to count as visible.
    pub min_gt_points: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 0.7],
            range_bins: vec![
                RangeBin::new(0.0, 30.0),
                RangeBin::new(30.0, 50.0),
                RangeBin::new(50.0, 80.0),
                RangeBin::new(0.0, 80.0),
            ],
            roi: Roi::default(),
            min_gt_points: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    /// `(det index, gt index, iou)` in the order the detections claimed them.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching in descending confidence order.
pub fn match_labels(dets: &[LabeledBox], gts: &[Box3], iou_thresh: f64) -> Matching {
    let conf: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let mut claimed = vec![false; gts.len()];
    let mut out = Matching::default();
    for di in descending_order(&conf) {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let iou = iou_bev(&dets[di].bbox, g);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                claimed[gi] = true;
                out.pairs.push((di, gi, iou));
            }
            None => out.unmatched_dets.push(di),
        }
    }
    out.unmatched_dets.sort_unstable();
    out.unmatched_gts = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn add(&mut self, other: PrCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn pr_counts(labels: &[LabeledBox], gts: &[Box3], iou_thresh: f64) -> PrCounts {
    let m = match_labels(labels, gts, iou_thresh);
    PrCounts {
        tp: m.pairs.len(),
        fp: m.unmatched_dets.len(),
        fn_: m.unmatched_gts.len(),
    }
}

/// `(precision, recall)`; with nothing predicted precision is 1 by convention.
pub fn precision_recall(labels: &[LabeledBox], gts: &[Box3], iou_thresh: f64) -> (f64, f64) {
    let c = pr_counts(labels, gts, iou_thresh);
    (c.precision(), c.recall())
}

/// Pooled counts over many frames.
pub fn pr_counts_frames(
    labels: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    iou_thresh: f64,
) -> PrCounts {
    let mut total = PrCounts::default();
    for (l, g) in labels.iter().zip(gts) {
        total.add(pr_counts(l, g, iou_thresh));
    }
    total
}

/// Mean IoU of the pairs matched at `iou_thresh`, pooled over frames.
pub fn mean_matched_iou(
    labels: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    iou_thresh: f64,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (l, g) in labels.iter().zip(gts) {
        for (_, _, iou) in match_labels(l, g, iou_thresh).pairs {
            sum += iou;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// All-point interpolated BEV average precision over a set of frames.
///
/// Boxes outside `roi` are dropped on both sides. Returns `None` when no
/// ground truth remains.
pub fn average_precision(
    dets: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    iou_thresh: f64,
    roi: &Roi,
) -> Option<f64> {
    ap_filtered(dets, gts, iou_thresh, |b| roi.contains(b))
}

/// Raw precision/recall points in descending confidence order, one per
/// detection. `None` when no ground truth lies in `roi`.
pub fn pr_curve(
    dets: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    iou_thresh: f64,
    roi: &Roi,
) -> Option<Vec<(f64, f64)>> {
    pr_points(dets, gts, iou_thresh, |b| roi.contains(b))
}

fn pr_points(
    dets: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    iou_thresh: f64,
    keep: impl Fn(&Box3) -> bool,
) -> Option<Vec<(f64, f64)>> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (fd, fg) in dets.iter().zip(gts) {
        let d: Vec<LabeledBox> = fd.iter().filter(|l| keep(&l.bbox)).copied().collect();
        let g: Vec<Box3> = fg.iter().filter(|b| keep(b)).copied().collect();
        n_gt += g.len();
        let m = match_labels(&d, &g, iou_thresh);
        let mut tp = vec![false; d.len()];
        for (di, _, _) in &m.pairs {
            tp[*di] = true;
        }
        scored.extend(d.iter().zip(tp).map(|(l, t)| (l.confidence, t)));
    }
    if n_gt == 0 {
        return None;
    }
    let conf: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let points = descending_order(&conf)
        .into_iter()
        .map(|i| {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / (tp + fp) as f64, tp as f64 / n_gt as f64)
        })
        .collect();
    Some(points)
}

fn ap_filtered(
    dets: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    iou_thresh: f64,
    keep: impl Fn(&Box3) -> bool,
) -> Option<f64> {
    let points = pr_points(dets, gts, iou_thresh, keep)?;
    let mut precisions: Vec<f64> = points.iter().map(|p| p.0).collect();
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, (_, r)) in precisions.iter().zip(&points) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedAp {
    pub bin: RangeBin,
    pub iou: f64,
    pub ap: Option<f64>,
}

/// AP per range bin; detections and ground truth are binned by their own range.
pub fn range_binned_ap(
    dets: &[Vec<LabeledBox>],
    gts: &[Vec<Box3>],
    cfg: &EvalConfig,
) -> Vec<BinnedAp> {
    let mut out = Vec::new();
    for &iou in &cfg.iou_thresholds {
        for bin in &cfg.range_bins {
            let ap = ap_filtered(dets, gts, iou, |b| cfg.roi.contains(b) && bin.contains(b));
            out.push(BinnedAp {
                bin: bin.clone(),
                iou,
                ap,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub iou: f64,
    pub bin: String,
    pub value: Option<f64>,
}

/// Flat JSON-friendly report keyed by `(metric, iou, bin)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, iou: f64, bin: &str, value: Option<f64>) {
        self.entries.push(MetricEntry {
            metric: metric.to_string(),
            iou,
            bin: bin.to_string(),
            value,
        });
    }

    pub fn get(&self, metric: &str, iou: f64, bin: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.iou == iou && e.bin == bin)
            .and_then(|e| e.value)
    }

    /// Label quality (precision, recall, matched IoU) plus binned AP.
    pub fn evaluate(labels: &[Vec<LabeledBox>], gts: &[Vec<Box3>], cfg: &EvalConfig) -> Self {
        let mut r = MetricsReport::default();
        let in_roi = |v: &[Vec<LabeledBox>]| -> Vec<Vec<LabeledBox>> {
            v.iter()
                .map(|f| {
                    f.iter()
                        .filter(|l| cfg.roi.contains(&l.bbox))
                        .copied()
                        .collect()
                })
                .collect()
        };
        let labels_roi = in_roi(labels);
        let gts_roi: Vec<Vec<Box3>> = gts
            .iter()
            .map(|f| f.iter().filter(|b| cfg.roi.contains(b)).copied().collect())
            .collect();
        for &iou in &cfg.iou_thresholds {
            let c = pr_counts_frames(&labels_roi, &gts_roi, iou);
            r.push("precision", iou, "roi", Some(c.precision()));
            r.push("recall", iou, "roi", Some(c.recall()));
            r.push(
                "matched_iou",
                iou,
                "roi",
                mean_matched_iou(&labels_roi, &gts_roi, iou),
            );
        }
        for b in range_binned_ap(labels, gts, cfg) {
            r.push("ap_bev", b.iou, &b.bin.label(), b.ap);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::LabelSource;

    fn car(x: f64, y: f64) -> Box3 {
        Box3::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap()
    }

    fn det(b: Box3, c: f64) -> LabeledBox {
        LabeledBox {
            bbox: b,
            confidence: c,
            ranker_score: None,
            source: LabelSource::SelfTrained,
        }
    }

    #[test]
    fn matching_examples() {
        let gts = vec![car(0.0, 0.0), car(10.0, 0.0)];
        let dets: Vec<_> = gts.iter().map(|&g| LabeledBox::ground_truth(g)).collect();
        let m = match_labels(&dets, &gts, 0.5);
        assert_eq!(m.pairs.len(), 2);
        assert!(m.unmatched_dets.is_empty() && m.unmatched_gts.is_empty());

        let far = vec![det(car(50.0, 0.0), 0.9)];
        let m = match_labels(&far, &gts, 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_gts, vec![0, 1]);

        let two = vec![det(car(0.3, 0.0), 0.4), det(car(0.1, 0.0), 0.8)];
        let m = match_labels(&two, &gts[..1], 0.5);
        assert_eq!(m.pairs[0].0, 1);
        assert_eq!(m.unmatched_dets, vec![0]);
    }

    #[test]
    fn precision_recall_examples() {
        let gts = vec![car(0.0, 0.0), car(10.0, 0.0)];
        let all: Vec<_> = gts.iter().map(|&g| det(g, 0.9)).collect();
        assert_eq!(precision_recall(&all, &gts, 0.5), (1.0, 1.0));
        assert_eq!(precision_recall(&all[..1], &gts, 0.5), (1.0, 0.5));
        assert_eq!(precision_recall(&[], &[], 0.5), (1.0, 1.0));
    }

    #[test]
    fn ap_examples() {
        let roi = Roi::default();
        let gts = vec![vec![car(5.0, 0.0), car(15.0, 3.0)], vec![car(20.0, -5.0)]];
        let perfect: Vec<Vec<_>> = gts
            .iter()
            .map(|f| f.iter().map(|&g| det(g, 1.0)).collect())
            .collect();
        assert_eq!(average_precision(&perfect, &gts, 0.5, &roi), Some(1.0));
        let wrong: Vec<Vec<_>> = gts
            .iter()
            .map(|f| f.iter().map(|g| det(car(g.cx, g.cy + 6.0), 0.7)).collect())
            .collect();
        assert_eq!(average_precision(&wrong, &gts, 0.5, &roi), Some(0.0));
        assert_eq!(
            average_precision(&perfect, &[vec![], vec![]], 0.5, &roi),
            None
        );
    }

    fn brute_force_ap(flags: &[bool], n_gt: usize) -> f64 {
        // enumerate each recall level and take the max precision at or beyond it
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for &f in flags {
            if f {
                tp += 1
            } else {
                fp += 1
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        let mut ap = 0.0;
        for k in 1..=n_gt {
            let r = k as f64 / n_gt as f64;
            let p = points
                .iter()
                .filter(|(rr, _)| *rr >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += p / n_gt as f64;
        }
        ap
    }

    #[test]
    fn ap_toy_matches_enumeration() {
        // three frames, one GT each; a false positive ranked second
        let gts = vec![
            vec![car(5.0, 0.0)],
            vec![car(8.0, 4.0)],
            vec![car(12.0, -3.0)],
        ];
        let dets = vec![
            vec![det(car(5.0, 0.0), 0.9), det(car(30.0, 10.0), 0.8)],
            vec![det(car(8.0, 4.0), 0.7)],
            vec![det(car(12.0, -3.0), 0.6)],
        ];
        let want = brute_force_ap(&[true, false, true, true], 3);
        // hand value: envelope precisions 1, 3/4, 3/4 at recalls 1/3, 2/3, 1
        assert!((want - (1.0 + 0.75 + 0.75) / 3.0).abs() < 1e-12);
        let got = average_precision(&dets, &gts, 0.5, &Roi::default()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn range_bins_examples() {
        let cfg = EvalConfig::default();
        let gts = vec![vec![car(5.0, 0.0), car(20.0, 1.0)]];
        let dets: Vec<Vec<_>> = gts
            .iter()
            .map(|f| f.iter().map(|&g| det(g, 0.8)).collect())
            .collect();
        let bins = range_binned_ap(&dets, &gts, &cfg);
        for b in bins {
            if b.bin.lo == 0.0 {
                assert_eq!(b.ap, Some(1.0));
            } else {
                assert_eq!(b.ap, None);
            }
        }
    }

    #[test]
    fn roi_excludes_far_boxes() {
        let gts = vec![vec![car(100.0, 0.0), car(10.0, 0.0)]];
        let dets = vec![vec![det(car(10.0, 0.0), 0.9)]];
        assert_eq!(
            average_precision(&dets, &gts, 0.5, &Roi::default()),
            Some(1.0)
        );
    }
}
