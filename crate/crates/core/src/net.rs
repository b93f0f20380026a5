//! Point-set network: shared per-point MLP, channel-wise max-pool, then a
//! score head and an offset head on the pooled feature concatenated with a
//! small per-box descriptor.
//!
//! Parameters are stored as `f32` in one flat vector. Layer order is the
//! point MLP layers, then score hidden, score output, offset hidden, offset
//! output. Each layer stores its weight matrix input-major (`[in][out]`)
//! followed by its bias (`[out]`).

use std::io::Write;
use std::ops::{Add, AddAssign, Mul};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, TAG_INIT, TAG_TRAIN};

pub const OFFSET_DIM: usize = 7;
pub const WEIGHTS_VERSION: u32 = 1;
const POINT_DIM: usize = 3;
const FORMAT_TAG: &str = "peerlabel-weights";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSpec {
    pub point_mlp_widths: Vec<usize>,
    pub head_hidden: usize,
    /// Length of the per-box descriptor joined to the pooled feature.
    pub extra_feature_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            point_mlp_widths: vec![32, 64, 128],
            head_hidden: 64,
            extra_feature_dim: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

impl Layer {
    fn end(&self) -> usize {
        self.b + self.out
    }
}

#[derive(Clone, Debug)]
struct Layout {
    point: Vec<Layer>,
    score_hidden: Layer,
    score_out: Layer,
    offset_hidden: Layer,
    offset_out: Layer,
    total: usize,
}

impl Layout {
    fn all(&self) -> Vec<Layer> {
        let mut v = self.point.clone();
        v.extend([
            self.score_hidden,
            self.score_out,
            self.offset_hidden,
            self.offset_out,
        ]);
        v
    }

    fn pooled_dim(&self) -> usize {
        self.point.last().map_or(0, |l| l.out)
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.point_mlp_widths.is_empty() || self.point_mlp_widths.contains(&0) {
            return Err(Error::config(
                "net.point_mlp_widths",
                "needs at least one layer, all widths >= 1",
            ));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("net.head_hidden", "must be >= 1"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut at = 0usize;
        let mut layer = |inp: usize, out: usize| {
            let l = Layer {
                inp,
                out,
                w: at,
                b: at + inp * out,
            };
            at = l.end();
            l
        };
        let mut point = Vec::new();
        let mut inp = POINT_DIM;
        for &w in &self.point_mlp_widths {
            point.push(layer(inp, w));
            inp = w;
        }
        let feat = inp + self.extra_feature_dim;
        let score_hidden = layer(feat, self.head_hidden);
        let score_out = layer(self.head_hidden, 1);
        let offset_hidden = layer(feat, self.head_hidden);
        let offset_out = layer(self.head_hidden, OFFSET_DIM);
        Layout {
            point,
            score_hidden,
            score_out,
            offset_hidden,
            offset_out,
            total: at,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub spec: NetSpec,
    pub version: u32,
    pub params: Vec<f32>,
}

impl Weights {
    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Weights {
            spec: spec.clone(),
            version: WEIGHTS_VERSION,
            params: vec![0.0; spec.param_count()],
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.version != WEIGHTS_VERSION {
            return Err(Error::Version {
                found: self.version.to_string(),
                expected: WEIGHTS_VERSION.to_string(),
            });
        }
        let want = self.spec.param_count();
        if self.params.len() != want {
            return Err(Error::LengthMismatch {
                what: "weights/params",
                left: self.params.len(),
                right: want,
            });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(())
    }

    /// Weight matrix (`[in][out]`) and bias of layer `i` in file order.
    pub fn layer(&self, i: usize) -> Option<(&[f32], &[f32])> {
        let l = *self.spec.layout().all().get(i)?;
        Some((&self.params[l.w..l.b], &self.params[l.b..l.end()]))
    }

    /// `(inputs, outputs)` of every layer in file order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.spec
            .layout()
            .all()
            .iter()
            .map(|l| (l.inp, l.out))
            .collect()
    }
}

pub fn init_weights(spec: &NetSpec, seed: u64) -> Result<Weights> {
    let mut w = Weights::zeros(spec)?;
    let mut rng = stream(seed, &[TAG_INIT]);
    for l in spec.layout().all() {
        let a = (6.0 / (l.inp + l.out) as f64).sqrt();
        for p in &mut w.params[l.w..l.b] {
            *p = rng.random_range(-a..a) as f32;
        }
    }
    Ok(w)
}

/// Numeric type the kernels run in.
pub(crate) trait Real:
    Copy + PartialOrd + Add<Output = Self> + Mul<Output = Self> + AddAssign + Send + Sync
{
    const ZERO: Self;
    fn of(v: f64) -> Self;
    fn of32(v: f32) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn of32(v: f32) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    fn of(v: f64) -> Self {
        v
    }
    fn of32(v: f32) -> Self {
        v as f64
    }
    fn f64(self) -> f64 {
        self
    }
}

/// `out = relu?(W^T x + b)` with `W` stored input-major.
#[inline]
fn dense<T: Real>(p: &[T], l: &Layer, x: &[T], out: &mut [T], relu: bool) {
    let out = &mut out[..l.out];
    out.copy_from_slice(&p[l.b..l.end()]);
    for (i, &xi) in x[..l.inp].iter().enumerate() {
        if xi == T::ZERO {
            continue;
        }
        let row = &p[l.w + i * l.out..l.w + (i + 1) * l.out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * xi;
        }
    }
    if relu {
        for o in out.iter_mut() {
            if *o < T::ZERO {
                *o = T::ZERO;
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub iou: f64,
    pub offset: [f64; OFFSET_DIM],
}

impl Prediction {
    pub const EMPTY: Prediction = Prediction {
        iou: 0.0,
        offset: [0.0; OFFSET_DIM],
    };
}

struct Scratch<T> {
    a: Vec<T>,
    b: Vec<T>,
    pooled: Vec<T>,
    feat: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(layout: &Layout) -> Self {
        let widest = layout
            .all()
            .iter()
            .map(|l| l.inp.max(l.out))
            .max()
            .unwrap_or(1);
        Scratch {
            a: vec![T::ZERO; widest],
            b: vec![T::ZERO; widest],
            pooled: vec![T::ZERO; layout.pooled_dim()],
            feat: vec![T::ZERO; layout.score_hidden.inp],
            hidden: vec![T::ZERO; layout.score_hidden.out],
        }
    }
}

fn heads<T: Real>(p: &[T], lay: &Layout, s: &mut Scratch<T>, extra: &[f64]) -> Prediction {
    let g = lay.pooled_dim();
    s.feat[..g].copy_from_slice(&s.pooled);
    for (f, &e) in s.feat[g..].iter_mut().zip(extra) {
        *f = T::of(e);
    }
    let mut z = [T::ZERO; OFFSET_DIM];
    dense(p, &lay.score_hidden, &s.feat, &mut s.hidden, true);
    dense(p, &lay.score_out, &s.hidden, &mut z, false);
    let iou = sigmoid(z[0].f64());
    dense(p, &lay.offset_hidden, &s.feat, &mut s.hidden, true);
    dense(p, &lay.offset_out, &s.hidden, &mut z, false);
    Prediction {
        iou,
        offset: z.map(|v| v.f64()),
    }
}

fn forward_with<T: Real>(
    p: &[T],
    lay: &Layout,
    s: &mut Scratch<T>,
    points: &[[f32; 3]],
    extra: &[f64],
) -> Prediction {
    if points.is_empty() {
        return Prediction::EMPTY;
    }
    s.pooled.iter_mut().for_each(|v| *v = T::ZERO);
    for pt in points {
        for k in 0..POINT_DIM {
            s.a[k] = T::of32(pt[k]);
        }
        for l in &lay.point {
            dense(p, l, &s.a, &mut s.b, true);
            std::mem::swap(&mut s.a, &mut s.b);
        }
        for (m, &v) in s.pooled.iter_mut().zip(&s.a) {
            if v > *m {
                *m = v;
            }
        }
    }
    heads(p, lay, s, extra)
}

fn check_extra(spec: &NetSpec, extra: &[f64]) -> Result<()> {
    if extra.len() != spec.extra_feature_dim {
        return Err(Error::LengthMismatch {
            what: "extra features",
            left: extra.len(),
            right: spec.extra_feature_dim,
        });
    }
    Ok(())
}

/// Predicted IoU (logistic-squashed) and raw offset. An empty point set
/// yields [`Prediction::EMPTY`].
pub fn forward(w: &Weights, points: &[[f32; 3]], extra: &[f64]) -> Result<Prediction> {
    check_extra(&w.spec, extra)?;
    let lay = w.spec.layout();
    let p: Vec<f64> = w.params.iter().map(|&v| v as f64).collect();
    let mut s = Scratch::new(&lay);
    Ok(forward_with(&p, &lay, &mut s, points, extra))
}

/// Reusable single-precision evaluator for scoring many inputs with one
/// set of weights.
pub struct Evaluator<'w> {
    w: &'w Weights,
    lay: Layout,
    s: Scratch<f32>,
}

impl<'w> Evaluator<'w> {
    pub fn new(w: &'w Weights) -> Self {
        let lay = w.spec.layout();
        let s = Scratch::new(&lay);
        Evaluator { w, lay, s }
    }

    pub fn eval(&mut self, points: &[[f32; 3]], extra: &[f64]) -> Result<Prediction> {
        check_extra(&self.w.spec, extra)?;
        Ok(forward_with(
            &self.w.params,
            &self.lay,
            &mut self.s,
            points,
            extra,
        ))
    }
}

/// One training input with the loss gradient at the network outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputGrad<'a> {
    pub points: &'a [[f32; 3]],
    pub extra: &'a [f64],
    /// dL/d(iou_pred), taken after the logistic.
    pub d_iou: f64,
    pub d_offset: [f64; OFFSET_DIM],
}

struct Tape<T> {
    /// Post-activation outputs of each point layer, `[n_points * width]`.
    acts: Vec<Vec<T>>,
    argmax: Vec<usize>,
    feat: Vec<T>,
    score_h: Vec<T>,
    offset_h: Vec<T>,
    pred: Prediction,
}

fn record<T: Real>(p: &[T], lay: &Layout, points: &[[f32; 3]], extra: &[f64]) -> Tape<T> {
    let n = points.len();
    let mut acts: Vec<Vec<T>> = lay.point.iter().map(|l| vec![T::ZERO; n * l.out]).collect();
    let mut input = [T::ZERO; POINT_DIM];
    for (i, pt) in points.iter().enumerate() {
        for k in 0..POINT_DIM {
            input[k] = T::of32(pt[k]);
        }
        for (li, l) in lay.point.iter().enumerate() {
            let (prev, cur) = acts.split_at_mut(li);
            let x: &[T] = if li == 0 {
                &input
            } else {
                &prev[li - 1][i * l.inp..(i + 1) * l.inp]
            };
            dense(p, l, x, &mut cur[0][i * l.out..(i + 1) * l.out], true);
        }
    }
    let g = lay.pooled_dim();
    let last = acts.last().unwrap();
    let mut argmax = vec![0usize; g];
    let mut feat = vec![T::ZERO; lay.score_hidden.inp];
    for c in 0..g {
        let mut best = last[c];
        for i in 1..n {
            let v = last[i * g + c];
            if v > best {
                best = v;
                argmax[c] = i;
            }
        }
        feat[c] = best;
    }
    for (f, &e) in feat[g..].iter_mut().zip(extra) {
        *f = T::of(e);
    }
    let mut score_h = vec![T::ZERO; lay.score_hidden.out];
    let mut offset_h = vec![T::ZERO; lay.offset_hidden.out];
    let mut z = [T::ZERO; OFFSET_DIM];
    dense(p, &lay.score_hidden, &feat, &mut score_h, true);
    dense(p, &lay.score_out, &score_h, &mut z, false);
    let iou = sigmoid(z[0].f64());
    dense(p, &lay.offset_hidden, &feat, &mut offset_h, true);
    dense(p, &lay.offset_out, &offset_h, &mut z, false);
    Tape {
        acts,
        argmax,
        feat,
        score_h,
        offset_h,
        pred: Prediction {
            iou,
            offset: z.map(|v| v.f64()),
        },
    }
}

/// Backprop through one dense layer: accumulates parameter gradients and
/// writes dL/dx into `dx` when given. `dy` is the gradient after any ReLU
/// masking.
#[inline]
fn dense_back<T: Real>(
    p: &[T],
    l: &Layer,
    x: &[T],
    dy: &[T],
    grad: &mut [T],
    dx: Option<&mut [T]>,
) {
    for (gb, &d) in grad[l.b..l.end()].iter_mut().zip(dy) {
        *gb += d;
    }
    for (i, &xi) in x[..l.inp].iter().enumerate() {
        if xi == T::ZERO {
            continue;
        }
        let row = &mut grad[l.w + i * l.out..l.w + (i + 1) * l.out];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g += d * xi;
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx[..l.inp].iter_mut().enumerate() {
            let row = &p[l.w + i * l.out..l.w + (i + 1) * l.out];
            let mut acc = T::ZERO;
            for (&wv, &d) in row.iter().zip(dy) {
                acc += wv * d;
            }
            *dxi = acc;
        }
    }
}

fn relu_mask<T: Real>(d: &mut [T], y: &[T]) {
    for (dv, &yv) in d.iter_mut().zip(y) {
        if !(yv > T::ZERO) {
            *dv = T::ZERO;
        }
    }
}

/// Output gradients `(loss, dL/d iou, dL/d offset)` for a prediction.
pub(crate) type LossFn<'f> = dyn FnMut(usize, &Prediction) -> (f64, f64, [f64; OFFSET_DIM]) + 'f;

/// Runs one sample forward, asks `loss` for the output gradients and adds
/// the parameter gradient into `grad`. Returns the loss value.
fn accumulate<T: Real>(
    p: &[T],
    lay: &Layout,
    points: &[[f32; 3]],
    extra: &[f64],
    loss: impl FnOnce(&Prediction) -> (f64, f64, [f64; OFFSET_DIM]),
    grad: &mut [T],
) -> f64 {
    if points.is_empty() {
        return loss(&Prediction::EMPTY).0;
    }
    let t = record(p, lay, points, extra);
    let (value, d_iou, d_offset) = loss(&t.pred);
    let mut dfeat = vec![T::ZERO; t.feat.len()];
    let mut tmp = vec![T::ZERO; t.feat.len()];

    let s = t.pred.iou;
    let dz = [T::of(d_iou * s * (1.0 - s))];
    let mut dh = vec![T::ZERO; lay.score_hidden.out];
    dense_back(p, &lay.score_out, &t.score_h, &dz, grad, Some(&mut dh));
    relu_mask(&mut dh, &t.score_h);
    dense_back(p, &lay.score_hidden, &t.feat, &dh, grad, Some(&mut dfeat));

    let doff: Vec<T> = d_offset.iter().map(|&v| T::of(v)).collect();
    dense_back(p, &lay.offset_out, &t.offset_h, &doff, grad, Some(&mut dh));
    relu_mask(&mut dh, &t.offset_h);
    dense_back(p, &lay.offset_hidden, &t.feat, &dh, grad, Some(&mut tmp));
    for (a, &b) in dfeat.iter_mut().zip(&tmp) {
        *a += b;
    }

    // route pooled gradients to the winning point of each channel
    let g = lay.pooled_dim();
    let widest = lay.point.iter().map(|l| l.inp.max(l.out)).max().unwrap();
    let mut routed: Vec<(usize, Vec<T>)> = Vec::new();
    for c in 0..g {
        if dfeat[c] == T::ZERO {
            continue;
        }
        let i = t.argmax[c];
        let slot = match routed.iter().position(|(pi, _)| *pi == i) {
            Some(s) => s,
            None => {
                routed.push((i, vec![T::ZERO; widest]));
                routed.len() - 1
            }
        };
        routed[slot].1[c] += dfeat[c];
    }
    routed.sort_unstable_by_key(|r| r.0);

    let mut dx = vec![T::ZERO; widest];
    let mut input = [T::ZERO; POINT_DIM];
    for (i, mut dy) in routed {
        for (li, l) in lay.point.iter().enumerate().rev() {
            let y = &t.acts[li][i * l.out..(i + 1) * l.out];
            relu_mask(&mut dy[..l.out], y);
            let x: &[T] = if li == 0 {
                for k in 0..POINT_DIM {
                    input[k] = T::of32(points[i][k]);
                }
                &input
            } else {
                &t.acts[li - 1][i * l.inp..(i + 1) * l.inp]
            };
            if li == 0 {
                dense_back(p, l, x, &dy[..l.out], grad, None);
            } else {
                dense_back(p, l, x, &dy[..l.out], grad, Some(&mut dx));
                dy[..l.inp].copy_from_slice(&dx[..l.inp]);
            }
        }
    }
    value
}

fn check_batch(spec: &NetSpec, batch: &[OutputGrad]) -> Result<()> {
    for item in batch {
        check_extra(spec, item.extra)?;
        if !item.d_iou.is_finite() || item.d_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("output gradient"));
        }
    }
    Ok(())
}

/// Exact parameter gradient of `sum_k <dL/dout_k, out_k>` over the batch.
pub fn backward(w: &Weights, batch: &[OutputGrad]) -> Result<Vec<f64>> {
    w.validate()?;
    check_batch(&w.spec, batch)?;
    let lay = w.spec.layout();
    let p: Vec<f64> = w.params.iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0; lay.total];
    for item in batch {
        let out = (0.0, item.d_iou, item.d_offset);
        accumulate(&p, &lay, item.points, item.extra, |_| out, &mut grad);
    }
    Ok(grad)
}

/// Single-precision loss and gradient over a mini-batch of
/// `(points, extra)` inputs, as used by the training loops. Returns the
/// summed loss and the summed parameter gradient.
pub(crate) fn batch_loss_grad(
    w: &Weights,
    inputs: &[(&[[f32; 3]], &[f64])],
    loss: &mut LossFn,
) -> Result<(f64, Vec<f64>)> {
    let lay = w.spec.layout();
    let mut g = vec![0.0f32; lay.total];
    let mut total = 0.0;
    for (k, (points, extra)) in inputs.iter().enumerate() {
        check_extra(&w.spec, extra)?;
        total += accumulate(&w.params, &lay, points, extra, |p| loss(k, p), &mut g);
    }
    let grad: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    if !total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(w: &Weights, lr: f64) -> Self {
        let n = w.params.len();
        OptimState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(w: &Weights, grads: &[f64], opt: &OptimState) -> Result<(Weights, OptimState)> {
    let n = w.params.len();
    if grads.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            opt.m.len(),
            opt.v.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let mut w = w.clone();
    let mut o = opt.clone();
    o.step += 1;
    let c1 = 1.0 - o.beta1.powi(o.step as i32);
    let c2 = 1.0 - o.beta2.powi(o.step as i32);
    for i in 0..n {
        let g = grads[i];
        o.m[i] = o.beta1 * o.m[i] + (1.0 - o.beta1) * g;
        o.v[i] = o.beta2 * o.v[i] + (1.0 - o.beta2) * g * g;
        let mhat = o.m[i] / c1;
        let vhat = o.v[i] / c2;
        let upd = o.lr * mhat / (vhat.sqrt() + o.eps);
        w.params[i] = (w.params[i] as f64 - upd) as f32;
    }
    Ok((w, o))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate follows a cosine from `lr` down to
    /// `lr * final_lr_ratio` over the whole run; 1 keeps it constant.
    pub final_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            final_lr_ratio: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::config("train.final_lr_ratio", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let lo = self.lr * self.final_lr_ratio;
        let t = if total > 1 {
            step as f64 / (total - 1) as f64
        } else {
            1.0
        };
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Mini-batch Adam over `n` samples with a seeded shuffle per epoch.
/// `input(i)` yields the network input of sample `i`; `loss(i, pred)` its
/// loss and output gradients. Returns the weights and the mean loss seen
/// during each epoch.
pub(crate) fn fit<'a>(
    init: Weights,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
    input: impl Fn(usize) -> (&'a [[f32; 3]], &'a [f64]),
    loss: impl Fn(usize, &Prediction) -> (f64, f64, [f64; OFFSET_DIM]),
) -> Result<(Weights, Vec<f64>)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Empty("training samples"));
    }
    let mut w = init;
    let mut opt = OptimState::new(&w, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(seed, &[TAG_TRAIN, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<_> = chunk.iter().map(|&i| input(i)).collect();
            let scale = 1.0 / chunk.len() as f64;
            let (l, g) = batch_loss_grad(&w, &inputs, &mut |k, p| {
                let (v, di, mut d) = loss(chunk[k], p);
                d.iter_mut().for_each(|x| *x *= scale);
                (v, di * scale, d)
            })?;
            total += l;
            opt.lr = cfg.lr_at(step, total_steps);
            step += 1;
            (w, opt) = adam_step(&w, &g, &opt)?;
        }
        history.push(total / n as f64);
    }
    Ok((w, history))
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: NetSpec,
    param_count: usize,
}

pub fn save_weights(w: &Weights, path: &Path) -> Result<()> {
    w.validate()?;
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: w.version,
        spec: w.spec.clone(),
        param_count: w.params.len(),
    };
    let mut bytes = Vec::with_capacity(w.params.len() * 4);
    for p in &w.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let mut text = serde_json::to_string(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    text.push_str(&B64.encode(&bytes));
    text.push('\n');
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::corrupt(path, "missing header"))?;
    let header: Header =
        serde_json::from_str(head).map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::corrupt(
            path,
            format!("unknown format `{}`", header.format),
        ));
    }
    if header.version != WEIGHTS_VERSION {
        return Err(Error::Version {
            found: header.version.to_string(),
            expected: WEIGHTS_VERSION.to_string(),
        });
    }
    let blob = lines
        .next()
        .ok_or_else(|| Error::corrupt(path, "missing parameter blob"))?;
    let bytes = B64
        .decode(blob.trim())
        .map_err(|e| Error::corrupt(path, format!("parameter blob: {e}")))?;
    if bytes.len() != header.param_count * 4 {
        return Err(Error::corrupt(
            path,
            format!(
                "expected {} parameters, found {} bytes",
                header.param_count,
                bytes.len()
            ),
        ));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let w = Weights {
        spec: header.spec,
        version: header.version,
        params,
    };
    w.validate()
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(w)
}
