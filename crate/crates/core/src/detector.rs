//! Toy differentiable BEV detector: a per-cell two-layer perceptron head
//! producing objectness and box regression, with exact reverse-mode
//! gradients with respect to both the parameters and the input grid.
//!
//! Per cell: `h = tanh(W1ᵀz + b1)`, `out = W2ᵀh + b2`. The eight outputs
//! are `[objectness logit, Δcx, Δcy, Δcz, log dx, log dy, log dz, yaw]`
//! with center offsets measured in cells and dims decoded through exp so
//! they stay positive. Cells never see their neighbours, which keeps the
//! backward pass fully analytic and hand-checkable.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom3d::{Box3D, ScoredBox};
use crate::matcher::Tier;
use crate::scene_gen::{BevFeature, GridSpec, Scene};

/// Number of regression channels (everything but the objectness logit).
pub const REG_DIM: usize = 7;
/// Per-cell output width.
pub const OUT_DIM: usize = 8;
/// Decoded log-dims are clamped to this magnitude to keep boxes finite
/// under arbitrary adapted weights.
const LOG_DIM_CLAMP: f64 = 10.0;

/// Flat parameter vector of the detector with named views
/// `W1: C×Hh, b1: Hh, W2: Hh×8, b2: 8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub values: Vec<f64>,
    pub input_channels: usize,
    pub hidden: usize,
}

impl Params {
    pub fn expected_len(input_channels: usize, hidden: usize) -> usize {
        input_channels * hidden + hidden + hidden * OUT_DIM + OUT_DIM
    }

    pub fn zeros(input_channels: usize, hidden: usize) -> Self {
        Self {
            values: vec![0.0; Self::expected_len(input_channels, hidden)],
            input_channels,
            hidden,
        }
    }

    /// Uniform init scaled by fan-in; biases start at zero.
    pub fn random_init(seed: u64, input_channels: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(input_channels, hidden);
        let s1 = 1.0 / (input_channels as f64).sqrt();
        for c in 0..input_channels {
            for k in 0..hidden {
                let idx = params.w1(c, k);
                params.values[idx] = rng.gen_range(-s1..s1);
            }
        }
        let s2 = 1.0 / (hidden as f64).sqrt();
        for k in 0..hidden {
            for o in 0..OUT_DIM {
                let idx = params.w2(k, o);
                params.values[idx] = rng.gen_range(-s2..s2);
            }
        }
        params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn w1(&self, c: usize, k: usize) -> usize {
        c * self.hidden + k
    }

    #[inline]
    pub fn b1(&self, k: usize) -> usize {
        self.input_channels * self.hidden + k
    }

    #[inline]
    pub fn w2(&self, k: usize, o: usize) -> usize {
        self.input_channels * self.hidden + self.hidden + k * OUT_DIM + o
    }

    #[inline]
    pub fn b2(&self, o: usize) -> usize {
        self.input_channels * self.hidden + self.hidden + self.hidden * OUT_DIM + o
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Dense per-cell model output plus cached hidden activations.
#[derive(Debug, Clone)]
pub struct RawPrediction {
    /// H·W·8, channel innermost.
    pub out: Vec<f64>,
    /// H·W·Hh cached tanh activations.
    pub hidden: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

/// Per-cell supervision class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Positive,
    Negative,
    Ignore,
}

/// Dense supervision: a class per cell plus a 7-channel regression target
/// wherever the class is positive.
#[derive(Debug, Clone)]
pub struct TargetMap {
    pub class: Vec<CellClass>,
    /// H·W·7, valid only where positive.
    pub reg: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl TargetMap {
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        let mut ign = 0;
        for c in &self.class {
            match c {
                CellClass::Positive => pos += 1,
                CellClass::Negative => neg += 1,
                CellClass::Ignore => ign += 1,
            }
        }
        (pos, neg, ign)
    }
}

/// Loss gradients with respect to the parameters and the input grid.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub grad_params: Vec<f64>,
    pub grad_input: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("input has {got} channels but the model expects {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("no supervised cells; the caller should skip this update")]
    NoSupervision,
}

#[inline]
fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn bce_with_logit(l: f64, y: f64) -> f64 {
    l.max(0.0) - l * y + (-l.abs()).exp().ln_1p()
}

#[inline]
fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[inline]
fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Runs the per-cell head over the whole grid.
pub fn forward(params: &Params, bev: &BevFeature) -> Result<RawPrediction, DetectorError> {
    if bev.channels != params.input_channels {
        return Err(DetectorError::ShapeMismatch {
            got: bev.channels,
            expected: params.input_channels,
        });
    }
    let cells = bev.h * bev.w;
    let hh = params.hidden;
    let c_in = params.input_channels;
    let mut out = vec![0.0; cells * OUT_DIM];
    let mut hidden = vec![0.0; cells * hh];
    let v = &params.values;
    for cell in 0..cells {
        let z = &bev.values[cell * c_in..(cell + 1) * c_in];
        let h_slice = &mut hidden[cell * hh..(cell + 1) * hh];
        for k in 0..hh {
            let mut a = v[params.b1(k)];
            for (c, &zc) in z.iter().enumerate() {
                a += v[params.w1(c, k)] * zc;
            }
            h_slice[k] = a.tanh();
        }
        let o_slice = &mut out[cell * OUT_DIM..(cell + 1) * OUT_DIM];
        for o in 0..OUT_DIM {
            let mut a = v[params.b2(o)];
            for (k, &hk) in h_slice.iter().enumerate() {
                a += v[params.w2(k, o)] * hk;
            }
            o_slice[o] = a;
        }
    }
    Ok(RawPrediction {
        out,
        hidden,
        h: bev.h,
        w: bev.w,
    })
}

/// Decodes thresholded cells into scored boxes and suppresses overlaps.
pub fn decode(
    raw: &RawPrediction,
    grid: &GridSpec,
    score_thresh: f64,
    nms_thresh: f64,
) -> Vec<ScoredBox> {
    assert!(
        score_thresh > 0.0 && score_thresh < 1.0 && nms_thresh > 0.0 && nms_thresh < 1.0,
        "decode thresholds must lie in (0,1)"
    );
    let mut candidates = Vec::new();
    for row in 0..raw.h {
        for col in 0..raw.w {
            let cell = row * raw.w + col;
            let o = &raw.out[cell * OUT_DIM..(cell + 1) * OUT_DIM];
            let score = sigmoid(o[0]);
            if score < score_thresh {
                continue;
            }
            let cs = grid.cell_size;
            let cx = (col as f64 + 0.5 + o[1]) * cs;
            let cy = (row as f64 + 0.5 + o[2]) * cs;
            let cz = o[3] * cs;
            let dx = o[4].clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp();
            let dy = o[5].clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp();
            let dz = o[6].clamp(-LOG_DIM_CLAMP, LOG_DIM_CLAMP).exp();
            candidates.push(ScoredBox::new(
                Box3D::new(cx, cy, cz, dx, dy, dz, o[7]),
                score,
            ));
        }
    }
    crate::geom3d::nms(&candidates, nms_thresh)
}

/// Regression target encoding a box relative to a cell; exact inverse of
/// the decode arithmetic.
fn encode_box(b: &Box3D, row: usize, col: usize, cs: f64) -> [f64; REG_DIM] {
    [
        b.cx / cs - col as f64 - 0.5,
        b.cy / cs - row as f64 - 0.5,
        b.cz / cs,
        b.dx.ln(),
        b.dy.ln(),
        b.dz.ln(),
        b.yaw,
    ]
}

/// Builds the dense supervision map from tiered boxes: cells inside a
/// High footprint become positives carrying that box's regression target,
/// cells covered only by Medium boxes are ignored, and everything else —
/// including the area under Low boxes — is background.
pub fn assign_targets(boxes: &[(Box3D, Tier)], grid: &GridSpec) -> TargetMap {
    let cells = grid.cells();
    let mut class = vec![CellClass::Negative; cells];
    let mut reg = vec![0.0; cells * REG_DIM];
    for row in 0..grid.h {
        for col in 0..grid.w {
            let (x, y) = grid.cell_center(row, col);
            let mut best_high: Option<(f64, &Box3D)> = None;
            let mut in_medium = false;
            for (b, tier) in boxes {
                match tier {
                    Tier::Low => continue,
                    _ => {
                        if !b.footprint_contains(x, y) {
                            continue;
                        }
                    }
                }
                match tier {
                    Tier::High => {
                        let d2 = (b.cx - x).powi(2) + (b.cy - y).powi(2);
                        if best_high.map_or(true, |(bd, _)| d2 < bd) {
                            best_high = Some((d2, b));
                        }
                    }
                    Tier::Medium => in_medium = true,
                    Tier::Low => unreachable!(),
                }
            }
            let cell = row * grid.w + col;
            if let Some((_, b)) = best_high {
                class[cell] = CellClass::Positive;
                let t = encode_box(b, row, col, grid.cell_size);
                reg[cell * REG_DIM..(cell + 1) * REG_DIM].copy_from_slice(&t);
            } else if in_medium {
                class[cell] = CellClass::Ignore;
            }
        }
    }
    TargetMap {
        class,
        reg,
        h: grid.h,
        w: grid.w,
    }
}

/// Ground-truth boxes as fully trusted supervision (pretraining path).
pub fn targets_from_gt(scene: &Scene, grid: &GridSpec) -> TargetMap {
    let tiered: Vec<(Box3D, Tier)> = scene.gt_boxes.iter().map(|b| (*b, Tier::High)).collect();
    assign_targets(&tiered, grid)
}

struct CellLossAccum {
    bce_sum: f64,
    sl1_sum: f64,
}

/// Mean objectness BCE over supervised cells plus `lambda_reg` times the
/// mean smooth-L1 over regression channels on positive cells.
pub fn detection_loss(
    raw: &RawPrediction,
    targets: &TargetMap,
    lambda_reg: f64,
) -> Result<f64, DetectorError> {
    let (n_pos, n_neg, _) = targets.counts();
    let n_cls = n_pos + n_neg;
    if n_cls == 0 {
        return Err(DetectorError::NoSupervision);
    }
    let acc = loss_sums(raw, targets);
    let mut loss = acc.bce_sum / n_cls as f64;
    if n_pos > 0 {
        loss += lambda_reg * acc.sl1_sum / (REG_DIM * n_pos) as f64;
    }
    Ok(loss)
}

fn loss_sums(raw: &RawPrediction, targets: &TargetMap) -> CellLossAccum {
    let mut acc = CellLossAccum {
        bce_sum: 0.0,
        sl1_sum: 0.0,
    };
    let cells = raw.h * raw.w;
    for cell in 0..cells {
        let o = &raw.out[cell * OUT_DIM..(cell + 1) * OUT_DIM];
        match targets.class[cell] {
            CellClass::Ignore => {}
            CellClass::Negative => acc.bce_sum += bce_with_logit(o[0], 0.0),
            CellClass::Positive => {
                acc.bce_sum += bce_with_logit(o[0], 1.0);
                let t = &targets.reg[cell * REG_DIM..(cell + 1) * REG_DIM];
                for (i, &ti) in t.iter().enumerate() {
                    acc.sl1_sum += smooth_l1(o[1 + i] - ti);
                }
            }
        }
    }
    acc
}

/// Backward pass for a single scene with scene-local normalization.
pub fn backward(
    params: &Params,
    bev: &BevFeature,
    targets: &TargetMap,
    lambda_reg: f64,
) -> Result<(f64, GradPair), DetectorError> {
    let (loss, grad_params, mut grad_inputs) =
        batch_backward(params, &[bev], &[targets], lambda_reg, true)?;
    Ok((
        loss,
        GradPair {
            grad_params,
            grad_input: grad_inputs.pop().unwrap(),
        },
    ))
}

/// Backward over a batch with batch-global normalization: BCE is averaged
/// over every supervised cell in the batch and smooth-L1 over every
/// positive cell, so batch members couple only through the normalizers.
pub fn batch_backward(
    params: &Params,
    bevs: &[&BevFeature],
    targets: &[&TargetMap],
    lambda_reg: f64,
    want_input_grads: bool,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), DetectorError> {
    assert_eq!(bevs.len(), targets.len());
    let mut n_pos = 0usize;
    let mut n_cls = 0usize;
    for t in targets {
        let (p, n, _) = t.counts();
        n_pos += p;
        n_cls += p + n;
    }
    if n_cls == 0 {
        return Err(DetectorError::NoSupervision);
    }
    for bev in bevs {
        if bev.channels != params.input_channels {
            return Err(DetectorError::ShapeMismatch {
                got: bev.channels,
                expected: params.input_channels,
            });
        }
    }
    let per_scene: Vec<(CellLossAccum, Vec<f64>, Vec<f64>)> = bevs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(bev, t)| scene_backward(params, bev, t, lambda_reg, n_cls, n_pos, want_input_grads))
        .collect();

    let mut grad_params = vec![0.0; params.len()];
    let mut grad_inputs = Vec::with_capacity(bevs.len());
    let mut bce_sum = 0.0;
    let mut sl1_sum = 0.0;
    // fixed-order reduction keeps results bitwise identical for any
    // worker count
    for (acc, gp, gi) in per_scene {
        bce_sum += acc.bce_sum;
        sl1_sum += acc.sl1_sum;
        for (dst, src) in grad_params.iter_mut().zip(&gp) {
            *dst += src;
        }
        grad_inputs.push(gi);
    }
    let mut loss = bce_sum / n_cls as f64;
    if n_pos > 0 {
        loss += lambda_reg * sl1_sum / (REG_DIM * n_pos) as f64;
    }
    Ok((loss, grad_params, grad_inputs))
}

fn scene_backward(
    params: &Params,
    bev: &BevFeature,
    targets: &TargetMap,
    lambda_reg: f64,
    n_cls: usize,
    n_pos: usize,
    want_input_grads: bool,
) -> (CellLossAccum, Vec<f64>, Vec<f64>) {
    let hh = params.hidden;
    let c_in = params.input_channels;
    let v = &params.values;
    let cells = bev.h * bev.w;
    let cls_norm = 1.0 / n_cls as f64;
    let reg_norm = if n_pos > 0 {
        lambda_reg / (REG_DIM * n_pos) as f64
    } else {
        0.0
    };

    let mut acc = CellLossAccum {
        bce_sum: 0.0,
        sl1_sum: 0.0,
    };
    let mut grad_params = vec![0.0; params.len()];
    let mut grad_input = if want_input_grads {
        vec![0.0; bev.values.len()]
    } else {
        Vec::new()
    };
    let mut h_buf = vec![0.0; hh];
    let mut d_out = [0.0; OUT_DIM];

    for cell in 0..cells {
        let class = targets.class[cell];
        if class == CellClass::Ignore {
            continue;
        }
        let z = &bev.values[cell * c_in..(cell + 1) * c_in];
        // forward for this cell
        for k in 0..hh {
            let mut a = v[params.b1(k)];
            for (c, &zc) in z.iter().enumerate() {
                a += v[params.w1(c, k)] * zc;
            }
            h_buf[k] = a.tanh();
        }
        let mut out = [0.0; OUT_DIM];
        for (o, out_o) in out.iter_mut().enumerate() {
            let mut a = v[params.b2(o)];
            for (k, &hk) in h_buf.iter().enumerate() {
                a += v[params.w2(k, o)] * hk;
            }
            *out_o = a;
        }
        // loss terms and output gradient
        d_out.fill(0.0);
        let y = if class == CellClass::Positive { 1.0 } else { 0.0 };
        acc.bce_sum += bce_with_logit(out[0], y);
        d_out[0] = (sigmoid(out[0]) - y) * cls_norm;
        if class == CellClass::Positive {
            let t = &targets.reg[cell * REG_DIM..(cell + 1) * REG_DIM];
            for (i, &ti) in t.iter().enumerate() {
                let d = out[1 + i] - ti;
                acc.sl1_sum += smooth_l1(d);
                d_out[1 + i] = smooth_l1_grad(d) * reg_norm;
            }
        }
        // backprop through the head
        for (k, &hk) in h_buf.iter().enumerate() {
            let mut dh = 0.0;
            for (o, &doo) in d_out.iter().enumerate() {
                grad_params[params.w2(k, o)] += hk * doo;
                dh += v[params.w2(k, o)] * doo;
            }
            let da = dh * (1.0 - hk * hk);
            grad_params[params.b1(k)] += da;
            for (c, &zc) in z.iter().enumerate() {
                grad_params[params.w1(c, k)] += zc * da;
                if want_input_grads {
                    grad_input[cell * c_in + c] += v[params.w1(c, k)] * da;
                }
            }
        }
        for (o, &doo) in d_out.iter().enumerate() {
            grad_params[params.b2(o)] += doo;
        }
    }
    (acc, grad_params, grad_input)
}

/// Pretraining configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub lambda_reg: f64,
    pub seed: u64,
}

/// Plain SGD on the detection loss against ground-truth supervision.
/// Deterministic for a fixed seed; zero epochs returns the initialization.
pub fn pretrain(dataset: &[Scene], grid: &GridSpec, cfg: &TrainConfig) -> Params {
    assert!(!dataset.is_empty(), "pretraining needs a non-empty dataset");
    let mut params = Params::random_init(cfg.seed, grid.channels, cfg.hidden);
    let targets: Vec<TargetMap> = dataset.iter().map(|s| targets_from_gt(s, grid)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bevs: Vec<&BevFeature> = chunk.iter().map(|&i| &dataset[i].bev).collect();
            let maps: Vec<&TargetMap> = chunk.iter().map(|&i| &targets[i]).collect();
            match batch_backward(&params, &bevs, &maps, cfg.lambda_reg, false) {
                Ok((_, grad, _)) => {
                    for (p, g) in params.values.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                }
                Err(DetectorError::NoSupervision) => continue,
                Err(e) => panic!("pretrain batch failed: {e}"),
            }
        }
    }
    params
}
