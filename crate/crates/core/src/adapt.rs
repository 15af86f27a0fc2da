//! The streaming adaptation loop: single-pass pseudo-labeling, dual
//! perturbation, reliability filtering, SGD updates, EMA cost tracking,
//! and the early cutoff into inference-only mode.
//!
//! Per batch: decode pseudo-labels with the current weights, build the
//! perturbations from the all-trusted pseudo-label loss, decode again at
//! the doubly perturbed point, match the two box sets per scene, tier the
//! pseudo-labels against the global cost quantiles, take one SGD step at
//! the perturbed point with the refined supervision, and update the
//! moving average of batch-mean matching costs. Once that average falls
//! to the stop threshold the weights freeze and the remaining batches are
//! only decoded and recorded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{assign_targets, decode, forward, Params, TargetMap};
use crate::geom3d::{Box3D, ScoredBox};
use crate::matcher::{
    match_predictions, tier_boxes, update_thresholds, CostHistory, MatchResult, Tier,
    SENTINEL_COST,
};
use crate::perturb::{
    input_perturbation, l2_norm, weight_perturbation, DetectionObjective, Objective,
    ObjectiveError, PerturbError,
};
use crate::scene_gen::Scene;

/// Moving average of batch-mean Hungarian costs with the stop threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub c_ema: f64,
    pub gamma: f64,
    pub c_stop: f64,
    pub t: usize,
    pub stopped: bool,
}

impl EmaState {
    pub fn new(gamma: f64, c_stop: f64) -> Self {
        assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0,1]");
        Self {
            c_ema: f64::NAN,
            gamma,
            c_stop,
            t: 0,
            stopped: false,
        }
    }
}

/// EMA recursion; the first observed batch initializes the average.
pub fn update_ema(state: EmaState, c_box_t: f64) -> EmaState {
    debug_assert!(!state.stopped, "EMA must not advance once stopped");
    let c_ema = if state.t == 0 {
        c_box_t
    } else {
        state.gamma * c_box_t + (1.0 - state.gamma) * state.c_ema
    };
    EmaState {
        c_ema,
        t: state.t + 1,
        ..state
    }
}

/// Inclusive stop rule on the moving average.
pub fn should_stop(state: &EmaState) -> bool {
    state.t >= 1 && state.c_ema <= state.c_stop
}

/// Mean per-box cost of a batch with infinite entries replaced by the
/// sentinel; `None` when the batch produced no boxes.
pub fn batch_mean_cost(result: &MatchResult) -> Option<f64> {
    if result.per_box_cost.is_empty() {
        return None;
    }
    let sum: f64 = result
        .per_box_cost
        .iter()
        .map(|c| if c.is_finite() { *c } else { SENTINEL_COST })
        .sum();
    Some(sum / result.per_box_cost.len() as f64)
}

/// Everything the loop needs beyond the stream and the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub rho: f64,
    pub rho_input: Option<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub c_stop: f64,
    pub lambda_reg: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub w_iou: f64,
    pub w_l1: f64,
    pub perturb_weights: bool,
    pub perturb_inputs: bool,
    pub use_matcher: bool,
    /// Record sentinel costs of unmatched boxes in the global history.
    pub include_sentinel_costs: bool,
    /// Inference-only baseline: decode and record, never update.
    pub no_adapt: bool,
}

/// Per-batch telemetry record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub n_pseudo: usize,
    pub n_perturbed: usize,
    pub mean_cost: Option<f64>,
    pub c_ema: Option<f64>,
    pub tier_high: usize,
    pub tier_medium: usize,
    pub tier_low: usize,
    pub loss_clean: Option<f64>,
    pub loss_perturbed: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eps_w_norm: Option<f64>,
    pub eps_z_norms: Vec<f64>,
    pub skipped: Option<String>,
    pub inference_only: bool,
    pub params_hash: u64,
}

/// Full run output: per-batch records plus online-prediction metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub records: Vec<BatchRecord>,
    pub stop_batch: Option<usize>,
    pub params_hash_at_stop: Option<u64>,
    pub params_hash_final: u64,
    /// AP of the online predictions (each batch decoded with the weights
    /// in force at that batch) against the stream's ground truth.
    pub ap_3d: f64,
    pub ap_bev: f64,
    pub eval_iou_thresh: f64,
}

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("non-finite loss or parameters at batch {batch}")]
    NonFinite { batch: usize },
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error("perturbation failed: {0}")]
    Perturb(String),
}

/// FNV-1a over the parameter bytes; used for freeze checks and the
/// determinism criteria.
pub fn params_hash(params: &Params) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for v in &params.values {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

struct TieredBatch {
    tiers_per_scene: Vec<Vec<(Box3D, Tier)>>,
    pooled_costs: Vec<f64>,
    tier_counts: (usize, usize, usize),
    n_perturbed: usize,
}

/// Runs the adaptation loop over the stream, returning the final weights
/// and the per-batch report. `eval_iou_thresh` controls the AP reported
/// for the online predictions.
pub fn adapt_stream(
    theta_s: &Params,
    stream: &[Vec<Scene>],
    cfg: &AdaptConfig,
    eval_iou_thresh: f64,
) -> Result<(Params, AdaptReport), AdaptError> {
    let mut params = theta_s.clone();
    let mut history = CostHistory::new();
    let mut ema = EmaState::new(cfg.gamma, cfg.c_stop);
    let mut records: Vec<BatchRecord> = Vec::with_capacity(stream.len());
    let mut stop_batch: Option<usize> = None;
    let mut params_hash_at_stop: Option<u64> = None;
    let mut online_preds: Vec<(u64, ScoredBox)> = Vec::new();
    let mut gts: Vec<(u64, Box3D)> = Vec::new();
    let mut scene_id: u64 = 0;

    for (batch_idx, batch) in stream.iter().enumerate() {
        let grid = batch[0].bev.grid();
        // (1) pseudo-labels with the current weights; these are also the
        // online predictions reported for this batch
        let mut pseudo_per_scene: Vec<Vec<ScoredBox>> = Vec::with_capacity(batch.len());
        for scene in batch {
            let raw = forward(&params, &scene.bev)?;
            let boxes = decode(&raw, &grid, cfg.score_thresh, cfg.nms_thresh);
            for b in &boxes {
                online_preds.push((scene_id, *b));
            }
            for gt in &scene.gt_boxes {
                gts.push((scene_id, *gt));
            }
            scene_id += 1;
            pseudo_per_scene.push(boxes);
        }

        let inference_only = cfg.no_adapt || ema.stopped;
        let n_pseudo: usize = pseudo_per_scene.iter().map(|p| p.len()).sum();
        if inference_only {
            records.push(BatchRecord {
                batch: batch_idx,
                n_pseudo,
                n_perturbed: 0,
                mean_cost: None,
                c_ema: ema.stopped.then_some(ema.c_ema),
                tier_high: 0,
                tier_medium: 0,
                tier_low: 0,
                loss_clean: None,
                loss_perturbed: None,
                grad_norm: None,
                eps_w_norm: None,
                eps_z_norms: Vec::new(),
                skipped: None,
                inference_only: true,
                params_hash: params_hash(&params),
            });
            continue;
        }

        if n_pseudo == 0 {
            records.push(skip_record(
                batch_idx,
                0,
                &params,
                "no pseudo-labels",
                &ema,
            ));
            continue;
        }

        // (2) perturbations from the fully trusted pseudo-label loss
        let pseudo_boxes_per_scene: Vec<Vec<Box3D>> = pseudo_per_scene
            .iter()
            .map(|boxes| boxes.iter().map(|b| b.box3d).collect())
            .collect();
        let trusted_targets: Vec<TargetMap> = pseudo_boxes_per_scene
            .iter()
            .map(|boxes| {
                let tiered: Vec<(Box3D, Tier)> = boxes.iter().map(|b| (*b, Tier::High)).collect();
                assign_targets(&tiered, &grid)
            })
            .collect();
        let bevs: Vec<&crate::scene_gen::BevFeature> = batch.iter().map(|s| &s.bev).collect();
        let trusted_objective = DetectionObjective::new(
            &params,
            bevs.clone(),
            trusted_targets.iter().collect(),
            cfg.lambda_reg,
        );

        let need_perturbation = cfg.perturb_weights || cfg.perturb_inputs || cfg.use_matcher;
        let (eps_w, eps_z, clean_loss) = if need_perturbation {
            match trusted_objective.eval(&params.values, None, None) {
                Ok(clean) => {
                    if !clean.loss.is_finite() {
                        return Err(AdaptError::NonFinite { batch: batch_idx });
                    }
                    let eps_w = if cfg.perturb_weights {
                        match weight_perturbation(&clean.grad_params, cfg.rho) {
                            Ok(e) => Some(e),
                            Err(PerturbError::DegenerateGradient) => None,
                            Err(e) => return Err(AdaptError::Perturb(e.to_string())),
                        }
                    } else {
                        None
                    };
                    let eps_z = if cfg.perturb_inputs {
                        let rho_z = cfg.rho_input.unwrap_or(cfg.rho);
                        Some(input_perturbation(&clean.grad_inputs, rho_z).0)
                    } else {
                        None
                    };
                    (eps_w, eps_z, Some(clean.loss))
                }
                Err(ObjectiveError::NoSupervision) => {
                    records.push(skip_record(
                        batch_idx,
                        n_pseudo,
                        &params,
                        "no supervision from pseudo-labels",
                        &ema,
                    ));
                    continue;
                }
                Err(e) => return Err(AdaptError::Perturb(e.to_string())),
            }
        } else {
            (None, None, None)
        };

        // (3)-(4) perturbed predictions, matching, tiering
        let (tiered, refined_targets) = if cfg.use_matcher {
            let tb = match_and_tier(
                &params,
                batch,
                &pseudo_boxes_per_scene,
                eps_w.as_deref(),
                eps_z.as_deref(),
                &mut history,
                cfg,
            )?;
            let mean_cost = if tb.pooled_costs.is_empty() {
                None
            } else {
                let sum: f64 = tb
                    .pooled_costs
                    .iter()
                    .map(|c| if c.is_finite() { *c } else { SENTINEL_COST })
                    .sum();
                Some(sum / tb.pooled_costs.len() as f64)
            };
            if let Some(c) = mean_cost {
                ema = update_ema(ema, c);
            }
            let refined: Vec<TargetMap> = tb
                .tiers_per_scene
                .iter()
                .map(|tiers| assign_targets(tiers, &grid))
                .collect();
            (Some(tb), refined)
        } else {
            (None, trusted_targets)
        };

        let (tier_high, tier_medium, tier_low) =
            tiered.as_ref().map_or((0, 0, 0), |t| t.tier_counts);
        let mean_cost = tiered.as_ref().and_then(|t| {
            if t.pooled_costs.is_empty() {
                None
            } else {
                let sum: f64 = t
                    .pooled_costs
                    .iter()
                    .map(|c| if c.is_finite() { *c } else { SENTINEL_COST })
                    .sum();
                Some(sum / t.pooled_costs.len() as f64)
            }
        });
        let n_perturbed = tiered.as_ref().map_or(0, |t| t.n_perturbed);

        // an all-Medium batch offers no refinement signal: skip the update
        let all_medium = cfg.use_matcher && tier_medium == n_pseudo && n_pseudo > 0;
        if all_medium {
            let mut rec = skip_record(batch_idx, n_pseudo, &params, "all-medium tiers", &ema);
            rec.n_perturbed = n_perturbed;
            rec.mean_cost = mean_cost;
            rec.c_ema = (ema.t > 0).then_some(ema.c_ema);
            rec.tier_medium = tier_medium;
            records.push(rec);
            if should_stop(&ema) && !ema.stopped {
                ema.stopped = true;
                stop_batch = Some(batch_idx);
                params_hash_at_stop = Some(params_hash(&params));
            }
            continue;
        }

        // (5) gradient at the doubly perturbed point with refined targets
        let refined_objective = DetectionObjective::new(
            &params,
            bevs,
            refined_targets.iter().collect(),
            cfg.lambda_reg,
        );
        let mut skipped = None;
        let mut loss_perturbed = None;
        let mut grad_norm = None;
        match refined_objective.eval(&params.values, eps_w.as_deref(), eps_z.as_deref()) {
            Ok(eval) => {
                if !eval.loss.is_finite() || eval.grad_params.iter().any(|g| !g.is_finite()) {
                    return Err(AdaptError::NonFinite { batch: batch_idx });
                }
                for (p, g) in params.values.iter_mut().zip(&eval.grad_params) {
                    *p -= cfg.eta * g;
                }
                loss_perturbed = Some(eval.loss);
                grad_norm = Some(l2_norm(&eval.grad_params));
            }
            Err(ObjectiveError::NoSupervision) => {
                skipped = Some("no supervision after refinement".to_string());
            }
            Err(e) => return Err(AdaptError::Perturb(e.to_string())),
        }

        records.push(BatchRecord {
            batch: batch_idx,
            n_pseudo,
            n_perturbed,
            mean_cost,
            c_ema: (ema.t > 0).then_some(ema.c_ema),
            tier_high,
            tier_medium,
            tier_low,
            loss_clean: clean_loss,
            loss_perturbed,
            grad_norm,
            eps_w_norm: eps_w.as_deref().map(l2_norm),
            eps_z_norms: eps_z
                .as_deref()
                .map(|m| m.iter().map(|v| l2_norm(v)).collect())
                .unwrap_or_default(),
            skipped,
            inference_only: false,
            params_hash: params_hash(&params),
        });

        // (6) early cutoff check, after the weight update
        if cfg.use_matcher && should_stop(&ema) && !ema.stopped {
            ema.stopped = true;
            stop_batch = Some(batch_idx);
            params_hash_at_stop = Some(params_hash(&params));
        }
    }

    let eval_3d = crate::eval::average_precision(
        &online_preds,
        &gts,
        crate::geom3d::iou_3d,
        eval_iou_thresh,
    );
    let eval_bev = crate::eval::average_precision(
        &online_preds,
        &gts,
        crate::geom3d::bev_iou,
        eval_iou_thresh,
    );
    let report = AdaptReport {
        records,
        stop_batch,
        params_hash_at_stop,
        params_hash_final: params_hash(&params),
        ap_3d: eval_3d.ap,
        ap_bev: eval_bev.ap,
        eval_iou_thresh,
    };
    Ok((params, report))
}

fn skip_record(
    batch: usize,
    n_pseudo: usize,
    params: &Params,
    reason: &str,
    ema: &EmaState,
) -> BatchRecord {
    BatchRecord {
        batch,
        n_pseudo,
        n_perturbed: 0,
        mean_cost: None,
        c_ema: (ema.t > 0).then_some(ema.c_ema),
        tier_high: 0,
        tier_medium: 0,
        tier_low: 0,
        loss_clean: None,
        loss_perturbed: None,
        grad_norm: None,
        eps_w_norm: None,
        eps_z_norms: Vec::new(),
        skipped: Some(reason.to_string()),
        inference_only: false,
        params_hash: params_hash(params),
    }
}

/// Decodes the perturbed predictions, matches per scene, inserts costs
/// into the global history, and tiers every pseudo-label. Threshold
/// updates happen before tiering so the current batch's costs are part
/// of the quantiles that judge its own boxes.
fn match_and_tier(
    params: &Params,
    batch: &[Scene],
    pseudo_boxes_per_scene: &[Vec<Box3D>],
    eps_w: Option<&[f64]>,
    eps_z: Option<&[Vec<f64>]>,
    history: &mut CostHistory,
    cfg: &AdaptConfig,
) -> Result<TieredBatch, AdaptError> {
    let grid = batch[0].bev.grid();
    let mut perturbed_params = params.clone();
    if let Some(eps) = eps_w {
        for (p, e) in perturbed_params.values.iter_mut().zip(eps) {
            *p += e;
        }
    }
    let mut results: Vec<MatchResult> = Vec::with_capacity(batch.len());
    let mut pooled: Vec<f64> = Vec::new();
    let mut n_perturbed = 0usize;
    for (idx, scene) in batch.iter().enumerate() {
        let raw = match eps_z.map(|m| &m[idx]) {
            Some(mask) => {
                let mut bev = scene.bev.clone();
                for (v, m) in bev.values.iter_mut().zip(mask) {
                    *v += m;
                }
                forward(&perturbed_params, &bev)?
            }
            None => forward(&perturbed_params, &scene.bev)?,
        };
        let perturbed_boxes: Vec<Box3D> = decode(&raw, &grid, cfg.score_thresh, cfg.nms_thresh)
            .into_iter()
            .map(|b| b.box3d)
            .collect();
        n_perturbed += perturbed_boxes.len();
        let result = match_predictions(
            &pseudo_boxes_per_scene[idx],
            &perturbed_boxes,
            cfg.w_iou,
            cfg.w_l1,
        );
        pooled.extend_from_slice(&result.per_box_cost);
        results.push(result);
    }
    let history_costs: Vec<f64> = if cfg.include_sentinel_costs {
        pooled.clone()
    } else {
        pooled.iter().copied().filter(|c| c.is_finite()).collect()
    };
    let thresholds = update_thresholds(history, &history_costs, cfg.alpha).ok();
    let mut tiers_per_scene = Vec::with_capacity(batch.len());
    let mut counts = (0usize, 0usize, 0usize);
    for (idx, result) in results.iter().enumerate() {
        let tiers = match &thresholds {
            Some(th) => tier_boxes(&pseudo_boxes_per_scene[idx], result, th),
            // undefined thresholds (empty history): everything is Medium
            None => pseudo_boxes_per_scene[idx]
                .iter()
                .map(|b| (*b, Tier::Medium))
                .collect(),
        };
        for (_, tier) in &tiers {
            match tier {
                Tier::High => counts.0 += 1,
                Tier::Medium => counts.1 += 1,
                Tier::Low => counts.2 += 1,
            }
        }
        tiers_per_scene.push(tiers);
    }
    Ok(TieredBatch {
        tiers_per_scene,
        pooled_costs: pooled,
        tier_counts: counts,
        n_perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{pretrain, TrainConfig};
    use crate::scene_gen::{make_dataset, make_stream, ShiftSpec};
    use crate::testutil::test_grid_and_gen;

    fn quick_pretrained() -> (crate::scene_gen::GridSpec, crate::scene_gen::GenConfig, Params)
    {
        let (grid, gen_cfg) = test_grid_and_gen();
        let dataset = make_dataset(24, &gen_cfg, &grid, 100).unwrap();
        let tc = TrainConfig {
            epochs: 12,
            learning_rate: 0.4,
            batch_size: 8,
            hidden: 8,
            lambda_reg: 1.0,
            seed: 0,
        };
        let params = pretrain(&dataset, &grid, &tc);
        (grid, gen_cfg, params)
    }

    fn base_cfg() -> AdaptConfig {
        AdaptConfig {
            rho: 1e-4,
            rho_input: None,
            alpha: 0.08,
            gamma: 0.5,
            eta: 1e-3,
            c_stop: -1.0,
            lambda_reg: 1.0,
            score_thresh: 0.5,
            nms_thresh: 0.5,
            w_iou: 1.0,
            w_l1: 1.0,
            perturb_weights: true,
            perturb_inputs: true,
            use_matcher: true,
            include_sentinel_costs: true,
            no_adapt: false,
        }
    }

    #[test]
    fn ema_constant_stream_is_fixed_point() {
        let mut state = EmaState::new(0.5, -1.0);
        for _ in 0..10 {
            state = update_ema(state, 3.25);
            assert_eq!(state.c_ema, 3.25);
        }
    }

    #[test]
    fn ema_arithmetic() {
        let mut state = EmaState::new(0.5, -1.0);
        state = update_ema(state, 4.0);
        state = update_ema(state, 2.0);
        assert_eq!(state.c_ema, 3.0);
    }

    #[test]
    fn stop_rule_is_inclusive() {
        let mut state = EmaState::new(0.5, 2.0);
        state = update_ema(state, 2.0);
        assert!(should_stop(&state));
        state.c_stop = -1.0;
        assert!(!should_stop(&state));
        state.c_stop = SENTINEL_COST;
        assert!(should_stop(&state));
    }

    #[test]
    fn mean_cost_rules() {
        let costs = MatchResult {
            assignment: vec![Some(0), Some(1), Some(2)],
            per_box_cost: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(batch_mean_cost(&costs), Some(2.0));
        let empty = MatchResult {
            assignment: vec![],
            per_box_cost: vec![],
        };
        assert_eq!(batch_mean_cost(&empty), None);
        let infinite = MatchResult {
            assignment: vec![None],
            per_box_cost: vec![f64::INFINITY],
        };
        assert_eq!(batch_mean_cost(&infinite), Some(SENTINEL_COST));
        let single = MatchResult {
            assignment: vec![Some(0)],
            per_box_cost: vec![0.75],
        };
        assert_eq!(batch_mean_cost(&single), Some(0.75));
    }

    #[test]
    fn stop_freezes_params_bitwise() {
        let (grid, gen_cfg, params) = quick_pretrained();
        let spec = ShiftSpec {
            noise_sigma: 0.1,
            ..ShiftSpec::identity()
        };
        let stream = make_stream(6, 4, &gen_cfg, &grid, &spec, 7).unwrap();
        let mut cfg = base_cfg();
        cfg.c_stop = SENTINEL_COST; // stop at the first EMA update
        let (final_params, report) = adapt_stream(&params, &stream, &cfg, 0.5).unwrap();
        let stop = report.stop_batch.expect("must stop");
        assert_eq!(report.params_hash_at_stop, Some(params_hash(&final_params)));
        for rec in &report.records[stop + 1..] {
            assert!(rec.inference_only);
            assert_eq!(rec.params_hash, report.params_hash_final);
        }
    }

    #[test]
    fn no_adapt_never_changes_params() {
        let (grid, gen_cfg, params) = quick_pretrained();
        let stream = make_stream(3, 4, &gen_cfg, &grid, &ShiftSpec::identity(), 5).unwrap();
        let mut cfg = base_cfg();
        cfg.no_adapt = true;
        let (final_params, report) = adapt_stream(&params, &stream, &cfg, 0.5).unwrap();
        assert_eq!(final_params, params);
        assert!(report.records.iter().all(|r| r.inference_only));
        assert_eq!(report.stop_batch, None);
    }

    #[test]
    fn negative_c_stop_never_stops() {
        let (grid, gen_cfg, params) = quick_pretrained();
        let spec = ShiftSpec {
            noise_sigma: 0.05,
            ..ShiftSpec::identity()
        };
        let stream = make_stream(5, 4, &gen_cfg, &grid, &spec, 9).unwrap();
        let cfg = base_cfg();
        let (_, report) = adapt_stream(&params, &stream, &cfg, 0.5).unwrap();
        assert_eq!(report.stop_batch, None);
        assert_eq!(report.records.len(), 5);
    }

    #[test]
    fn deterministic_report() {
        let (grid, gen_cfg, params) = quick_pretrained();
        let spec = ShiftSpec {
            noise_sigma: 0.1,
            dropout_prob: 0.1,
            ..ShiftSpec::identity()
        };
        let stream = make_stream(4, 4, &gen_cfg, &grid, &spec, 11).unwrap();
        let cfg = base_cfg();
        let (pa, ra) = adapt_stream(&params, &stream, &cfg, 0.5).unwrap();
        let (pb, rb) = adapt_stream(&params, &stream, &cfg, 0.5).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
    }

    #[test]
    fn perturbation_norms_match_rho_on_active_batches() {
        let (grid, gen_cfg, params) = quick_pretrained();
        let spec = ShiftSpec {
            noise_sigma: 0.1,
            ..ShiftSpec::identity()
        };
        let stream = make_stream(4, 4, &gen_cfg, &grid, &spec, 13).unwrap();
        let cfg = base_cfg();
        let (_, report) = adapt_stream(&params, &stream, &cfg, 0.5).unwrap();
        let mut seen = 0;
        for rec in &report.records {
            if rec.skipped.is_some() || rec.inference_only {
                continue;
            }
            if let Some(norm) = rec.eps_w_norm {
                assert!((norm - cfg.rho).abs() <= 1e-9 * cfg.rho, "norm {norm}");
                seen += 1;
            }
            for nz in &rec.eps_z_norms {
                if *nz > 0.0 {
                    assert!((nz - cfg.rho).abs() <= 1e-9 * cfg.rho);
                }
            }
        }
        assert!(seen > 0, "no active perturbed batches in fixture");
    }
}
