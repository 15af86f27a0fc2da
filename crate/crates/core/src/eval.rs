//! KITTI-style average precision at 40 recall positions, the closed-gap
//! metric, and the ablation harness comparing adaptation variants on an
//! identical stream.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{adapt_stream, AdaptError};
use crate::config::RunConfig;
use crate::detector::pretrain;
use crate::geom3d::{bev_iou, iou_3d, Box3D, ScoredBox};
use crate::scene_gen::{derive_seed, make_shifted_dataset, make_stream, GenError};

/// Number of evaluated recall positions.
pub const RECALL_POSITIONS: usize = 40;

/// Matching outcome of one prediction set against one ground-truth set
/// under a single IoU function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// Interpolated precision at recall 1/40, 2/40, ..., 1.
    pub precision_at_recall: Vec<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// AP under both the 3D and the BEV IoU at the same threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap_3d: f64,
    pub ap_bev: f64,
    pub detail_3d: ApResult,
    pub detail_bev: ApResult,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("closed gap undefined: oracle and no-adapt AP coincide")]
    ZeroDenominator,
}

/// Greedy per-scene matching by descending score, then 40-point
/// interpolated average precision. With no ground truth the AP is 1 for
/// an empty prediction set and 0 otherwise.
pub fn average_precision(
    preds: &[(u64, ScoredBox)],
    gts: &[(u64, Box3D)],
    iou_fn: fn(&Box3D, &Box3D) -> f64,
    iou_thresh: f64,
) -> ApResult {
    assert!(
        iou_thresh > 0.0 && iou_thresh < 1.0,
        "iou_thresh must be in (0,1)"
    );
    let n_gt = gts.len();
    if n_gt == 0 {
        let ap = if preds.is_empty() { 1.0 } else { 0.0 };
        return ApResult {
            ap,
            precision_at_recall: vec![ap; RECALL_POSITIONS],
            tp: 0,
            fp: preds.len(),
            fn_count: 0,
        };
    }
    let mut by_scene: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, (scene, _)) in gts.iter().enumerate() {
        by_scene.entry(*scene).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, pa) = &preds[a];
        let (sb, pb) = &preds[b];
        pb.score
            .total_cmp(&pa.score)
            .then(sa.cmp(sb))
            .then(pa.box3d.cx.total_cmp(&pb.box3d.cx))
            .then(pa.box3d.cy.total_cmp(&pb.box3d.cy))
    });
    let mut matched = vec![false; n_gt];
    let mut is_tp = Vec::with_capacity(preds.len());
    for &idx in &order {
        let (scene, pred) = &preds[idx];
        let mut best: Option<(f64, usize)> = None;
        if let Some(gt_indices) = by_scene.get(scene) {
            for &gi in gt_indices {
                if matched[gi] {
                    continue;
                }
                let iou = iou_fn(&pred.box3d, &gts[gi].1);
                if iou >= iou_thresh && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                matched[gi] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }
    let mut tp_cum = 0usize;
    let mut precisions = Vec::with_capacity(is_tp.len());
    let mut recalls = Vec::with_capacity(is_tp.len());
    for (i, &tp) in is_tp.iter().enumerate() {
        if tp {
            tp_cum += 1;
        }
        precisions.push(tp_cum as f64 / (i + 1) as f64);
        recalls.push(tp_cum as f64 / n_gt as f64);
    }
    let mut precision_at_recall = Vec::with_capacity(RECALL_POSITIONS);
    for t in 1..=RECALL_POSITIONS {
        let r = t as f64 / RECALL_POSITIONS as f64;
        let best = precisions
            .iter()
            .zip(&recalls)
            .filter(|(_, &rec)| rec >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0f64, f64::max);
        precision_at_recall.push(best);
    }
    let ap = precision_at_recall.iter().sum::<f64>() / RECALL_POSITIONS as f64;
    let tp = tp_cum;
    ApResult {
        ap,
        precision_at_recall,
        tp,
        fp: is_tp.len() - tp,
        fn_count: n_gt - tp,
    }
}

/// AP under both IoU definitions at one threshold.
pub fn evaluate(preds: &[(u64, ScoredBox)], gts: &[(u64, Box3D)], iou_thresh: f64) -> EvalResult {
    let detail_3d = average_precision(preds, gts, iou_3d, iou_thresh);
    let detail_bev = average_precision(preds, gts, bev_iou, iou_thresh);
    EvalResult {
        ap_3d: detail_3d.ap,
        ap_bev: detail_bev.ap,
        detail_3d,
        detail_bev,
    }
}

/// Progress toward the fully supervised bound, as a signed percentage.
pub fn closed_gap(ap_method: f64, ap_noadapt: f64, ap_oracle: f64) -> Result<f64, EvalError> {
    let denom = ap_oracle - ap_noadapt;
    if denom == 0.0 {
        return Err(EvalError::ZeroDenominator);
    }
    Ok((ap_method - ap_noadapt) / denom * 100.0)
}

/// Adaptation variants compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    NoAdapt,
    SelfTraining,
    PerturbW,
    PerturbWZ,
    PerturbWMatcher,
    FullDpo,
    Oracle,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::NoAdapt,
        Variant::SelfTraining,
        Variant::PerturbW,
        Variant::PerturbWZ,
        Variant::PerturbWMatcher,
        Variant::FullDpo,
        Variant::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::NoAdapt => "no_adapt",
            Variant::SelfTraining => "self_training",
            Variant::PerturbW => "perturb_w",
            Variant::PerturbWZ => "perturb_wz",
            Variant::PerturbWMatcher => "perturb_w_matcher",
            Variant::FullDpo => "full_dpo",
            Variant::Oracle => "oracle",
        }
    }

    /// (perturb_weights, perturb_inputs, use_matcher, no_adapt)
    fn toggles(&self) -> (bool, bool, bool, bool) {
        match self {
            Variant::NoAdapt => (false, false, false, true),
            Variant::SelfTraining => (false, false, false, false),
            Variant::PerturbW => (true, false, false, false),
            Variant::PerturbWZ => (true, true, false, false),
            Variant::PerturbWMatcher => (true, false, true, false),
            Variant::FullDpo => (true, true, true, false),
            Variant::Oracle => (false, false, false, true),
        }
    }
}

/// One variant's outcome on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub ap_3d: f64,
    pub ap_bev: f64,
    pub stop_batch: Option<usize>,
}

/// Aggregated row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub ap_3d_mean: f64,
    pub ap_3d_sd: f64,
    pub ap_bev_mean: f64,
    pub ap_bev_sd: f64,
    pub closed_gap_3d: Option<f64>,
    pub closed_gap_bev: Option<f64>,
    pub stop_batch_mean: Option<f64>,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<VariantSummary>,
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pretrains once per seed, runs every variant on the identical stream,
/// and aggregates APs, closed gaps, and stop batches.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64]) -> Result<AblationTable, AblationError> {
    assert!(!seeds.is_empty(), "need at least one seed");
    let mut outcomes: HashMap<Variant, Vec<SeedOutcome>> = HashMap::new();
    for &seed in seeds {
        let source = crate::scene_gen::make_dataset(
            cfg.pretrain.scenes,
            &cfg.generator,
            &cfg.grid,
            derive_seed(seed, 1),
        )?;
        let theta_s = pretrain(&source, &cfg.grid, &cfg.train_config(seed));
        let stream = make_stream(
            cfg.stream.n_batches,
            cfg.stream.batch_size,
            &cfg.generator,
            &cfg.grid,
            &cfg.shift,
            derive_seed(seed, 2),
        )?;
        let oracle_train = make_shifted_dataset(
            cfg.pretrain.scenes,
            &cfg.generator,
            &cfg.grid,
            &cfg.shift,
            derive_seed(seed, 3),
        )?;
        let theta_oracle = pretrain(&oracle_train, &cfg.grid, &cfg.train_config(seed));

        for variant in Variant::ALL {
            let (pw, pz, matcher, no_adapt) = variant.toggles();
            let mut adapt_cfg = cfg.adapt_config(no_adapt);
            adapt_cfg.perturb_weights = pw;
            adapt_cfg.perturb_inputs = pz;
            adapt_cfg.use_matcher = matcher;
            let theta = if variant == Variant::Oracle {
                &theta_oracle
            } else {
                &theta_s
            };
            let (_, report) = adapt_stream(theta, &stream, &adapt_cfg, cfg.eval.iou_thresh)?;
            outcomes.entry(variant).or_default().push(SeedOutcome {
                seed,
                ap_3d: report.ap_3d,
                ap_bev: report.ap_bev,
                stop_batch: report.stop_batch,
            });
        }
    }

    let gap_ref = |variant: Variant, pick: fn(&SeedOutcome) -> f64| -> Vec<f64> {
        outcomes[&variant].iter().map(pick).collect()
    };
    let noadapt_3d = gap_ref(Variant::NoAdapt, |o| o.ap_3d);
    let oracle_3d = gap_ref(Variant::Oracle, |o| o.ap_3d);
    let noadapt_bev = gap_ref(Variant::NoAdapt, |o| o.ap_bev);
    let oracle_bev = gap_ref(Variant::Oracle, |o| o.ap_bev);

    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let per_seed = outcomes[&variant].clone();
        let (ap_3d_mean, ap_3d_sd) = mean_sd(&per_seed.iter().map(|o| o.ap_3d).collect::<Vec<_>>());
        let (ap_bev_mean, ap_bev_sd) =
            mean_sd(&per_seed.iter().map(|o| o.ap_bev).collect::<Vec<_>>());
        // per-seed closed gaps against that seed's oracle and no-adapt
        let gaps = |aps: &[SeedOutcome],
                    pick: fn(&SeedOutcome) -> f64,
                    noadapt: &[f64],
                    oracle: &[f64]|
         -> Option<f64> {
            let mut acc = Vec::new();
            for (i, o) in aps.iter().enumerate() {
                match closed_gap(pick(o), noadapt[i], oracle[i]) {
                    Ok(g) => acc.push(g),
                    Err(_) => return None,
                }
            }
            Some(mean_sd(&acc).0)
        };
        let closed_gap_3d = gaps(&per_seed, |o| o.ap_3d, &noadapt_3d, &oracle_3d);
        let closed_gap_bev = gaps(&per_seed, |o| o.ap_bev, &noadapt_bev, &oracle_bev);
        let stops: Vec<f64> = per_seed
            .iter()
            .filter_map(|o| o.stop_batch.map(|s| s as f64))
            .collect();
        let stop_batch_mean = (stops.len() == per_seed.len()).then(|| mean_sd(&stops).0);
        rows.push(VariantSummary {
            variant,
            ap_3d_mean,
            ap_3d_sd,
            ap_bev_mean,
            ap_bev_sd,
            closed_gap_3d,
            closed_gap_bev,
            stop_batch_mean,
            per_seed,
        });
    }
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> &VariantSummary {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .expect("every variant has a row")
    }

    /// CSV body with a fixed header; byte-stable across reruns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,ap_3d,ap_3d_sd,ap_bev,ap_bev_sd,closed_gap_3d,closed_gap_bev,stop_batch\n",
        );
        for row in &self.rows {
            let fmt_opt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
                row.variant.name(),
                row.ap_3d_mean,
                row.ap_3d_sd,
                row.ap_bev_mean,
                row.ap_bev_sd,
                fmt_opt(row.closed_gap_3d),
                fmt_opt(row.closed_gap_bev),
                fmt_opt(row.stop_batch_mean),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64) -> Box3D {
        Box3D::new(cx, cy, 1.0, 4.0, 2.0, 2.0, 0.0)
    }

    #[test]
    fn perfect_predictions_give_ap_one() {
        let gts: Vec<(u64, Box3D)> = vec![(0, bx(5.0, 5.0)), (0, bx(15.0, 5.0)), (1, bx(7.0, 3.0))];
        let preds: Vec<(u64, ScoredBox)> = gts
            .iter()
            .map(|(s, b)| (*s, ScoredBox::new(*b, 1.0)))
            .collect();
        let r = average_precision(&preds, &gts, iou_3d, 0.7);
        assert_eq!(r.ap, 1.0);
        assert_eq!((r.tp, r.fp, r.fn_count), (3, 0, 0));
    }

    #[test]
    fn no_predictions_give_ap_zero() {
        let gts = vec![(0u64, bx(5.0, 5.0))];
        let r = average_precision(&[], &gts, iou_3d, 0.7);
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.fn_count, 1);
    }

    #[test]
    fn zero_gt_conventions() {
        assert_eq!(average_precision(&[], &[], iou_3d, 0.7).ap, 1.0);
        let preds = vec![(0u64, ScoredBox::new(bx(0.0, 0.0), 0.9))];
        assert_eq!(average_precision(&preds, &[], iou_3d, 0.7).ap, 0.0);
    }

    #[test]
    fn lower_scored_match_yields_half_ap() {
        // one gt, two predictions; only the lower-scored one matches:
        // precision at full recall is 1/2, and the 40-point AP is 0.5
        let gts = vec![(0u64, bx(5.0, 5.0))];
        let preds = vec![
            (0u64, ScoredBox::new(bx(30.0, 30.0), 0.9)),
            (0u64, ScoredBox::new(bx(5.0, 5.0), 0.4)),
        ];
        let r = average_precision(&preds, &gts, iou_3d, 0.7);
        assert!((r.ap - 0.5).abs() < 1e-12, "ap {}", r.ap);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let gts = vec![(0u64, bx(5.0, 5.0))];
        let preds = vec![
            (0u64, ScoredBox::new(bx(5.0, 5.0), 0.9)),
            (0u64, ScoredBox::new(bx(5.0, 5.0), 0.8)),
        ];
        let r = average_precision(&preds, &gts, iou_3d, 0.7);
        assert_eq!((r.tp, r.fp), (1, 1));
    }

    #[test]
    fn removing_false_positives_never_hurts() {
        let gts = vec![(0u64, bx(5.0, 5.0)), (0u64, bx(20.0, 5.0))];
        let with_fp = vec![
            (0u64, ScoredBox::new(bx(5.0, 5.0), 0.9)),
            (0u64, ScoredBox::new(bx(40.0, 40.0), 0.85)),
            (0u64, ScoredBox::new(bx(20.0, 5.0), 0.8)),
        ];
        let without_fp: Vec<_> = with_fp
            .iter()
            .filter(|(_, p)| p.box3d.cx < 39.0)
            .cloned()
            .collect();
        let a = average_precision(&with_fp, &gts, iou_3d, 0.7).ap;
        let b = average_precision(&without_fp, &gts, iou_3d, 0.7).ap;
        assert!(b >= a);
    }

    #[test]
    fn ap_invariant_to_input_order() {
        let gts = vec![(0u64, bx(5.0, 5.0)), (1u64, bx(9.0, 9.0))];
        let mut preds = vec![
            (0u64, ScoredBox::new(bx(5.1, 5.0), 0.7)),
            (1u64, ScoredBox::new(bx(9.0, 9.0), 0.9)),
            (0u64, ScoredBox::new(bx(25.0, 25.0), 0.5)),
        ];
        let a = average_precision(&preds, &gts, bev_iou, 0.5).ap;
        preds.reverse();
        let b = average_precision(&preds, &gts, bev_iou, 0.5).ap;
        assert_eq!(a, b);
    }

    #[test]
    fn closed_gap_arithmetic() {
        assert_eq!(closed_gap(0.6, 0.2, 0.6).unwrap(), 100.0);
        assert_eq!(closed_gap(0.2, 0.2, 0.6).unwrap(), 0.0);
        let g = closed_gap(55.74, 27.48, 73.45).unwrap();
        assert!((g - 61.47).abs() < 0.01, "gap {g}");
        assert_eq!(closed_gap(0.5, 0.3, 0.3), Err(EvalError::ZeroDenominator));
    }
}
