//! Dual-perturbation optimizer: worst-case perturbations in the weight
//! and input spaces, the combined gradient at the doubly perturbed point,
//! the SGD outer update, and an empirical sharpness probe.
//!
//! Both perturbations are the dual-norm maximizer of the first-order loss
//! expansion, i.e. the gradient normalized onto the sphere of radius rho.
//! The input mask is normalized per batch element so its strength does
//! not depend on batch size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{batch_backward, DetectorError, Params, TargetMap};
use crate::scene_gen::BevFeature;

/// Gradient norms below this are treated as degenerate; the perturbation
/// falls back to zero and the step records the fact.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// A differentiable objective over flat parameters and a batch of flat
/// per-element inputs. The adaptation loss implements this; test
/// harnesses provide closed-form surrogates.
pub trait Objective {
    fn param_len(&self) -> usize;
    fn num_elements(&self) -> usize;
    fn input_len(&self, element: usize) -> usize;
    /// Loss and gradients at `params + eps_w` with element inputs offset
    /// by `eps_z`. `eps_z`, when given, must hold one mask per element.
    fn eval(
        &self,
        params: &[f64],
        eps_w: Option<&[f64]>,
        eps_z: Option<&[Vec<f64>]>,
    ) -> Result<Evaluation, ObjectiveError>;
}

/// One objective evaluation: loss plus gradients on both spaces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_params: Vec<f64>,
    pub grad_inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("no supervision available for this batch")]
    NoSupervision,
    #[error("objective evaluation failed: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("gradient norm below {DEGENERATE_GRAD_NORM}; perturbation degenerate")]
    DegenerateGradient,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite loss or gradient encountered")]
    NonFinite,
}

/// Step size and perturbation radii for one adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub rho: f64,
    /// Input-space radius override; defaults to `rho`.
    pub rho_input: Option<f64>,
    pub eta: f64,
    pub perturb_weights: bool,
    pub perturb_inputs: bool,
}

impl StepConfig {
    pub fn rho_z(&self) -> f64 {
        self.rho_input.unwrap_or(self.rho)
    }
}

/// Telemetry for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss_clean: f64,
    pub loss_perturbed: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub skip_reason: Option<String>,
    pub eps_w_norm: Option<f64>,
    pub eps_z_norms: Vec<f64>,
    pub degenerate_w: bool,
    pub degenerate_z: Vec<bool>,
}

impl StepRecord {
    fn skipped(reason: &str) -> Self {
        Self {
            loss_clean: f64::NAN,
            loss_perturbed: f64::NAN,
            grad_norm: 0.0,
            skipped: true,
            skip_reason: Some(reason.to_string()),
            eps_w_norm: None,
            eps_z_norms: Vec::new(),
            degenerate_w: false,
            degenerate_z: Vec::new(),
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst-case weight perturbation: `rho * g / ||g||_2` over the full
/// flattened gradient.
pub fn weight_perturbation(grad_params: &[f64], rho: f64) -> Result<Vec<f64>, PerturbError> {
    assert!(rho > 0.0, "rho must be positive");
    let norm = l2_norm(grad_params);
    if norm < DEGENERATE_GRAD_NORM {
        return Err(PerturbError::DegenerateGradient);
    }
    let scale = rho / norm;
    Ok(grad_params.iter().map(|g| g * scale).collect())
}

/// Worst-case input perturbation, normalized to radius rho per batch
/// element. Degenerate elements get a zero mask and a flag.
pub fn input_perturbation(grad_inputs: &[Vec<f64>], rho: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    assert!(rho > 0.0, "rho must be positive");
    let mut masks = Vec::with_capacity(grad_inputs.len());
    let mut degenerate = Vec::with_capacity(grad_inputs.len());
    for g in grad_inputs {
        let norm = l2_norm(g);
        if norm < DEGENERATE_GRAD_NORM {
            masks.push(vec![0.0; g.len()]);
            degenerate.push(true);
        } else {
            let scale = rho / norm;
            masks.push(g.iter().map(|x| x * scale).collect());
            degenerate.push(false);
        }
    }
    (masks, degenerate)
}

/// One dual-perturbation step: evaluate at the clean point, build the
/// perturbations from the clean gradients, re-evaluate the gradient at
/// the doubly perturbed point, and descend from the unperturbed weights.
/// A no-supervision batch is reported as a skipped step with the
/// parameters unchanged.
pub fn dpo_step<O: Objective>(
    objective: &O,
    params: &[f64],
    cfg: &StepConfig,
) -> Result<(Vec<f64>, StepRecord), PerturbError> {
    assert!(cfg.eta > 0.0, "eta must be positive");
    let clean = match objective.eval(params, None, None) {
        Ok(e) => e,
        Err(ObjectiveError::NoSupervision) => {
            return Ok((params.to_vec(), StepRecord::skipped("no supervision")));
        }
        Err(e) => return Err(e.into()),
    };
    if !clean.loss.is_finite() {
        return Err(PerturbError::NonFinite);
    }

    let (eps_w, degenerate_w) = if cfg.perturb_weights {
        match weight_perturbation(&clean.grad_params, cfg.rho) {
            Ok(e) => (Some(e), false),
            Err(PerturbError::DegenerateGradient) => (None, true),
            Err(e) => return Err(e),
        }
    } else {
        (None, false)
    };
    let (eps_z, degenerate_z) = if cfg.perturb_inputs && objective.num_elements() > 0 {
        let (masks, flags) = input_perturbation(&clean.grad_inputs, cfg.rho_z());
        (Some(masks), flags)
    } else {
        (None, Vec::new())
    };

    let perturbed = match objective.eval(params, eps_w.as_deref(), eps_z.as_deref()) {
        Ok(e) => e,
        Err(ObjectiveError::NoSupervision) => {
            return Ok((params.to_vec(), StepRecord::skipped("no supervision")));
        }
        Err(e) => return Err(e.into()),
    };
    if !perturbed.loss.is_finite() {
        return Err(PerturbError::NonFinite);
    }

    let new_params: Vec<f64> = params
        .iter()
        .zip(&perturbed.grad_params)
        .map(|(p, g)| p - cfg.eta * g)
        .collect();
    let record = StepRecord {
        loss_clean: clean.loss,
        loss_perturbed: perturbed.loss,
        grad_norm: l2_norm(&perturbed.grad_params),
        skipped: false,
        skip_reason: None,
        eps_w_norm: eps_w.as_deref().map(l2_norm),
        eps_z_norms: eps_z
            .as_deref()
            .map(|masks| masks.iter().map(|m| l2_norm(m)).collect())
            .unwrap_or_default(),
        degenerate_w,
        degenerate_z,
    };
    Ok((new_params, record))
}

/// Empirical sharpness: loss increase at the first-order worst-case
/// weight perturbation of radius rho. Returns 0 for a degenerate
/// gradient or rho == 0.
pub fn sharpness_probe<O: Objective>(
    objective: &O,
    params: &[f64],
    rho: f64,
) -> Result<f64, PerturbError> {
    if rho == 0.0 {
        return Ok(0.0);
    }
    let clean = objective.eval(params, None, None)?;
    let eps_w = match weight_perturbation(&clean.grad_params, rho) {
        Ok(e) => e,
        Err(PerturbError::DegenerateGradient) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    let perturbed = objective.eval(params, Some(&eps_w), None)?;
    Ok(perturbed.loss - clean.loss)
}

/// The adaptation objective: detection loss of a parameter vector over a
/// batch of feature grids with fixed supervision maps.
pub struct DetectionObjective<'a> {
    pub template: &'a Params,
    pub bevs: Vec<&'a BevFeature>,
    pub targets: Vec<&'a TargetMap>,
    pub lambda_reg: f64,
}

impl<'a> DetectionObjective<'a> {
    pub fn new(
        template: &'a Params,
        bevs: Vec<&'a BevFeature>,
        targets: Vec<&'a TargetMap>,
        lambda_reg: f64,
    ) -> Self {
        assert_eq!(bevs.len(), targets.len());
        Self {
            template,
            bevs,
            targets,
            lambda_reg,
        }
    }
}

impl Objective for DetectionObjective<'_> {
    fn param_len(&self) -> usize {
        self.template.len()
    }

    fn num_elements(&self) -> usize {
        self.bevs.len()
    }

    fn input_len(&self, element: usize) -> usize {
        self.bevs[element].values.len()
    }

    fn eval(
        &self,
        params: &[f64],
        eps_w: Option<&[f64]>,
        eps_z: Option<&[Vec<f64>]>,
    ) -> Result<Evaluation, ObjectiveError> {
        let mut p = Params {
            values: params.to_vec(),
            input_channels: self.template.input_channels,
            hidden: self.template.hidden,
        };
        if let Some(eps) = eps_w {
            for (v, e) in p.values.iter_mut().zip(eps) {
                *v += e;
            }
        }
        let shifted: Vec<BevFeature>;
        let bev_refs: Vec<&BevFeature> = match eps_z {
            Some(masks) => {
                assert_eq!(masks.len(), self.bevs.len());
                shifted = self
                    .bevs
                    .iter()
                    .zip(masks)
                    .map(|(bev, mask)| {
                        let mut b = (*bev).clone();
                        for (v, m) in b.values.iter_mut().zip(mask) {
                            *v += m;
                        }
                        b
                    })
                    .collect();
                shifted.iter().collect()
            }
            None => self.bevs.clone(),
        };
        match batch_backward(&p, &bev_refs, &self.targets, self.lambda_reg, true) {
            Ok((loss, grad_params, grad_inputs)) => Ok(Evaluation {
                loss,
                grad_params,
                grad_inputs,
            }),
            Err(DetectorError::NoSupervision) => Err(ObjectiveError::NoSupervision),
            Err(e) => Err(ObjectiveError::Invalid(e.to_string())),
        }
    }
}
