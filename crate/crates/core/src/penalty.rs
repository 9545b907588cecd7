//! Parameter-change penalties: l1, l2 (sum of squares), their 0.5-weighted
//! combination, and the importance-weighted MAS penalty baseline.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use core::fmt;
use num_traits::Float;

use crate::network::{forward_nodes, stage_params, ModelSpec, NetError, RunningStats};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Which norm of the parameter change is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NormKind {
    L1,
    L2,
    Combined,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::L1 => write!(f, "l1"),
            NormKind::L2 => write!(f, "l2"),
            NormKind::Combined => write!(f, "combined"),
        }
    }
}

/// Norm kind and strength of the change penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PenaltyConfig {
    pub kind: NormKind,
    pub lambda: f64,
}

impl PenaltyConfig {
    pub fn new(kind: NormKind, lambda: f64) -> PenaltyConfig {
        debug_assert!(lambda >= 0.0, "lambda must be nonnegative");
        PenaltyConfig { kind, lambda }
    }
}

/// Penalty term added to the loss:
/// l1 -> lambda*sum|d|, l2 -> lambda*sum d^2,
/// combined -> lambda*0.5*(sum|d| + sum d^2).
pub fn penalty_value(delta: &ParamSet, config: &PenaltyConfig) -> f64 {
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for e in delta.iter() {
        for &v in &e.tensor.values {
            abs_sum += v.abs();
            sq_sum += v * v;
        }
    }
    match config.kind {
        NormKind::L1 => config.lambda * abs_sum,
        NormKind::L2 => config.lambda * sq_sum,
        NormKind::Combined => config.lambda * 0.5 * (abs_sum + sq_sum),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds the penalty subgradient into the existing gradients of `delta`.
/// `sign(0) = 0`, so a zero-initialized change network feels no penalty
/// on its first update step.
pub fn penalty_grad(delta: &mut ParamSet, config: &PenaltyConfig) {
    let (kind, lambda) = (config.kind, config.lambda);
    for e in delta.iter_mut() {
        let values = e.tensor.values.clone();
        let grad = e.tensor.grad_mut();
        for (g, v) in grad.iter_mut().zip(values.iter()) {
            *g += match kind {
                NormKind::L1 => lambda * sign(*v),
                NormKind::L2 => lambda * 2.0 * v,
                NormKind::Combined => lambda * 0.5 * (sign(*v) + 2.0 * v),
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MasError {
    EmptyData,
    LayoutMismatch(String),
    Net(NetError),
}

impl fmt::Display for MasError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MasError::EmptyData => write!(f, "importance estimation needs at least one sample"),
            MasError::LayoutMismatch(s) => write!(f, "MAS layout mismatch: {s}"),
            MasError::Net(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MasError {}

impl From<NetError> for MasError {
    fn from(e: NetError) -> Self {
        MasError::Net(e)
    }
}

/// Importance weights and anchor snapshot for the MAS penalty.
#[derive(Debug, Clone)]
pub struct MasState {
    pub omega: ParamSet,
    pub anchor: ParamSet,
    pub lambda_mas: f64,
}

/// Per-entry importance: the mean over samples of the absolute gradient
/// of the squared l2 norm of the logits.
pub fn mas_importance(
    spec: &ModelSpec,
    params: &ParamSet,
    stats: &RunningStats,
    data: &Tensor,
) -> Result<ParamSet, MasError> {
    if data.shape.is_empty() || data.shape[0] == 0 {
        return Err(MasError::EmptyData);
    }
    let n = data.shape[0];
    let sample_numel: usize = data.shape[1..].iter().product();
    let mut probe = params.clone();
    probe.set_trainable(true);
    let mut omega = params.zeros_like();
    for i in 0..n {
        let mut shape = vec![1];
        shape.extend_from_slice(&data.shape[1..]);
        let values = data.values[i * sample_numel..(i + 1) * sample_numel].to_vec();
        let sample = Tensor::new(shape, values).expect("sample slice matches shape");
        let mut tape = Tape::new();
        let input = tape.input(sample);
        let staged = stage_params(&mut tape, &probe);
        let logits = forward_nodes(&mut tape, spec, &probe, &staged, stats, input)?;
        let norm_sq = tape.sum_squares(logits).map_err(NetError::Tape)?;
        tape.backward(norm_sq).map_err(NetError::Tape)?;
        probe.zero_grads();
        crate::network::export_grads(&tape, &staged, &mut probe);
        for (acc, src) in omega.iter_mut().zip(probe.iter()) {
            if let Some(g) = &src.tensor.grad {
                for (o, gv) in acc.tensor.values.iter_mut().zip(g.iter()) {
                    *o += gv.abs() / n as f64;
                }
            }
        }
    }
    omega.set_trainable(false);
    Ok(omega)
}

/// MAS penalty `lambda * sum omega_i (theta_i - anchor_i)^2`; the gradient
/// `lambda * 2 omega_i (theta_i - anchor_i)` is added into existing grads.
/// Returns the penalty value.
pub fn mas_penalty_grad(params: &mut ParamSet, state: &MasState) -> Result<f64, MasError> {
    if !params.same_layout(&state.anchor) || !params.same_layout(&state.omega) {
        return Err(MasError::LayoutMismatch(
            "omega/anchor entries do not match the parameter set".to_string(),
        ));
    }
    let lambda = state.lambda_mas;
    let mut value = 0.0;
    for ((entry, anchor), omega) in
        params.iter_mut().zip(state.anchor.iter()).zip(state.omega.iter())
    {
        let diffs: alloc::vec::Vec<f64> = entry
            .tensor
            .values
            .iter()
            .zip(anchor.tensor.values.iter())
            .map(|(p, a)| p - a)
            .collect();
        for (d, o) in diffs.iter().zip(omega.tensor.values.iter()) {
            value += lambda * o * d * d;
        }
        if entry.trainable {
            let grad = entry.tensor.grad_mut();
            for ((g, d), o) in grad.iter_mut().zip(diffs.iter()).zip(omega.tensor.values.iter()) {
                *g += lambda * 2.0 * o * d;
            }
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use alloc::vec::Vec;

    fn delta_of(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("d", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), true).unwrap();
        p
    }

    #[test]
    fn zero_delta_zero_value() {
        let d = delta_of(&[0.0, 0.0, 0.0]);
        for kind in [NormKind::L1, NormKind::L2, NormKind::Combined] {
            assert_eq!(penalty_value(&d, &PenaltyConfig::new(kind, 3.5)), 0.0);
        }
    }

    #[test]
    fn single_entry_closed_forms() {
        let d = delta_of(&[2.0]);
        assert_eq!(penalty_value(&d, &PenaltyConfig::new(NormKind::L1, 1.0)), 2.0);
        assert_eq!(penalty_value(&d, &PenaltyConfig::new(NormKind::L2, 1.0)), 4.0);
        assert_eq!(penalty_value(&d, &PenaltyConfig::new(NormKind::Combined, 1.0)), 3.0);
    }

    #[test]
    fn l1_hand_sum() {
        let d = delta_of(&[1.0, -2.0, 3.0]);
        assert_eq!(penalty_value(&d, &PenaltyConfig::new(NormKind::L1, 0.5)), 3.0);
    }

    #[test]
    fn lambda_scaling_is_exact() {
        let d = delta_of(&[0.3, -1.7, 0.02, 4.0]);
        for kind in [NormKind::L1, NormKind::L2, NormKind::Combined] {
            let base = penalty_value(&d, &PenaltyConfig::new(kind, 1.0));
            for c in [0.0, 0.25, 2.0, 10.0] {
                assert_eq!(penalty_value(&d, &PenaltyConfig::new(kind, c)), c * base);
            }
        }
    }

    #[test]
    fn grad_at_zero_is_exactly_zero() {
        for kind in [NormKind::L1, NormKind::L2, NormKind::Combined] {
            let mut d = delta_of(&[0.0, 0.0]);
            penalty_grad(&mut d, &PenaltyConfig::new(kind, 1.0));
            let g = d.get("d").unwrap().tensor.grad.as_ref().unwrap();
            assert_eq!(g.as_slice(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn grad_closed_forms() {
        let expect = [(NormKind::L1, 1.0), (NormKind::L2, 4.0), (NormKind::Combined, 2.5)];
        for (kind, want) in expect {
            let mut d = delta_of(&[2.0]);
            penalty_grad(&mut d, &PenaltyConfig::new(kind, 1.0));
            assert_eq!(d.get("d").unwrap().tensor.grad.as_ref().unwrap()[0], want);
        }
    }

    #[test]
    fn grad_accumulates_into_existing() {
        let mut d = delta_of(&[2.0]);
        d.get_mut("d").unwrap().tensor.grad = Some(vec![10.0]);
        penalty_grad(&mut d, &PenaltyConfig::new(NormKind::L2, 1.0));
        assert_eq!(d.get("d").unwrap().tensor.grad.as_ref().unwrap()[0], 14.0);
    }

    #[test]
    fn grad_matches_finite_differences_away_from_zero() {
        let values = [0.7, -1.3, 0.04, 2.2, -0.5];
        let h = 1e-6;
        for kind in [NormKind::L1, NormKind::L2, NormKind::Combined] {
            let cfg = PenaltyConfig::new(kind, 0.8);
            let mut d = delta_of(&values);
            penalty_grad(&mut d, &cfg);
            let analytic: Vec<f64> = d.get("d").unwrap().tensor.grad.as_ref().unwrap().clone();
            for i in 0..values.len() {
                let mut plus = values.to_vec();
                plus[i] += h;
                let mut minus = values.to_vec();
                minus[i] -= h;
                let num = (penalty_value(&delta_of(&plus), &cfg)
                    - penalty_value(&delta_of(&minus), &cfg))
                    / (2.0 * h);
                let rel = (analytic[i] - num).abs() / num.abs().max(1e-9);
                assert!(rel < 1e-6, "{kind:?} entry {i}: {} vs {num}", analytic[i]);
            }
        }
    }

    fn scalar_linear_spec() -> (ModelSpec, ParamSet, RunningStats) {
        // f(x) = w*x as a 1->1 dense layer with zero bias
        let spec = ModelSpec {
            layers: vec![LayerSpec::Dense { in_features: 1, out_features: 1 }],
            input_shape: vec![1],
            classes: 2,
        };
        let mut p = ParamSet::new();
        p.push("0.weight", Tensor::new(vec![1, 1], vec![1.0]).unwrap(), true).unwrap();
        p.push("0.bias", Tensor::zeros(vec![1]), true).unwrap();
        let stats = RunningStats::identity_for(&spec);
        (spec, p, stats)
    }

    #[test]
    fn mas_importance_scalar_closed_form() {
        // d(w^2 x^2)/dw = 2wx^2 = 2 at w=1, x=1
        let (spec, p, stats) = scalar_linear_spec();
        let data = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let omega = mas_importance(&spec, &p, &stats, &data).unwrap();
        assert!((omega.get("0.weight").unwrap().tensor.values[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mas_importance_zero_input_contributes_zero() {
        let (spec, p, stats) = scalar_linear_spec();
        let data = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let omega = mas_importance(&spec, &p, &stats, &data).unwrap();
        assert_eq!(omega.get("0.weight").unwrap().tensor.values[0], 0.0);
    }

    #[test]
    fn mas_importance_hand_average() {
        // samples x in {1,2}: (2 + 8)/2 = 5
        let (spec, p, stats) = scalar_linear_spec();
        let data = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let omega = mas_importance(&spec, &p, &stats, &data).unwrap();
        assert!((omega.get("0.weight").unwrap().tensor.values[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mas_importance_rejects_empty() {
        let (spec, p, stats) = scalar_linear_spec();
        let data = Tensor { shape: vec![0, 1], values: vec![], grad: None };
        assert_eq!(mas_importance(&spec, &p, &stats, &data).unwrap_err(), MasError::EmptyData);
    }

    #[test]
    fn mas_penalty_at_anchor_is_zero() {
        let (_, p, _) = scalar_linear_spec();
        let state = MasState { omega: p.zeros_like(), anchor: p.clone(), lambda_mas: 1.0 };
        let mut params = p.clone();
        let v = mas_penalty_grad(&mut params, &state).unwrap();
        assert_eq!(v, 0.0);
        assert!(params
            .iter()
            .all(|e| e.tensor.grad.as_ref().map_or(true, |g| g.iter().all(|&x| x == 0.0))));
    }

    #[test]
    fn mas_penalty_closed_form() {
        // one entry at distance 1 with omega 5: value 5, grad 10
        let mut params = ParamSet::new();
        params.push("w", Tensor::scalar(2.0), true).unwrap();
        let mut anchor = ParamSet::new();
        anchor.push("w", Tensor::scalar(1.0), true).unwrap();
        let mut omega = ParamSet::new();
        omega.push("w", Tensor::scalar(5.0), true).unwrap();
        let state = MasState { omega, anchor, lambda_mas: 1.0 };
        let v = mas_penalty_grad(&mut params, &state).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(params.get("w").unwrap().tensor.grad.as_ref().unwrap()[0], 10.0);
    }

    #[test]
    fn mas_zero_omega_is_free_movement() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::scalar(9.0), true).unwrap();
        let mut anchor = ParamSet::new();
        anchor.push("w", Tensor::scalar(1.0), true).unwrap();
        let state = MasState { omega: params.zeros_like(), anchor, lambda_mas: 1.0 };
        let v = mas_penalty_grad(&mut params, &state).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(params.get("w").unwrap().tensor.grad.as_ref().unwrap()[0], 0.0);
    }

    #[test]
    fn mas_layout_mismatch_errors() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::scalar(1.0), true).unwrap();
        let mut anchor = ParamSet::new();
        anchor.push("other", Tensor::scalar(1.0), true).unwrap();
        let state = MasState { omega: params.zeros_like(), anchor, lambda_mas: 1.0 };
        assert!(matches!(mas_penalty_grad(&mut params, &state), Err(MasError::LayoutMismatch(_))));
    }
}
