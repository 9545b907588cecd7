//! Layer/model specs, parameter initialization, and the three forward
//! compositions: plain, frozen-base-plus-delta (layerwise output sum),
//! and side-tuned (output alpha blend).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamSet;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// One layer of the architecture shared by base and change network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum LayerSpec {
    Dense { in_features: usize, out_features: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { channels: usize, eps: f64 },
    Relu,
    Flatten,
}

/// Ordered layers plus the input shape (without batch dimension) and the
/// number of classes the final layer must emit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    InvalidSpec(String),
    Tape(TapeError),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::InvalidSpec(s) => write!(f, "invalid model spec: {s}"),
            NetError::Tape(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NetError {}

impl From<TapeError> for NetError {
    fn from(e: TapeError) -> Self {
        NetError::Tape(e)
    }
}

impl ModelSpec {
    /// The small convolutional architecture used throughout: two conv
    /// blocks with batchnorm, then a dense head.
    pub fn desk_conv_net(input_shape: (usize, usize, usize), classes: usize) -> ModelSpec {
        let (c, h, w) = input_shape;
        let h2 = (h + 2 - 3) / 2 + 1;
        let w2 = (w + 2 - 3) / 2 + 1;
        ModelSpec {
            layers: vec![
                LayerSpec::Conv { in_channels: c, out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm { channels: 8, eps: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::BatchNorm { channels: 16, eps: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_features: 16 * h2 * w2, out_features: classes },
            ],
            input_shape: vec![c, h, w],
            classes,
        }
    }

    /// Output shape (without batch dimension) after each layer, verifying
    /// that consecutive layers compose and that the final layer emits the
    /// class count.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, NetError> {
        if self.classes < 2 {
            return Err(NetError::InvalidSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { in_features, out_features } => {
                    if cur != [*in_features] {
                        return Err(NetError::InvalidSpec(format!(
                            "layer {i}: dense expects [{in_features}], got {cur:?}"
                        )));
                    }
                    vec![*out_features]
                }
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                    if cur.len() != 3 || cur[0] != *in_channels {
                        return Err(NetError::InvalidSpec(format!(
                            "layer {i}: conv expects [{in_channels},h,w], got {cur:?}"
                        )));
                    }
                    if *stride == 0 {
                        return Err(NetError::InvalidSpec(format!("layer {i}: stride must be positive")));
                    }
                    let (h, w) = (cur[1], cur[2]);
                    if *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                        return Err(NetError::InvalidSpec(format!(
                            "layer {i}: kernel {kernel} larger than padded {h}x{w} input"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    let c = cur[0];
                    if c != *channels {
                        return Err(NetError::InvalidSpec(format!(
                            "layer {i}: batchnorm expects {channels} channels, got {cur:?}"
                        )));
                    }
                    cur
                }
                LayerSpec::Relu => cur,
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        if cur != [self.classes] {
            return Err(NetError::InvalidSpec(format!(
                "final layer emits {cur:?}, expected [{}] logits",
                self.classes
            )));
        }
        Ok(shapes)
    }
}

/// Frozen per-channel statistics for every batchnorm layer, owned once
/// and shared by base and change network.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    /// `(layer index, mean, var)` per batchnorm layer, in layer order.
    pub layers: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl RunningStats {
    /// Zero mean, unit variance for every batchnorm layer of the spec.
    pub fn identity_for(spec: &ModelSpec) -> RunningStats {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::BatchNorm { channels, .. } => {
                    Some((i, vec![0.0; *channels], vec![1.0; *channels]))
                }
                _ => None,
            })
            .collect();
        RunningStats { layers }
    }

    fn for_layer(&self, idx: usize) -> Option<(&[f64], &[f64])> {
        self.layers
            .iter()
            .find(|(i, _, _)| *i == idx)
            .map(|(_, m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// Builds parameters for a spec: He-initialized dense/conv weights,
/// zero biases and shifts, unit batchnorm scales. Deterministic in the
/// seed.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet, NetError> {
    spec.layer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let push = |params: &mut ParamSet, name: String, t: Tensor| {
        params.push(&name, t, true).expect("layer-scoped names are unique");
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { in_features, out_features } => {
                let std = (2.0 / *in_features as f64).sqrt();
                let w = sample_normal(&mut rng, in_features * out_features, std);
                push(&mut params, format!("{i}.weight"), Tensor::new(vec![*in_features, *out_features], w).unwrap());
                push(&mut params, format!("{i}.bias"), Tensor::zeros(vec![*out_features]));
            }
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let w = sample_normal(&mut rng, out_channels * fan_in, std);
                push(
                    &mut params,
                    format!("{i}.weight"),
                    Tensor::new(vec![*out_channels, *in_channels, *kernel, *kernel], w).unwrap(),
                );
                push(&mut params, format!("{i}.bias"), Tensor::zeros(vec![*out_channels]));
            }
            LayerSpec::BatchNorm { channels, .. } => {
                push(
                    &mut params,
                    format!("{i}.gamma"),
                    Tensor::new(vec![*channels], vec![1.0; *channels]).unwrap(),
                );
                push(&mut params, format!("{i}.beta"), Tensor::zeros(vec![*channels]));
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
    }
    Ok(params)
}

/// Box-Muller draws; two uniforms per normal keep the stream layout
/// independent of rejection behavior.
fn sample_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos();
        out.push(z * std);
    }
    out
}

/// Frozen pre-trained parameters plus a trainable, zero-initialized
/// change network over the same layout; running statistics owned once.
#[derive(Debug, Clone)]
pub struct ChangeModel {
    pub spec: ModelSpec,
    pub base: ParamSet,
    pub delta: ParamSet,
    pub stats: RunningStats,
}

impl ChangeModel {
    pub fn new(spec: ModelSpec, mut base: ParamSet, stats: RunningStats) -> ChangeModel {
        base.set_trainable(false);
        let mut delta = base.zeros_like();
        delta.set_trainable(true);
        ChangeModel { spec, base, delta, stats }
    }

    /// Entrywise `base + delta` as a plain parameter set.
    pub fn materialize_sum(&self) -> ParamSet {
        self.base.entrywise_sum(&self.delta).expect("base and delta share one layout")
    }
}

/// Frozen base plus a trainable copy whose output is alpha-blended with
/// the base output at the logit level.
#[derive(Debug, Clone)]
pub struct SideTunedModel {
    pub spec: ModelSpec,
    pub base: ParamSet,
    pub side: ParamSet,
    /// Blend weight through a sigmoid: `alpha = sigmoid(blend_logit)`.
    pub blend_logit: f64,
    pub stats: RunningStats,
}

impl SideTunedModel {
    pub fn new(spec: ModelSpec, mut base: ParamSet, stats: RunningStats) -> SideTunedModel {
        base.set_trainable(false);
        let mut side = base.clone();
        side.set_trainable(true);
        SideTunedModel { spec, base, side, blend_logit: 0.0, stats }
    }

    pub fn alpha(&self) -> f64 {
        1.0 / (1.0 + (-self.blend_logit).exp())
    }
}

/// Tape node ids for a staged parameter set, aligned with entry order.
pub struct StagedParams {
    ids: Vec<NodeId>,
}

/// Copies every entry onto the tape: trainable entries as gradient-tracked
/// leaves, frozen entries as constants (detached).
pub fn stage_params(tape: &mut Tape, params: &ParamSet) -> StagedParams {
    let ids = params
        .iter()
        .map(|e| {
            let t = Tensor { shape: e.tensor.shape.clone(), values: e.tensor.values.clone(), grad: None };
            if e.trainable {
                tape.param(t)
            } else {
                tape.input(t)
            }
        })
        .collect();
    StagedParams { ids }
}

/// Writes tape gradients back into the trainable entries; entries the
/// loss never reached get zero gradients.
pub fn export_grads(tape: &Tape, staged: &StagedParams, params: &mut ParamSet) {
    for (entry, id) in params.iter_mut().zip(staged.ids.iter()) {
        if !entry.trainable {
            continue;
        }
        let buf = entry.tensor.grad_mut();
        match tape.grad(*id) {
            Some(g) => {
                for (dst, src) in buf.iter_mut().zip(g.iter()) {
                    *dst += src;
                }
            }
            None => {}
        }
    }
}

struct LayerIds<'a> {
    params: &'a ParamSet,
    staged: &'a StagedParams,
}

impl<'a> LayerIds<'a> {
    fn get(&self, layer: usize, field: &str) -> NodeId {
        let name = format!("{layer}.{field}");
        let pos = self
            .params
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.staged.ids[pos]
    }
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<(), NetError> {
    if batch.shape.len() != spec.input_shape.len() + 1 || batch.shape[1..] != spec.input_shape[..] {
        return Err(NetError::InvalidSpec(format!(
            "batch shape {:?} does not match input shape {:?}",
            batch.shape, spec.input_shape
        )));
    }
    Ok(())
}

/// Sequential forward over staged parameters; returns the logits node.
pub fn forward_nodes(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ParamSet,
    staged: &StagedParams,
    stats: &RunningStats,
    input: NodeId,
) -> Result<NodeId, NetError> {
    let ids = LayerIds { params, staged };
    let mut x = input;
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match layer {
            LayerSpec::Dense { .. } => tape.linear(x, ids.get(i, "weight"), ids.get(i, "bias"))?,
            LayerSpec::Conv { stride, padding, .. } => {
                tape.conv2d(x, ids.get(i, "weight"), ids.get(i, "bias"), *stride, *padding)?
            }
            LayerSpec::BatchNorm { eps, .. } => {
                let (mean, var) = stats
                    .for_layer(i)
                    .ok_or_else(|| NetError::InvalidSpec(format!("no running stats for layer {i}")))?;
                let (mean, var) = (mean.to_vec(), var.to_vec());
                tape.batchnorm(x, ids.get(i, "gamma"), ids.get(i, "beta"), &mean, &var, *eps)?
            }
            LayerSpec::Relu => tape.relu(x)?,
            LayerSpec::Flatten => tape.flatten(x)?,
        };
    }
    Ok(x)
}

/// Layerwise output sum: at each parameterized layer the base output and
/// the delta output are computed on the same incoming activation and
/// added before any nonlinearity.
pub fn combined_nodes(
    tape: &mut Tape,
    spec: &ModelSpec,
    base: (&ParamSet, &StagedParams),
    delta: (&ParamSet, &StagedParams),
    stats: &RunningStats,
    input: NodeId,
) -> Result<NodeId, NetError> {
    let base_ids = LayerIds { params: base.0, staged: base.1 };
    let delta_ids = LayerIds { params: delta.0, staged: delta.1 };
    let mut x = input;
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match layer {
            LayerSpec::Dense { .. } => {
                let a = tape.linear(x, base_ids.get(i, "weight"), base_ids.get(i, "bias"))?;
                let b = tape.linear(x, delta_ids.get(i, "weight"), delta_ids.get(i, "bias"))?;
                tape.add(a, b)?
            }
            LayerSpec::Conv { stride, padding, .. } => {
                let a = tape.conv2d(x, base_ids.get(i, "weight"), base_ids.get(i, "bias"), *stride, *padding)?;
                let b = tape.conv2d(x, delta_ids.get(i, "weight"), delta_ids.get(i, "bias"), *stride, *padding)?;
                tape.add(a, b)?
            }
            LayerSpec::BatchNorm { eps, .. } => {
                let (mean, var) = stats
                    .for_layer(i)
                    .ok_or_else(|| NetError::InvalidSpec(format!("no running stats for layer {i}")))?;
                let (mean, var) = (mean.to_vec(), var.to_vec());
                let a = tape.batchnorm(x, base_ids.get(i, "gamma"), base_ids.get(i, "beta"), &mean, &var, *eps)?;
                let b = tape.batchnorm(x, delta_ids.get(i, "gamma"), delta_ids.get(i, "beta"), &mean, &var, *eps)?;
                tape.add(a, b)?
            }
            LayerSpec::Relu => tape.relu(x)?,
            LayerSpec::Flatten => tape.flatten(x)?,
        };
    }
    Ok(x)
}

/// Output-level alpha blend: `alpha*base_logits + (1-alpha)*side_logits`.
pub fn side_nodes(
    tape: &mut Tape,
    spec: &ModelSpec,
    base: (&ParamSet, &StagedParams),
    side: (&ParamSet, &StagedParams),
    blend_logit: NodeId,
    stats: &RunningStats,
    input: NodeId,
) -> Result<NodeId, NetError> {
    let base_logits = forward_nodes(tape, spec, base.0, base.1, stats, input)?;
    let side_logits = forward_nodes(tape, spec, side.0, side.1, stats, input)?;
    let alpha = tape.sigmoid_scalar(blend_logit)?;
    let one_minus = tape.affine_scalar(alpha, -1.0, 1.0)?;
    let a = tape.scale_tensor(alpha, base_logits)?;
    let b = tape.scale_tensor(one_minus, side_logits)?;
    Ok(tape.add(a, b)?)
}

/// Plain forward pass; builds a throwaway tape.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamSet,
    stats: &RunningStats,
    batch: &Tensor,
) -> Result<Tensor, NetError> {
    check_batch(spec, batch)?;
    let mut tape = Tape::new();
    let input = tape.input(batch.clone());
    let staged = stage_params(&mut tape, params);
    let logits = forward_nodes(&mut tape, spec, params, &staged, stats, input)?;
    Ok(tape.value(logits).clone())
}

/// Forward through the frozen base plus the change network.
pub fn combined_forward(model: &ChangeModel, batch: &Tensor) -> Result<Tensor, NetError> {
    check_batch(&model.spec, batch)?;
    let mut tape = Tape::new();
    let input = tape.input(batch.clone());
    let base_staged = stage_params(&mut tape, &model.base);
    let delta_staged = stage_params(&mut tape, &model.delta);
    let logits = combined_nodes(
        &mut tape,
        &model.spec,
        (&model.base, &base_staged),
        (&model.delta, &delta_staged),
        &model.stats,
        input,
    )?;
    Ok(tape.value(logits).clone())
}

/// Forward through the alpha-blended side-tuned model.
pub fn side_forward(model: &SideTunedModel, batch: &Tensor) -> Result<Tensor, NetError> {
    check_batch(&model.spec, batch)?;
    let mut tape = Tape::new();
    let input = tape.input(batch.clone());
    let base_staged = stage_params(&mut tape, &model.base);
    let side_staged = stage_params(&mut tape, &model.side);
    let blend = tape.input(Tensor::scalar(model.blend_logit));
    let logits = side_nodes(
        &mut tape,
        &model.spec,
        (&model.base, &base_staged),
        (&model.side, &side_staged),
        blend,
        &model.stats,
        input,
    )?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dense_identity_spec() -> ModelSpec {
        ModelSpec {
            layers: vec![LayerSpec::Dense { in_features: 2, out_features: 2 }],
            input_shape: vec![2],
            classes: 2,
        }
    }

    fn identity_params(spec: &ModelSpec) -> ParamSet {
        let mut p = build_model(spec, 0).unwrap();
        p.get_mut("0.weight").unwrap().tensor =
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let spec = ModelSpec::desk_conv_net((3, 16, 16), 2);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batchnorm_scales_initialized_to_one() {
        let spec = ModelSpec::desk_conv_net((3, 16, 16), 2);
        let p = build_model(&spec, 1).unwrap();
        assert!(p.get("1.gamma").unwrap().tensor.values.iter().all(|&v| v == 1.0));
        assert!(p.get("1.beta").unwrap().tensor.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        let spec = ModelSpec {
            layers: vec![LayerSpec::Dense { in_features: 100, out_features: 100 }],
            input_shape: vec![100],
            classes: 100,
        };
        let p = build_model(&spec, 42).unwrap();
        let w = &p.get("0.weight").unwrap().tensor.values;
        assert_eq!(w.len(), 10_000);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        let expect = (2.0f64 / 100.0).sqrt();
        assert!((std - expect).abs() < 0.1 * expect, "std {std} vs {expect}");
    }

    #[test]
    fn non_composing_spec_errors() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Dense { in_features: 3, out_features: 4 },
                LayerSpec::Dense { in_features: 5, out_features: 2 },
            ],
            input_shape: vec![3],
            classes: 2,
        };
        assert!(matches!(build_model(&spec, 0), Err(NetError::InvalidSpec(_))));
    }

    #[test]
    fn forward_identity_dense() {
        let spec = dense_identity_spec();
        let p = identity_params(&spec);
        let stats = RunningStats::identity_for(&spec);
        let batch = Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap();
        let out = forward(&spec, &p, &stats, &batch).unwrap();
        assert_eq!(out.values, vec![0.5, -2.0]);
    }

    #[test]
    fn flatten_preserves_row_major_order() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { in_features: 4, out_features: 4 },
            ],
            input_shape: vec![2, 2, 1],
            classes: 4,
        };
        let mut p = build_model(&spec, 0).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        p.get_mut("1.weight").unwrap().tensor = Tensor::new(vec![4, 4], eye).unwrap();
        let stats = RunningStats::identity_for(&spec);
        let batch = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = forward(&spec, &p, &stats, &batch).unwrap();
        assert_eq!(out.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    // Straight-line recomputation of a fixed two-layer net, independent of
    // the tape walker.
    #[test]
    fn forward_matches_straight_line_recomputation() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Dense { in_features: 3, out_features: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_features: 4, out_features: 2 },
            ],
            input_shape: vec![3],
            classes: 2,
        };
        let p = build_model(&spec, 99).unwrap();
        let stats = RunningStats::identity_for(&spec);
        let x = [0.3, -1.2, 2.0];
        let batch = Tensor::new(vec![1, 3], x.to_vec()).unwrap();
        let out = forward(&spec, &p, &stats, &batch).unwrap();

        let w0 = &p.get("0.weight").unwrap().tensor.values;
        let b0 = &p.get("0.bias").unwrap().tensor.values;
        let w2 = &p.get("2.weight").unwrap().tensor.values;
        let b2 = &p.get("2.bias").unwrap().tensor.values;
        let mut hidden = [0.0; 4];
        for j in 0..4 {
            let mut acc = b0[j];
            for (k, &xv) in x.iter().enumerate() {
                acc += xv * w0[k * 4 + j];
            }
            hidden[j] = acc.max(0.0);
        }
        let mut logits = [0.0; 2];
        for j in 0..2 {
            let mut acc = b2[j];
            for (k, &hv) in hidden.iter().enumerate() {
                acc += hv * w2[k * 2 + j];
            }
            logits[j] = acc;
        }
        assert!((out.values[0] - logits[0]).abs() < 1e-12);
        assert!((out.values[1] - logits[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_delta_combined_equals_base_exactly() {
        let spec = ModelSpec::desk_conv_net((3, 8, 8), 2);
        let params = build_model(&spec, 5).unwrap();
        let stats = RunningStats::identity_for(&spec);
        let model = ChangeModel::new(spec.clone(), params.clone(), stats.clone());
        let batch = random_batch(&spec, 3, 11);
        let plain = forward(&spec, &params, &stats, &batch).unwrap();
        let combined = combined_forward(&model, &batch).unwrap();
        assert_eq!(plain.values, combined.values);
    }

    #[test]
    fn combined_matches_materialized_sum() {
        let spec = ModelSpec::desk_conv_net((3, 8, 8), 2);
        let params = build_model(&spec, 5).unwrap();
        let stats = RunningStats::identity_for(&spec);
        let mut model = ChangeModel::new(spec.clone(), params, stats.clone());
        perturb_delta(&mut model, 13);
        let batch = random_batch(&spec, 2, 17);
        let combined = combined_forward(&model, &batch).unwrap();
        let summed = model.materialize_sum();
        let plain = forward(&spec, &summed, &stats, &batch).unwrap();
        for (a, b) in combined.values.iter().zip(plain.values.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn doubling_delta_doubles_logit_offset_on_linear_model() {
        let spec = dense_identity_spec();
        let params = identity_params(&spec);
        let stats = RunningStats::identity_for(&spec);
        let mut model = ChangeModel::new(spec.clone(), params.clone(), stats.clone());
        perturb_delta(&mut model, 3);
        let batch = Tensor::new(vec![1, 2], vec![0.7, -0.4]).unwrap();
        let base = forward(&spec, &params, &stats, &batch).unwrap();
        let once = combined_forward(&model, &batch).unwrap();
        for e in model.delta.iter_mut() {
            for v in e.tensor.values.iter_mut() {
                *v *= 2.0;
            }
        }
        let twice = combined_forward(&model, &batch).unwrap();
        for i in 0..2 {
            let d1 = once.values[i] - base.values[i];
            let d2 = twice.values[i] - base.values[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn materialize_sum_cancellation() {
        let spec = dense_identity_spec();
        let params = identity_params(&spec);
        let mut model =
            ChangeModel::new(spec.clone(), params.clone(), RunningStats::identity_for(&spec));
        for (d, b) in model.delta.iter_mut().zip(params.iter()) {
            for (dv, bv) in d.tensor.values.iter_mut().zip(b.tensor.values.iter()) {
                *dv = -bv;
            }
        }
        let sum = model.materialize_sum();
        assert!(sum.iter().all(|e| e.tensor.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn side_blend_saturates_to_base() {
        let spec = ModelSpec::desk_conv_net((3, 8, 8), 2);
        let params = build_model(&spec, 21).unwrap();
        let stats = RunningStats::identity_for(&spec);
        let mut model = SideTunedModel::new(spec.clone(), params.clone(), stats.clone());
        // Make the side branch differ so the blend actually matters.
        for e in model.side.iter_mut() {
            for v in e.tensor.values.iter_mut() {
                *v += 0.5;
            }
        }
        model.blend_logit = 40.0;
        let batch = random_batch(&spec, 2, 23);
        let blended = side_forward(&model, &batch).unwrap();
        let base = forward(&spec, &params, &stats, &batch).unwrap();
        for (a, b) in blended.values.iter().zip(base.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn side_equal_branches_blend_invariant() {
        let spec = dense_identity_spec();
        let params = identity_params(&spec);
        let stats = RunningStats::identity_for(&spec);
        let batch = Tensor::new(vec![1, 2], vec![1.5, -0.25]).unwrap();
        let base_out = forward(&spec, &params, &stats, &batch).unwrap();
        for logit in [-3.0, 0.0, 2.5] {
            let mut model = SideTunedModel::new(spec.clone(), params.clone(), stats.clone());
            model.blend_logit = logit;
            let out = side_forward(&model, &batch).unwrap();
            for (a, b) in out.values.iter().zip(base_out.values.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    pub(crate) fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![n];
        shape.extend_from_slice(&spec.input_shape);
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(shape, values).unwrap()
    }

    pub(crate) fn perturb_delta(model: &mut ChangeModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in model.delta.iter_mut() {
            for v in e.tensor.values.iter_mut() {
                *v = (rng.gen::<f64>() - 0.5) * 0.2;
            }
        }
    }
}
