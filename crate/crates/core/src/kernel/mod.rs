//! Candidate operation kernels: forward and backward passes with exact
//! gradients, plus the parameter containers shared by the supernet.
//!
//! Every candidate maps its input shape to an identical output shape so
//! that mixed-operation outputs can be summed. Convolution candidates use
//! stride 1 with same-size zero padding; the non-identity candidates use a
//! rectifier activation internally and a linear final stage.

pub mod loss;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One operation of the per-layer candidate family.
///
/// The full family is `identity` plus six convolution blocks
/// (kernel 3/5/7 x expansion 3/6), each with an optional residual
/// shortcut: 13 candidates in total. A dense expand-contract block is
/// available as an additional kind for flat inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CandidateOpSpec {
    Identity,
    DenseExpand { expansion: usize, shortcut: bool },
    Conv2d { kernel: usize, expansion: usize, shortcut: bool },
}

impl CandidateOpSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CandidateOpSpec::Identity => Ok(()),
            CandidateOpSpec::DenseExpand { expansion, .. } => {
                if !matches!(expansion, 3 | 6) {
                    return Err(Error::Config(format!(
                        "dense expansion ratio must be 3 or 6, got {expansion}"
                    )));
                }
                Ok(())
            }
            CandidateOpSpec::Conv2d {
                kernel, expansion, ..
            } => {
                if !matches!(kernel, 3 | 5 | 7) {
                    return Err(Error::Config(format!(
                        "conv kernel must be 3, 5 or 7, got {kernel}"
                    )));
                }
                if !matches!(expansion, 3 | 6) {
                    return Err(Error::Config(format!(
                        "conv expansion ratio must be 3 or 6, got {expansion}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CandidateOpSpec::Identity)
    }

    /// Canonical name used in config and plan files, e.g. `conv5x5-e3-res`.
    pub fn name(&self) -> String {
        match *self {
            CandidateOpSpec::Identity => "identity".to_string(),
            CandidateOpSpec::DenseExpand {
                expansion,
                shortcut,
            } => {
                if shortcut {
                    format!("dense-e{expansion}-res")
                } else {
                    format!("dense-e{expansion}")
                }
            }
            CandidateOpSpec::Conv2d {
                kernel,
                expansion,
                shortcut,
            } => {
                if shortcut {
                    format!("conv{kernel}x{kernel}-e{expansion}-res")
                } else {
                    format!("conv{kernel}x{kernel}-e{expansion}")
                }
            }
        }
    }

    /// Parses the canonical name format produced by [`CandidateOpSpec::name`].
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown candidate operation `{s}`"));
        if s == "identity" {
            return Ok(CandidateOpSpec::Identity);
        }
        let (body, shortcut) = match s.strip_suffix("-res") {
            Some(b) => (b, true),
            None => (s, false),
        };
        if let Some(rest) = body.strip_prefix("dense-e") {
            let expansion: usize = rest.parse().map_err(|_| bad())?;
            let spec = CandidateOpSpec::DenseExpand {
                expansion,
                shortcut,
            };
            spec.validate()?;
            return Ok(spec);
        }
        if let Some(rest) = body.strip_prefix("conv") {
            // e.g. "3x3-e6"
            let mut parts = rest.splitn(2, "-e");
            let kxk = parts.next().ok_or_else(bad)?;
            let expansion: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let mut dims = kxk.splitn(2, 'x');
            let k1: usize = dims.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let k2: usize = dims.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if k1 != k2 {
                return Err(bad());
            }
            let spec = CandidateOpSpec::Conv2d {
                kernel: k1,
                expansion,
                shortcut,
            };
            spec.validate()?;
            return Ok(spec);
        }
        Err(bad())
    }

    /// The full 13-candidate family: identity plus conv kernel {3,5,7} x
    /// expansion {3,6}, each conv with and without a shortcut.
    pub fn full_family() -> Vec<CandidateOpSpec> {
        let mut out = vec![CandidateOpSpec::Identity];
        for kernel in [3usize, 5, 7] {
            for expansion in [3usize, 6] {
                for shortcut in [false, true] {
                    out.push(CandidateOpSpec::Conv2d {
                        kernel,
                        expansion,
                        shortcut,
                    });
                }
            }
        }
        out
    }

    /// Multiply-accumulate count of one forward evaluation on `shape`.
    /// This is the reference workload behind the synthetic latency tables.
    pub fn mac_count(&self, shape: &[usize]) -> u64 {
        let numel: usize = shape.iter().product();
        match *self {
            CandidateOpSpec::Identity => 0,
            CandidateOpSpec::DenseExpand {
                expansion,
                shortcut,
            } => {
                let d = numel as u64;
                let e = expansion as u64;
                2 * e * d * d + if shortcut { d } else { 0 }
            }
            CandidateOpSpec::Conv2d {
                kernel,
                expansion,
                shortcut,
            } => {
                let (h, w, c) = conv_dims_u64(shape);
                let e = expansion as u64;
                let k = kernel as u64;
                h * w * c * e * (2 * c + k * k) + if shortcut { h * w * c } else { 0 }
            }
        }
    }

    /// Freshly initialized parameters for this candidate at `shape`.
    /// Biases start small but nonzero so rectifier pre-activations do not
    /// sit exactly on the kink (padding can zero out every weighted tap).
    pub fn init_weights(&self, shape: &[usize], rng: &mut impl Rng) -> Result<CandidateWeights> {
        self.validate()?;
        match *self {
            CandidateOpSpec::Identity => Ok(CandidateWeights::Identity),
            CandidateOpSpec::DenseExpand { expansion, .. } => {
                let d: usize = shape.iter().product();
                let mid = d * expansion;
                Ok(CandidateWeights::Dense {
                    w1: init_tensor(&[mid, d], d, rng),
                    b1: init_bias(&[mid], rng),
                    w2: init_tensor(&[d, mid], mid, rng),
                    b2: init_bias(&[d], rng),
                })
            }
            CandidateOpSpec::Conv2d {
                kernel, expansion, ..
            } => {
                let (_, _, c) = conv_dims(shape)?;
                let mid = c * expansion;
                Ok(CandidateWeights::Conv {
                    w_expand: init_tensor(&[mid, c], c, rng),
                    b_expand: init_bias(&[mid], rng),
                    w_depth: init_tensor(&[mid, kernel, kernel], kernel * kernel, rng),
                    b_depth: init_bias(&[mid], rng),
                    w_project: init_tensor(&[c, mid], mid, rng),
                    b_project: init_bias(&[c], rng),
                })
            }
        }
    }
}

impl std::fmt::Display for CandidateOpSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

fn conv_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "conv candidate input (expects HxWxC)",
            expected: vec![3],
            got: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn conv_dims_u64(shape: &[usize]) -> (u64, u64, u64) {
    if shape.len() == 3 {
        (shape[0] as u64, shape[1] as u64, shape[2] as u64)
    } else {
        // Treat a flat shape as a 1x1 image with `numel` channels.
        (1, 1, shape.iter().product::<usize>() as u64)
    }
}

fn init_tensor(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

fn init_bias(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    t
}

/// Parameter tensors of one candidate instance. The same layout doubles
/// as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CandidateWeights {
    Identity,
    Dense {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    Conv {
        w_expand: Tensor,
        b_expand: Tensor,
        w_depth: Tensor,
        b_depth: Tensor,
        w_project: Tensor,
        b_project: Tensor,
    },
}

pub type CandidateGrads = CandidateWeights;

impl CandidateWeights {
    pub fn zeros_like(&self) -> CandidateWeights {
        match self {
            CandidateWeights::Identity => CandidateWeights::Identity,
            CandidateWeights::Dense { w1, b1, w2, b2 } => CandidateWeights::Dense {
                w1: Tensor::zeros(w1.shape()),
                b1: Tensor::zeros(b1.shape()),
                w2: Tensor::zeros(w2.shape()),
                b2: Tensor::zeros(b2.shape()),
            },
            CandidateWeights::Conv {
                w_expand,
                b_expand,
                w_depth,
                b_depth,
                w_project,
                b_project,
            } => CandidateWeights::Conv {
                w_expand: Tensor::zeros(w_expand.shape()),
                b_expand: Tensor::zeros(b_expand.shape()),
                w_depth: Tensor::zeros(w_depth.shape()),
                b_depth: Tensor::zeros(b_depth.shape()),
                w_project: Tensor::zeros(w_project.shape()),
                b_project: Tensor::zeros(b_project.shape()),
            },
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            CandidateWeights::Identity => vec![],
            CandidateWeights::Dense { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            CandidateWeights::Conv {
                w_expand,
                b_expand,
                w_depth,
                b_depth,
                w_project,
                b_project,
            } => vec![w_expand, b_expand, w_depth, b_depth, w_project, b_project],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            CandidateWeights::Identity => vec![],
            CandidateWeights::Dense { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            CandidateWeights::Conv {
                w_expand,
                b_expand,
                w_depth,
                b_depth,
                w_project,
                b_project,
            } => vec![w_expand, b_expand, w_depth, b_depth, w_project, b_project],
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.squared_norm()).sum()
    }

    /// `self += scale * other`, layouts must match.
    pub fn add_scaled(&mut self, other: &CandidateWeights, scale: f64) {
        let others: Vec<&Tensor> = other.tensors();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(others) {
            mine.add_scaled(theirs, scale);
        }
    }
}

/// Per-layer, per-candidate parameter tensors of a supernet trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub layers: Vec<Vec<CandidateWeights>>,
}

impl WeightSet {
    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|cands| cands.iter())
            .map(|w| w.squared_norm())
            .sum()
    }
}

/// A labeled mini-batch: `K` input tensors with class indices.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    inputs: Vec<&'a Tensor>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Config(format!(
                "batch needs K >= 1 matching inputs and labels, got {} inputs / {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        for &label in &labels {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                });
            }
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[&'a Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Runs one candidate forward. Output shape always equals the input shape.
pub fn candidate_forward(
    spec: &CandidateOpSpec,
    weights: &CandidateWeights,
    x: &Tensor,
) -> Result<Tensor> {
    match (spec, weights) {
        (CandidateOpSpec::Identity, CandidateWeights::Identity) => Ok(x.clone()),
        (
            CandidateOpSpec::DenseExpand { shortcut, .. },
            CandidateWeights::Dense { w1, b1, w2, b2 },
        ) => {
            let (_, _, mut y) = dense_stages(w1, b1, w2, b2, x)?;
            if *shortcut {
                y.add_scaled(x, 1.0);
            }
            Ok(y)
        }
        (CandidateOpSpec::Conv2d { shortcut, .. }, CandidateWeights::Conv { .. }) => {
            let stages = conv_stages(spec, weights, x)?;
            let mut y = stages.output;
            if *shortcut {
                y.add_scaled(x, 1.0);
            }
            Ok(y)
        }
        _ => Err(Error::Config(
            "candidate spec and weight layout do not match".to_string(),
        )),
    }
}

/// Runs one candidate backward pass: returns the gradient with respect to
/// the input and to the candidate's weights. Intermediate activations are
/// recomputed from `x`, so no forward context needs to be kept around.
pub fn candidate_backward(
    spec: &CandidateOpSpec,
    weights: &CandidateWeights,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, CandidateGrads)> {
    if !upstream.same_shape(x) {
        return Err(Error::ShapeMismatch {
            context: "candidate_backward upstream gradient",
            expected: x.shape().to_vec(),
            got: upstream.shape().to_vec(),
        });
    }
    match (spec, weights) {
        (CandidateOpSpec::Identity, CandidateWeights::Identity) => {
            Ok((upstream.clone(), CandidateGrads::Identity))
        }
        (
            CandidateOpSpec::DenseExpand { shortcut, .. },
            CandidateWeights::Dense { w1, b1, w2, b2 },
        ) => {
            let (z1, a1, _) = dense_stages(w1, b1, w2, b2, x)?;
            let d = x.numel();
            let mid = b1.numel();
            let g = upstream.data();

            let mut gw2 = Tensor::zeros(w2.shape());
            let mut gb2 = Tensor::zeros(b2.shape());
            let mut da1 = vec![0.0; mid];
            {
                let w2d = w2.data();
                let a1d = a1.data();
                let gw2d = gw2.data_mut();
                let gb2d = gb2.data_mut();
                for o in 0..d {
                    let go = g[o];
                    gb2d[o] += go;
                    for i in 0..mid {
                        gw2d[o * mid + i] += go * a1d[i];
                        da1[i] += go * w2d[o * mid + i];
                    }
                }
            }

            let mut gw1 = Tensor::zeros(w1.shape());
            let mut gb1 = Tensor::zeros(b1.shape());
            let mut dx = Tensor::zeros(x.shape());
            {
                let z1d = z1.data();
                let xd = x.data();
                let w1d = w1.data();
                let gw1d = gw1.data_mut();
                let gb1d = gb1.data_mut();
                let dxd = dx.data_mut();
                for i in 0..mid {
                    let dz = if z1d[i] > 0.0 { da1[i] } else { 0.0 };
                    if dz == 0.0 {
                        continue;
                    }
                    gb1d[i] += dz;
                    for j in 0..d {
                        gw1d[i * d + j] += dz * xd[j];
                        dxd[j] += dz * w1d[i * d + j];
                    }
                }
            }
            if *shortcut {
                dx.add_scaled(upstream, 1.0);
            }
            Ok((
                dx,
                CandidateGrads::Dense {
                    w1: gw1,
                    b1: gb1,
                    w2: gw2,
                    b2: gb2,
                },
            ))
        }
        (CandidateOpSpec::Conv2d { shortcut, .. }, CandidateWeights::Conv { .. }) => {
            let (mut dx, grads) = conv_backward(spec, weights, x, upstream)?;
            if *shortcut {
                dx.add_scaled(upstream, 1.0);
            }
            Ok((dx, grads))
        }
        _ => Err(Error::Config(
            "candidate spec and weight layout do not match".to_string(),
        )),
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Dense expand-contract stages: returns (z1 pre-activation, a1, output
/// without shortcut).
fn dense_stages(
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    x: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.numel();
    let mid = b1.numel();
    if w1.shape() != [mid, d] || w2.shape() != [d, mid] {
        return Err(Error::ShapeMismatch {
            context: "dense candidate weights vs input",
            expected: vec![mid, d],
            got: w1.shape().to_vec(),
        });
    }
    let xd = x.data();
    let w1d = w1.data();
    let b1d = b1.data();
    let mut z1 = Tensor::zeros(&[mid]);
    {
        let z1d = z1.data_mut();
        for i in 0..mid {
            let mut acc = b1d[i];
            for j in 0..d {
                acc += w1d[i * d + j] * xd[j];
            }
            z1d[i] = acc;
        }
    }
    let mut a1 = z1.clone();
    for v in a1.data_mut() {
        *v = relu(*v);
    }
    let w2d = w2.data();
    let b2d = b2.data();
    let a1d = a1.data();
    let mut y = Tensor::zeros(x.shape());
    {
        let yd = y.data_mut();
        for o in 0..d {
            let mut acc = b2d[o];
            for i in 0..mid {
                acc += w2d[o * mid + i] * a1d[i];
            }
            yd[o] = acc;
        }
    }
    Ok((z1, a1, y))
}

struct ConvStages {
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    a2: Tensor,
    output: Tensor,
}

/// Expand (1x1) -> rectifier -> depthwise kxk -> rectifier -> project (1x1).
fn conv_stages(
    spec: &CandidateOpSpec,
    weights: &CandidateWeights,
    x: &Tensor,
) -> Result<ConvStages> {
    let (kernel, expansion) = match *spec {
        CandidateOpSpec::Conv2d {
            kernel, expansion, ..
        } => (kernel, expansion),
        _ => unreachable!("conv_stages called with non-conv spec"),
    };
    let (h, w, c) = conv_dims(x.shape())?;
    let mid = c * expansion;
    let (we, be, wd, bd, wp, bp) = match weights {
        CandidateWeights::Conv {
            w_expand,
            b_expand,
            w_depth,
            b_depth,
            w_project,
            b_project,
        } => (w_expand, b_expand, w_depth, b_depth, w_project, b_project),
        _ => unreachable!(),
    };
    if we.shape() != [mid, c] || wd.shape() != [mid, kernel, kernel] || wp.shape() != [c, mid] {
        return Err(Error::ShapeMismatch {
            context: "conv candidate weights vs input",
            expected: vec![mid, c],
            got: we.shape().to_vec(),
        });
    }
    let pad = kernel / 2;
    let xd = x.data();
    let wed = we.data();
    let bed = be.data();

    // Stage 1: pointwise expansion.
    let mut z1 = Tensor::zeros(&[h, w, mid]);
    {
        let z1d = z1.data_mut();
        for row in 0..h {
            for col in 0..w {
                let xoff = (row * w + col) * c;
                let zoff = (row * w + col) * mid;
                for j in 0..mid {
                    let mut acc = bed[j];
                    for ch in 0..c {
                        acc += wed[j * c + ch] * xd[xoff + ch];
                    }
                    z1d[zoff + j] = acc;
                }
            }
        }
    }
    let mut a1 = z1.clone();
    for v in a1.data_mut() {
        *v = relu(*v);
    }

    // Stage 2: depthwise convolution, stride 1, zero padding.
    let wdd = wd.data();
    let bdd = bd.data();
    let a1d = a1.data();
    let mut z2 = Tensor::zeros(&[h, w, mid]);
    {
        let z2d = z2.data_mut();
        for row in 0..h {
            for col in 0..w {
                let zoff = (row * w + col) * mid;
                for j in 0..mid {
                    let mut acc = bdd[j];
                    for u in 0..kernel {
                        let rr = row + u;
                        if rr < pad || rr - pad >= h {
                            continue;
                        }
                        for v in 0..kernel {
                            let cc = col + v;
                            if cc < pad || cc - pad >= w {
                                continue;
                            }
                            acc += wdd[(j * kernel + u) * kernel + v]
                                * a1d[((rr - pad) * w + (cc - pad)) * mid + j];
                        }
                    }
                    z2d[zoff + j] = acc;
                }
            }
        }
    }
    let mut a2 = z2.clone();
    for v in a2.data_mut() {
        *v = relu(*v);
    }

    // Stage 3: pointwise projection, linear.
    let wpd = wp.data();
    let bpd = bp.data();
    let a2d = a2.data();
    let mut output = Tensor::zeros(&[h, w, c]);
    {
        let od = output.data_mut();
        for row in 0..h {
            for col in 0..w {
                let aoff = (row * w + col) * mid;
                let ooff = (row * w + col) * c;
                for ch in 0..c {
                    let mut acc = bpd[ch];
                    for j in 0..mid {
                        acc += wpd[ch * mid + j] * a2d[aoff + j];
                    }
                    od[ooff + ch] = acc;
                }
            }
        }
    }
    Ok(ConvStages {
        z1,
        a1,
        z2,
        a2,
        output,
    })
}

fn conv_backward(
    spec: &CandidateOpSpec,
    weights: &CandidateWeights,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, CandidateGrads)> {
    let (kernel, _) = match *spec {
        CandidateOpSpec::Conv2d {
            kernel, expansion, ..
        } => (kernel, expansion),
        _ => unreachable!(),
    };
    let (h, w, c) = conv_dims(x.shape())?;
    let stages = conv_stages(spec, weights, x)?;
    let (we, wd, wp) = match weights {
        CandidateWeights::Conv {
            w_expand,
            w_depth,
            w_project,
            ..
        } => (w_expand, w_depth, w_project),
        _ => unreachable!(),
    };
    let mid = stages.z1.shape()[2];
    let pad = kernel / 2;
    let g = upstream.data();

    // Stage 3 backward.
    let mut gwp = Tensor::zeros(wp.shape());
    let mut gbp = Tensor::zeros(&[c]);
    let mut da2 = vec![0.0; h * w * mid];
    {
        let wpd = wp.data();
        let a2d = stages.a2.data();
        let gwpd = gwp.data_mut();
        let gbpd = gbp.data_mut();
        for row in 0..h {
            for col in 0..w {
                let aoff = (row * w + col) * mid;
                let ooff = (row * w + col) * c;
                for ch in 0..c {
                    let go = g[ooff + ch];
                    if go == 0.0 {
                        continue;
                    }
                    gbpd[ch] += go;
                    for j in 0..mid {
                        gwpd[ch * mid + j] += go * a2d[aoff + j];
                        da2[aoff + j] += go * wpd[ch * mid + j];
                    }
                }
            }
        }
    }

    // Stage 2 backward through the rectifier and the depthwise kernel.
    let z2d = stages.z2.data();
    let mut dz2 = da2;
    for (idx, v) in dz2.iter_mut().enumerate() {
        if z2d[idx] <= 0.0 {
            *v = 0.0;
        }
    }
    let mut gwd = Tensor::zeros(wd.shape());
    let mut gbd = Tensor::zeros(&[mid]);
    let mut da1 = vec![0.0; h * w * mid];
    {
        let wdd = wd.data();
        let a1d = stages.a1.data();
        let gwdd = gwd.data_mut();
        let gbdd = gbd.data_mut();
        for row in 0..h {
            for col in 0..w {
                let zoff = (row * w + col) * mid;
                for j in 0..mid {
                    let dz = dz2[zoff + j];
                    if dz == 0.0 {
                        continue;
                    }
                    gbdd[j] += dz;
                    for u in 0..kernel {
                        let rr = row + u;
                        if rr < pad || rr - pad >= h {
                            continue;
                        }
                        for v in 0..kernel {
                            let cc = col + v;
                            if cc < pad || cc - pad >= w {
                                continue;
                            }
                            let aidx = ((rr - pad) * w + (cc - pad)) * mid + j;
                            gwdd[(j * kernel + u) * kernel + v] += dz * a1d[aidx];
                            da1[aidx] += dz * wdd[(j * kernel + u) * kernel + v];
                        }
                    }
                }
            }
        }
    }

    // Stage 1 backward.
    let z1d = stages.z1.data();
    let mut dz1 = da1;
    for (idx, v) in dz1.iter_mut().enumerate() {
        if z1d[idx] <= 0.0 {
            *v = 0.0;
        }
    }
    let mut gwe = Tensor::zeros(we.shape());
    let mut gbe = Tensor::zeros(&[mid]);
    let mut dx = Tensor::zeros(x.shape());
    {
        let wed = we.data();
        let xd = x.data();
        let gwed = gwe.data_mut();
        let gbed = gbe.data_mut();
        let dxd = dx.data_mut();
        for row in 0..h {
            for col in 0..w {
                let xoff = (row * w + col) * c;
                let zoff = (row * w + col) * mid;
                for j in 0..mid {
                    let dz = dz1[zoff + j];
                    if dz == 0.0 {
                        continue;
                    }
                    gbed[j] += dz;
                    for ch in 0..c {
                        gwed[j * c + ch] += dz * xd[xoff + ch];
                        dxd[xoff + ch] += dz * wed[j * c + ch];
                    }
                }
            }
        }
    }

    Ok((
        dx,
        CandidateGrads::Conv {
            w_expand: gwe,
            b_expand: gbe,
            w_depth: gwd,
            b_depth: gbd,
            w_project: gwp,
            b_project: gbp,
        },
    ))
}

#[cfg(test)]
mod tests;
