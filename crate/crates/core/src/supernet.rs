//! The searchable trunk: a fixed-length sequence of mixed operations with
//! per-candidate architecture parameters, gate sampling, sampled and
//! relaxed forward passes, and the architecture gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::loss::{loss_ce_grad, LossMode};
use crate::kernel::{
    candidate_backward, candidate_forward, Batch, CandidateGrads, CandidateOpSpec,
    CandidateWeights, WeightSet,
};
use crate::tensor::Tensor;

/// A normalized probability vector over a layer's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "probability vector must be nonempty and nonnegative".to_string(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(p))
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector(vec![1.0 / len as f64; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut p = vec![0.0; len];
        p[index] = 1.0;
        ProbVector(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax with max-subtraction for numerical stability.
pub fn softmax_probs(alpha: &[f64]) -> ProbVector {
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = alpha.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    ProbVector(p)
}

/// A per-layer gate draw: one active candidate, or two unmasked candidates
/// in two-path mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateSample {
    OneHot { index: usize, len: usize },
    TwoPath { first: usize, second: usize, len: usize },
}

impl GateSample {
    pub fn len(&self) -> usize {
        match *self {
            GateSample::OneHot { len, .. } | GateSample::TwoPath { len, .. } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active_indices(&self) -> Vec<usize> {
        match *self {
            GateSample::OneHot { index, .. } => vec![index],
            GateSample::TwoPath { first, second, .. } => vec![first, second],
        }
    }

    /// The 0/1 mask vector g.
    pub fn mask(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.len()];
        for i in self.active_indices() {
            g[i] = 1.0;
        }
        g
    }
}

/// Draws gates from `p`. In one-hot mode a single candidate is selected
/// with probability `p_i`. In two-path mode two distinct candidates are
/// drawn without replacement and every other path is masked.
pub fn sample_gates(p: &ProbVector, rng: &mut impl Rng, two_path: bool) -> GateSample {
    let len = p.len();
    let first = draw_index(p.as_slice(), rng, None);
    if !two_path || len < 2 {
        return GateSample::OneHot { index: first, len };
    }
    let second = draw_index(p.as_slice(), rng, Some(first));
    GateSample::TwoPath { first, second, len }
}

fn draw_index(p: &[f64], rng: &mut impl Rng, exclude: Option<usize>) -> usize {
    let total: f64 = p
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, v)| v)
        .sum();
    if total <= 0.0 {
        // Degenerate leftover mass; pick the lowest admissible index.
        return (0..p.len()).find(|i| Some(*i) != exclude).unwrap_or(0);
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in p.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        acc += v;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Architecture gradient of the softmax parameterization:
/// component `i` is `sum_j dl_dg[j] * p_j * (delta_ij - p_i)`.
pub fn arch_grad(dl_dg: &[f64], p: &ProbVector) -> Vec<f64> {
    debug_assert_eq!(dl_dg.len(), p.len());
    let mean: f64 = dl_dg
        .iter()
        .zip(p.as_slice())
        .map(|(g, pi)| g * pi)
        .sum();
    dl_dg
        .iter()
        .zip(p.as_slice())
        .map(|(g, pi)| pi * (g - mean))
        .collect()
}

/// Mixed-operation output: the coefficient-weighted sum of candidate
/// outputs. Zero coefficients are skipped, so a one-hot coefficient vector
/// reproduces the corresponding candidate output exactly.
pub fn mix_outputs(outputs: &[Tensor], coef: &[f64]) -> Tensor {
    debug_assert_eq!(outputs.len(), coef.len());
    let mut acc = Tensor::zeros(outputs[0].shape());
    for (out, &c) in outputs.iter().zip(coef) {
        if c == 0.0 {
            continue;
        }
        if c == 1.0 && acc.data().iter().all(|&v| v == 0.0) {
            acc = out.clone();
        } else {
            acc.add_scaled(out, c);
        }
    }
    acc
}

/// One layer of the trunk: the candidate set and its architecture
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedOp {
    pub candidates: Vec<CandidateOpSpec>,
    pub alpha: Vec<f64>,
}

impl MixedOp {
    pub fn probs(&self) -> ProbVector {
        softmax_probs(&self.alpha)
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }
}

/// The classifier head: a dense map from the flattened trunk output to
/// logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

impl Head {
    fn forward(&self, x: &Tensor) -> Tensor {
        let classes = self.b.numel();
        let d = x.numel();
        let wd = self.w.data();
        let bd = self.b.data();
        let xd = x.data();
        let mut logits = Tensor::zeros(&[classes]);
        {
            let ld = logits.data_mut();
            for c in 0..classes {
                let mut acc = bd[c];
                for j in 0..d {
                    acc += wd[c * d + j] * xd[j];
                }
                ld[c] = acc;
            }
        }
        logits
    }

    /// Accumulates head gradients and returns dL/d(input), shaped like
    /// `input_shape`.
    fn backward(
        &self,
        x: &Tensor,
        dlogits: &Tensor,
        gw: &mut Tensor,
        gb: &mut Tensor,
    ) -> Tensor {
        let classes = self.b.numel();
        let d = x.numel();
        let wd = self.w.data();
        let xd = x.data();
        let gld = dlogits.data();
        let mut dx = Tensor::zeros(x.shape());
        {
            let gwd = gw.data_mut();
            let gbd = gb.data_mut();
            let dxd = dx.data_mut();
            for c in 0..classes {
                let g = gld[c];
                if g == 0.0 {
                    continue;
                }
                gbd[c] += g;
                for j in 0..d {
                    gwd[c * d + j] += g * xd[j];
                    dxd[j] += g * wd[c * d + j];
                }
            }
        }
        dx
    }
}

/// Forward evaluation mode: either a sampled gate per layer or the
/// probability-relaxed mixture.
#[derive(Debug, Clone)]
pub enum ForwardMode<'a> {
    Sampled(&'a [GateSample]),
    Relaxed(&'a [ProbVector]),
}

/// Where the gate gradient is evaluated during an architecture step.
#[derive(Debug, Clone)]
pub enum ArchEvalPoint<'a> {
    /// Mixed outputs weighted by the full probability vector; the exact
    /// gradient of the relaxed loss.
    Relaxed,
    /// Forward follows the sampled one-hot path; candidate outputs are
    /// still evaluated at each layer for the inner products.
    Sampled(&'a [GateSample]),
    /// Two-path mode: only the two unmasked candidates are evaluated,
    /// mixed with pair-renormalized probabilities.
    PairRelaxed(&'a [GateSample]),
}

/// Gradients for every trunk candidate plus the head. Candidates that did
/// not participate in a pass keep all-zero tensors.
#[derive(Debug, Clone)]
pub struct WeightGrads {
    pub layers: Vec<Vec<CandidateGrads>>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// The searchable network: `N` mixed operations over a shape-preserving
/// trunk, per-candidate weights, and a classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNet {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<MixedOp>,
    pub weights: WeightSet,
    pub head: Head,
}

impl SuperNet {
    pub fn new(
        input_shape: &[usize],
        num_classes: usize,
        candidates_per_layer: &[Vec<CandidateOpSpec>],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if candidates_per_layer.is_empty() {
            return Err(Error::Config("supernet needs at least one layer".to_string()));
        }
        if num_classes == 0 {
            return Err(Error::Config("supernet needs at least one class".to_string()));
        }
        let mut layers = Vec::new();
        let mut weight_layers = Vec::new();
        for cands in candidates_per_layer {
            if cands.is_empty() {
                return Err(Error::Config(
                    "every layer needs at least one candidate".to_string(),
                ));
            }
            let mut ws = Vec::new();
            for spec in cands {
                ws.push(spec.init_weights(input_shape, rng)?);
            }
            layers.push(MixedOp {
                candidates: cands.clone(),
                alpha: vec![0.0; cands.len()],
            });
            weight_layers.push(ws);
        }
        let d: usize = input_shape.iter().product();
        let bound = (1.0 / d as f64).sqrt();
        let mut w = Tensor::zeros(&[num_classes, d]);
        for v in w.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Ok(SuperNet {
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            weights: WeightSet {
                layers: weight_layers,
            },
            head: Head {
                w,
                b: Tensor::zeros(&[num_classes]),
            },
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Current selection probabilities, one vector per layer.
    pub fn probs(&self) -> Vec<ProbVector> {
        self.layers.iter().map(|l| l.probs()).collect()
    }

    /// Per-layer argmax of the selection probabilities; ties go to the
    /// lowest index.
    pub fn derive_compact(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.probs().argmax()).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "supernet input",
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn layer_coefs(&self, mode: &ForwardMode) -> Result<Vec<Vec<f64>>> {
        let n = self.num_layers();
        match mode {
            ForwardMode::Sampled(gates) => {
                if gates.len() != n {
                    return Err(Error::Config(format!(
                        "expected {n} gate samples, got {}",
                        gates.len()
                    )));
                }
                Ok(gates
                    .iter()
                    .zip(self.layers.iter())
                    .map(|(g, layer)| match *g {
                        GateSample::OneHot { index, len } => {
                            let mut c = vec![0.0; len];
                            c[index] = 1.0;
                            c
                        }
                        // A two-path gate used as a plain forward mask mixes
                        // the pair with pair-renormalized probabilities.
                        GateSample::TwoPath { first, second, len } => {
                            let p = layer.probs();
                            let (pf, ps) = (p.as_slice()[first], p.as_slice()[second]);
                            let total = pf + ps;
                            let mut c = vec![0.0; len];
                            if total > 0.0 {
                                c[first] = pf / total;
                                c[second] = ps / total;
                            } else {
                                c[first] = 0.5;
                                c[second] = 0.5;
                            }
                            c
                        }
                    })
                    .collect())
            }
            ForwardMode::Relaxed(ps) => {
                if ps.len() != n {
                    return Err(Error::Config(format!(
                        "expected {n} probability vectors, got {}",
                        ps.len()
                    )));
                }
                Ok(ps.iter().map(|p| p.as_slice().to_vec()).collect())
            }
        }
    }

    /// Forward pass to logits. Sampled mode evaluates only the active
    /// candidates; relaxed mode mixes every candidate by probability.
    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        self.check_input(x)?;
        let coefs = self.layer_coefs(mode)?;
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let coef = &coefs[li];
            if coef.len() != layer.num_candidates() {
                return Err(Error::Config(format!(
                    "layer {} coefficient arity mismatch",
                    li + 1
                )));
            }
            let mut outputs: Vec<Tensor> = Vec::with_capacity(coef.len());
            for (ci, c) in coef.iter().enumerate() {
                if *c == 0.0 {
                    outputs.push(Tensor::zeros(cur.shape()));
                    continue;
                }
                outputs.push(candidate_forward(
                    &layer.candidates[ci],
                    &self.weights.layers[li][ci],
                    &cur,
                )?);
            }
            cur = mix_outputs(&outputs, coef);
        }
        Ok(self.head.forward(&cur))
    }

    /// Mean loss of a batch under the given forward mode.
    pub fn loss_batch(&self, batch: &Batch, mode: &ForwardMode, loss: LossMode) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in batch.inputs().iter().zip(batch.labels()) {
            let logits = self.forward(x, mode)?;
            total += loss_ce_grad(&logits, y, loss)?.0;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn zero_grads(&self) -> WeightGrads {
        WeightGrads {
            layers: self
                .weights
                .layers
                .iter()
                .map(|cands| cands.iter().map(|w| w.zeros_like()).collect())
                .collect(),
            head_w: Tensor::zeros(self.head.w.shape()),
            head_b: Tensor::zeros(self.head.b.shape()),
        }
    }

    /// Backpropagates the mean batch loss along sampled one-hot paths.
    /// Returns the loss and gradients for the active candidates and head;
    /// inactive candidates keep zero gradients.
    pub fn backward_weights_sampled(
        &self,
        batch: &Batch,
        gates: &[GateSample],
        loss: LossMode,
    ) -> Result<(f64, WeightGrads)> {
        if gates.len() != self.num_layers() {
            return Err(Error::Config(format!(
                "expected {} gate samples, got {}",
                self.num_layers(),
                gates.len()
            )));
        }
        let active: Vec<usize> = gates
            .iter()
            .map(|g| match *g {
                GateSample::OneHot { index, .. } => Ok(index),
                GateSample::TwoPath { .. } => Err(Error::Config(
                    "weight steps train a single sampled path".to_string(),
                )),
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for (x, &y) in batch.inputs().iter().zip(batch.labels()) {
            self.check_input(x)?;
            // Forward, keeping each layer's input.
            let mut layer_inputs: Vec<Tensor> = Vec::with_capacity(self.num_layers());
            let mut cur = (*x).clone();
            for (li, layer) in self.layers.iter().enumerate() {
                let ci = active[li];
                let out = candidate_forward(
                    &layer.candidates[ci],
                    &self.weights.layers[li][ci],
                    &cur,
                )?;
                layer_inputs.push(cur);
                cur = out;
            }
            let logits = self.head.forward(&cur);
            let (l, mut dlogits) = loss_ce_grad(&logits, y, loss)?;
            total += l * scale;
            for v in dlogits.data_mut() {
                *v *= scale;
            }
            let mut dout = self
                .head
                .backward(&cur, &dlogits, &mut grads.head_w, &mut grads.head_b);
            for li in (0..self.num_layers()).rev() {
                let ci = active[li];
                let (dx, gw) = candidate_backward(
                    &self.layers[li].candidates[ci],
                    &self.weights.layers[li][ci],
                    &layer_inputs[li],
                    &dout,
                )?;
                grads.layers[li][ci].add_scaled(&gw, 1.0);
                dout = dx;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: "batch loss in weight step".to_string(),
            });
        }
        Ok((total, grads))
    }

    /// Computes the mean batch loss and the per-layer gate gradients
    /// dL/dg_j at the requested evaluation point.
    ///
    /// At the relaxed point this is the exact gradient of the relaxed loss
    /// with respect to the mixing coefficients.
    pub fn gate_grads(
        &self,
        batch: &Batch,
        point: &ArchEvalPoint,
        loss: LossMode,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let n = self.num_layers();
        let probs = self.probs();
        // Per layer: mixing coefficients and which candidates to evaluate.
        let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut evaluated: Vec<Vec<usize>> = Vec::with_capacity(n);
        match point {
            ArchEvalPoint::Relaxed => {
                for p in &probs {
                    coefs.push(p.as_slice().to_vec());
                    evaluated.push((0..p.len()).collect());
                }
            }
            ArchEvalPoint::Sampled(gates) => {
                if gates.len() != n {
                    return Err(Error::Config("gate count mismatch".to_string()));
                }
                for (g, p) in gates.iter().zip(&probs) {
                    let mut c = vec![0.0; p.len()];
                    match *g {
                        GateSample::OneHot { index, .. } => c[index] = 1.0,
                        GateSample::TwoPath { .. } => {
                            return Err(Error::Config(
                                "sampled evaluation point expects one-hot gates".to_string(),
                            ))
                        }
                    }
                    coefs.push(c);
                    evaluated.push((0..p.len()).collect());
                }
            }
            ArchEvalPoint::PairRelaxed(gates) => {
                if gates.len() != n {
                    return Err(Error::Config("gate count mismatch".to_string()));
                }
                for (g, p) in gates.iter().zip(&probs) {
                    let mut c = vec![0.0; p.len()];
                    match *g {
                        GateSample::OneHot { index, .. } => c[index] = 1.0,
                        GateSample::TwoPath { first, second, .. } => {
                            let pf = p.as_slice()[first];
                            let ps = p.as_slice()[second];
                            let total = pf + ps;
                            if total > 0.0 {
                                c[first] = pf / total;
                                c[second] = ps / total;
                            } else {
                                c[first] = 0.5;
                                c[second] = 0.5;
                            }
                        }
                    }
                    evaluated.push(
                        c.iter()
                            .enumerate()
                            .filter(|(_, v)| **v != 0.0)
                            .map(|(i, _)| i)
                            .collect(),
                    );
                    coefs.push(c);
                }
            }
        }

        let scale = 1.0 / batch.len() as f64;
        let mut dl_dg: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut total = 0.0;
        for (x, &y) in batch.inputs().iter().zip(batch.labels()) {
            self.check_input(x)?;
            let mut layer_inputs: Vec<Tensor> = Vec::with_capacity(n);
            let mut layer_outputs: Vec<Vec<Option<Tensor>>> = Vec::with_capacity(n);
            let mut cur = (*x).clone();
            for (li, layer) in self.layers.iter().enumerate() {
                let mut outs: Vec<Option<Tensor>> = vec![None; layer.num_candidates()];
                for &ci in &evaluated[li] {
                    outs[ci] = Some(candidate_forward(
                        &layer.candidates[ci],
                        &self.weights.layers[li][ci],
                        &cur,
                    )?);
                }
                let dense: Vec<Tensor> = outs
                    .iter()
                    .map(|o| o.clone().unwrap_or_else(|| Tensor::zeros(cur.shape())))
                    .collect();
                let mixed = mix_outputs(&dense, &coefs[li]);
                layer_inputs.push(cur);
                layer_outputs.push(outs);
                cur = mixed;
            }
            let logits = self.head.forward(&cur);
            let (l, mut dlogits) = loss_ce_grad(&logits, y, loss)?;
            total += l * scale;
            for v in dlogits.data_mut() {
                *v *= scale;
            }
            // Head gradients are not needed for the architecture step.
            let mut gw = Tensor::zeros(self.head.w.shape());
            let mut gb = Tensor::zeros(self.head.b.shape());
            let mut dout = self.head.backward(&cur, &dlogits, &mut gw, &mut gb);
            for li in (0..n).rev() {
                for &ci in &evaluated[li] {
                    if let Some(out) = &layer_outputs[li][ci] {
                        dl_dg[li][ci] += dout.dot(out);
                    }
                }
                let mut dx = Tensor::zeros(layer_inputs[li].shape());
                for &ci in &evaluated[li] {
                    let c = coefs[li][ci];
                    if c == 0.0 {
                        continue;
                    }
                    let (gx, _) = candidate_backward(
                        &self.layers[li].candidates[ci],
                        &self.weights.layers[li][ci],
                        &layer_inputs[li],
                        &dout,
                    )?;
                    dx.add_scaled(&gx, c);
                }
                dout = dx;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: "batch loss in architecture step".to_string(),
            });
        }
        Ok((total, dl_dg))
    }
}

/// A fixed architecture extracted from a supernet: one candidate per
/// layer, weights cloned from the chosen paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactModel {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub specs: Vec<CandidateOpSpec>,
    pub weights: Vec<CandidateWeights>,
    pub head: Head,
}

/// Gradients of a compact model's weights.
#[derive(Debug, Clone)]
pub struct CompactGrads {
    pub layers: Vec<CandidateGrads>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl CompactModel {
    pub fn from_supernet(net: &SuperNet, indices: &[usize]) -> Result<Self> {
        if indices.len() != net.num_layers() {
            return Err(Error::Config(format!(
                "expected {} candidate indices, got {}",
                net.num_layers(),
                indices.len()
            )));
        }
        let mut specs = Vec::new();
        let mut weights = Vec::new();
        for (li, &ci) in indices.iter().enumerate() {
            let layer = &net.layers[li];
            if ci >= layer.num_candidates() {
                return Err(Error::Config(format!(
                    "candidate index {ci} out of range in layer {}",
                    li + 1
                )));
            }
            specs.push(layer.candidates[ci]);
            weights.push(net.weights.layers[li][ci].clone());
        }
        Ok(CompactModel {
            input_shape: net.input_shape.clone(),
            num_classes: net.num_classes,
            specs,
            weights,
            head: net.head.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "compact model input",
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        let mut cur = x.clone();
        for (spec, w) in self.specs.iter().zip(&self.weights) {
            cur = candidate_forward(spec, w, &cur)?;
        }
        Ok(self.head.forward(&cur))
    }

    /// Mean batch loss and gradients for retraining.
    pub fn backward(&self, batch: &Batch, loss: LossMode) -> Result<(f64, CompactGrads)> {
        let scale = 1.0 / batch.len() as f64;
        let mut grads = CompactGrads {
            layers: self.weights.iter().map(|w| w.zeros_like()).collect(),
            head_w: Tensor::zeros(self.head.w.shape()),
            head_b: Tensor::zeros(self.head.b.shape()),
        };
        let mut total = 0.0;
        for (x, &y) in batch.inputs().iter().zip(batch.labels()) {
            let mut layer_inputs = Vec::with_capacity(self.specs.len());
            let mut cur = (*x).clone();
            for (spec, w) in self.specs.iter().zip(&self.weights) {
                let out = candidate_forward(spec, w, &cur)?;
                layer_inputs.push(cur);
                cur = out;
            }
            let logits = self.head.forward(&cur);
            let (l, mut dlogits) = loss_ce_grad(&logits, y, loss)?;
            total += l * scale;
            for v in dlogits.data_mut() {
                *v *= scale;
            }
            let mut dout = self
                .head
                .backward(&cur, &dlogits, &mut grads.head_w, &mut grads.head_b);
            for li in (0..self.specs.len()).rev() {
                let (dx, gw) = candidate_backward(
                    &self.specs[li],
                    &self.weights[li],
                    &layer_inputs[li],
                    &dout,
                )?;
                grads.layers[li].add_scaled(&gw, 1.0);
                dout = dx;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: "batch loss in retraining step".to_string(),
            });
        }
        Ok((total, grads))
    }

    /// Sum of squared weight parameters, head included.
    pub fn squared_norm(&self) -> f64 {
        let trunk: f64 = self.weights.iter().map(|w| w.squared_norm()).sum();
        trunk + self.head.w.squared_norm() + self.head.b.squared_norm()
    }
}
