//! Analytic completion-latency evaluation for chain and mesh deployments,
//! the probability-weighted expected latency with its architecture
//! gradient, and the quadratic constraint penalty.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernel::CandidateOpSpec;
use crate::supernet::{softmax_probs, ProbVector};
use crate::topology::{comm_latency, output_bits, LayerAssignment, Topology, TopologyKind};

/// Reference execution rate behind the synthetic latency tables:
/// multiply-accumulates per millisecond on a device with speed_factor 1.
pub const REFERENCE_MACS_PER_MS: f64 = 2.0e4;

/// Per-(layer, device, candidate) execution latencies and per-boundary
/// communication latencies, all in milliseconds. Layers, devices and
/// candidates are 0-based here and 1-based in table files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    exec: BTreeMap<(usize, usize, usize), f64>,
    comm: BTreeMap<(usize, usize), f64>,
}

impl LatencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_exec(&mut self, layer: usize, device: usize, candidate: usize, ms: f64) {
        self.exec.insert((layer, device, candidate), ms);
    }

    pub fn insert_comm(&mut self, layer: usize, device: usize, ms: f64) {
        self.comm.insert((layer, device), ms);
    }

    /// U_n^m(v_i): execution latency of layer `layer` on `device` under
    /// candidate `candidate`.
    pub fn exec(&self, layer: usize, device: usize, candidate: usize) -> Result<f64> {
        self.exec
            .get(&(layer, device, candidate))
            .copied()
            .ok_or(Error::MissingExecEntry {
                layer: layer + 1,
                device: device + 1,
                candidate: candidate + 1,
            })
    }

    /// The per-candidate latency row of one layer on one device.
    pub fn exec_row(&self, layer: usize, device: usize, candidates: usize) -> Result<Vec<f64>> {
        (0..candidates).map(|i| self.exec(layer, device, i)).collect()
    }

    /// Communication latency charged after `device` finishes `layer`.
    /// The final device never transmits, so its cost is zero whether or
    /// not the table carries an entry for it.
    pub fn comm(&self, layer: usize, device: usize, last_device: usize) -> Result<f64> {
        if device == last_device {
            return Ok(0.0);
        }
        self.comm
            .get(&(layer, device))
            .copied()
            .ok_or(Error::MissingCommEntry {
                layer: layer + 1,
                device: device + 1,
            })
    }

    /// Parses the tab-separated table format:
    /// `exec <layer> <device> <candidate> <ms>` and
    /// `comm <layer> <device> <ms>` records, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = LatencyTable::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let ctx = format!("latency table line {}", lineno + 1);
            let parse_id = |s: &str| -> Result<usize> {
                let v: usize = s
                    .parse()
                    .map_err(|_| Error::parse(ctx.clone(), format!("bad id `{s}`")))?;
                if v == 0 {
                    return Err(Error::parse(ctx.clone(), "ids are 1-based"));
                }
                Ok(v - 1)
            };
            let parse_ms = |s: &str| -> Result<f64> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::parse(ctx.clone(), format!("bad latency `{s}`")))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::parse(ctx.clone(), "latency must be finite and >= 0"));
                }
                Ok(v)
            };
            match fields.as_slice() {
                ["exec", layer, device, candidate, ms] => {
                    table.insert_exec(
                        parse_id(layer)?,
                        parse_id(device)?,
                        parse_id(candidate)?,
                        parse_ms(ms)?,
                    );
                }
                ["comm", layer, device, ms] => {
                    table.insert_comm(parse_id(layer)?, parse_id(device)?, parse_ms(ms)?);
                }
                _ => {
                    return Err(Error::parse(
                        ctx,
                        "expected `exec layer device candidate ms` or `comm layer device ms`",
                    ))
                }
            }
        }
        Ok(table)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# exec\tlayer\tdevice\tcandidate\tms | comm\tlayer\tdevice\tms\n");
        for (&(n, m, i), ms) in &self.exec {
            out.push_str(&format!("exec\t{}\t{}\t{}\t{}\n", n + 1, m + 1, i + 1, ms));
        }
        for (&(n, m), ms) in &self.comm {
            out.push_str(&format!("comm\t{}\t{}\t{}\n", n + 1, m + 1, ms));
        }
        out
    }
}

/// A completion latency together with its per-device breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionLatency {
    pub value_ms: f64,
    /// (device, block compute ms) in device order.
    pub compute_ms: Vec<(usize, f64)>,
    /// (device, outbound comm ms) in device order.
    pub comm_ms: Vec<(usize, f64)>,
}

fn block_compute(
    assignment: &LayerAssignment,
    table: &LatencyTable,
    arch: &[usize],
    device: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for &layer in &assignment.blocks[device] {
        total += table.exec(layer, device, arch[layer])?;
    }
    Ok(total)
}

fn boundary_comm(
    assignment: &LayerAssignment,
    table: &LatencyTable,
    topo: &Topology,
    device: usize,
) -> Result<f64> {
    let d_m = assignment.blocks[device]
        .last()
        .copied()
        .ok_or_else(|| Error::Config(format!("device {} holds no layers", device + 1)))?;
    table.comm(d_m, device, topo.last_device())
}

/// Completion latency of a chain deployment: the sum over devices of
/// block compute plus boundary communication.
pub fn chain_latency(
    assignment: &LayerAssignment,
    topo: &Topology,
    table: &LatencyTable,
    arch: &[usize],
) -> Result<CompletionLatency> {
    if topo.kind != TopologyKind::Chain {
        return Err(Error::Config("chain_latency needs a chain topology".to_string()));
    }
    let mut compute = Vec::new();
    let mut comm = Vec::new();
    let mut total = 0.0;
    for device in 0..topo.num_devices() {
        let tau = block_compute(assignment, table, arch, device)?;
        let eps = boundary_comm(assignment, table, topo, device)?;
        total += tau + eps;
        compute.push((device, tau));
        comm.push((device, eps));
    }
    Ok(CompletionLatency {
        value_ms: total,
        compute_ms: compute,
        comm_ms: comm,
    })
}

/// Completion latency of a mesh deployment: serial chain-device terms plus
/// the slowest branch, where every branch term carries the root's compute
/// and broadcast cost.
pub fn mesh_latency(
    assignment: &LayerAssignment,
    topo: &Topology,
    table: &LatencyTable,
    arch: &[usize],
) -> Result<CompletionLatency> {
    if topo.kind != TopologyKind::Mesh {
        return Err(Error::Config("mesh_latency needs a mesh topology".to_string()));
    }
    let root = topo.root.expect("validated mesh has a root");
    let mut compute = Vec::new();
    let mut comm = Vec::new();
    let mut total = 0.0;
    for &device in &topo.chain_set {
        let tau = block_compute(assignment, table, arch, device)?;
        let eps = boundary_comm(assignment, table, topo, device)?;
        total += tau + eps;
        compute.push((device, tau));
        comm.push((device, eps));
    }
    let root_tau = block_compute(assignment, table, arch, root)?;
    let root_eps = boundary_comm(assignment, table, topo, root)?;
    compute.push((root, root_tau));
    comm.push((root, root_eps));
    let mut worst = f64::NEG_INFINITY;
    for &branch in &topo.branches() {
        let tau = block_compute(assignment, table, arch, branch)?;
        let eps = boundary_comm(assignment, table, topo, branch)?;
        compute.push((branch, tau));
        comm.push((branch, eps));
        worst = worst.max(root_tau + root_eps + tau + eps);
    }
    total += worst;
    compute.sort_by_key(|&(d, _)| d);
    comm.sort_by_key(|&(d, _)| d);
    Ok(CompletionLatency {
        value_ms: total,
        compute_ms: compute,
        comm_ms: comm,
    })
}

/// Dispatches on the topology kind.
pub fn completion_latency(
    assignment: &LayerAssignment,
    topo: &Topology,
    table: &LatencyTable,
    arch: &[usize],
) -> Result<CompletionLatency> {
    match topo.kind {
        TopologyKind::Chain => chain_latency(assignment, topo, table, arch),
        TopologyKind::Mesh => mesh_latency(assignment, topo, table, arch),
    }
}

/// Probability-weighted mean of a layer's candidate latencies.
pub fn expected_op_latency(p: &ProbVector, u: &[f64]) -> Result<f64> {
    if p.len() != u.len() {
        return Err(Error::Config(format!(
            "expected_op_latency arity mismatch: {} probabilities vs {} latencies",
            p.len(),
            u.len()
        )));
    }
    Ok(p.as_slice().iter().zip(u).map(|(pi, ui)| pi * ui).sum())
}

/// d expected_op_latency / d alpha, chained through the softmax:
/// component `i` is `sum_j U_j p_j (delta_ij - p_i)`.
pub fn latency_grad_alpha(p: &ProbVector, u: &[f64]) -> Result<Vec<f64>> {
    let mean = expected_op_latency(p, u)?;
    Ok(p.as_slice()
        .iter()
        .zip(u)
        .map(|(pi, ui)| pi * (ui - mean))
        .collect())
}

/// Quadratic latency-constraint penalty: value and derivative with respect
/// to the latency. Symmetric about the constraint, so undershoot is
/// penalized too.
pub fn latency_penalty(t_ms: f64, t_const_ms: f64, lambda2: f64) -> (f64, f64) {
    let diff = t_ms - t_const_ms;
    (lambda2 * diff * diff, 2.0 * lambda2 * diff)
}

/// Completion latency with every execution latency replaced by its
/// probability-weighted expectation; communication terms are unchanged
/// because candidates of a layer share the output shape.
pub fn expected_total_latency(
    alphas: &[Vec<f64>],
    assignment: &LayerAssignment,
    topo: &Topology,
    table: &LatencyTable,
) -> Result<f64> {
    Ok(expected_total_with_grad(alphas, assignment, topo, table)?.0)
}

/// Expected total latency and its gradient with respect to every
/// architecture parameter, `[layer][candidate]`.
///
/// The mesh max is handled by the subgradient of the slowest branch, ties
/// broken by the lowest device id; root and chain layers always
/// contribute.
pub fn expected_total_with_grad(
    alphas: &[Vec<f64>],
    assignment: &LayerAssignment,
    topo: &Topology,
    table: &LatencyTable,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = alphas.len();
    if assignment.n_layers() != n {
        return Err(Error::Config(format!(
            "assignment covers {} layers but {} alpha rows given",
            assignment.n_layers(),
            n
        )));
    }
    let probs: Vec<ProbVector> = alphas.iter().map(|a| softmax_probs(a)).collect();
    let expected_block = |device: usize| -> Result<f64> {
        let mut total = 0.0;
        for &layer in &assignment.blocks[device] {
            let u = table.exec_row(layer, device, alphas[layer].len())?;
            total += expected_op_latency(&probs[layer], &u)?;
        }
        Ok(total)
    };

    let mut grad: Vec<Vec<f64>> = alphas.iter().map(|a| vec![0.0; a.len()]).collect();
    let add_block_grad = |device: usize, grad: &mut Vec<Vec<f64>>| -> Result<()> {
        for &layer in &assignment.blocks[device] {
            let u = table.exec_row(layer, device, alphas[layer].len())?;
            let g = latency_grad_alpha(&probs[layer], &u)?;
            for (gi, v) in grad[layer].iter_mut().zip(g) {
                *gi += v;
            }
        }
        Ok(())
    };

    // Accumulation mirrors chain_latency/mesh_latency term for term, so
    // one-hot probabilities reproduce the exact latency bit for bit.
    match topo.kind {
        TopologyKind::Chain => {
            let mut total = 0.0;
            for device in 0..topo.num_devices() {
                let tau = expected_block(device)?;
                let eps = boundary_comm(assignment, table, topo, device)?;
                total += tau + eps;
                add_block_grad(device, &mut grad)?;
            }
            Ok((total, grad))
        }
        TopologyKind::Mesh => {
            let root = topo.root.expect("validated mesh has a root");
            let mut total = 0.0;
            for &device in &topo.chain_set {
                let tau = expected_block(device)?;
                let eps = boundary_comm(assignment, table, topo, device)?;
                total += tau + eps;
                add_block_grad(device, &mut grad)?;
            }
            let root_term =
                expected_block(root)? + boundary_comm(assignment, table, topo, root)?;
            add_block_grad(root, &mut grad)?;
            let mut worst = f64::NEG_INFINITY;
            let mut argmax = None;
            for &branch in &topo.branches() {
                let term = root_term
                    + expected_block(branch)?
                    + boundary_comm(assignment, table, topo, branch)?;
                if term > worst {
                    worst = term;
                    argmax = Some(branch);
                }
            }
            let argmax = argmax
                .ok_or_else(|| Error::Topology("mesh has no branch devices".to_string()))?;
            add_block_grad(argmax, &mut grad)?;
            total += worst;
            Ok((total, grad))
        }
    }
}

/// Synthesizes a full latency table from a topology and the trunk's shape
/// contract. Execution cost is the candidate's multiply-accumulate count
/// at the reference rate, divided by the device's speed_factor; every
/// (layer, device, candidate) cell is emitted so any assignment can be
/// priced. Communication cost is the shared activation payload over the
/// device's outbound link; the root's broadcast is priced at its slowest
/// outbound link.
pub fn synthesize_table(
    topo: &Topology,
    shape: &[usize],
    n_layers: usize,
    candidates: &[CandidateOpSpec],
) -> Result<LatencyTable> {
    let mut table = LatencyTable::new();
    let bits = output_bits(shape);
    for device in 0..topo.num_devices() {
        let speed = topo.devices[device].speed_factor;
        for layer in 0..n_layers {
            for (ci, spec) in candidates.iter().enumerate() {
                let ref_ms = spec.mac_count(shape) as f64 / REFERENCE_MACS_PER_MS;
                table.insert_exec(layer, device, ci, ref_ms / speed);
            }
        }
        let downstream = topo.downstream(device);
        if downstream.is_empty() {
            continue;
        }
        let eps = downstream
            .iter()
            .map(|&rx| {
                let link = topo.link_between(device, rx).ok_or_else(|| {
                    Error::Topology(format!("no link {} -> {}", device + 1, rx + 1))
                })?;
                Ok(comm_latency(bits, link))
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0f64, f64::max);
        for layer in 0..n_layers {
            table.insert_comm(layer, device, eps);
        }
    }
    Ok(table)
}
