//! Deployment plans: per-device layer blocks with resolved execution
//! latencies, the boundary transfers between devices, and the cloud-only
//! baseline used for latency comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::CandidateOpSpec;
use crate::latency::LatencyTable;
use crate::topology::{comm_latency, output_bits, LayerAssignment, Topology, TopologyKind};

/// The layers one device executes, with the chosen candidate and its
/// resolved latency per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBlock {
    pub device: usize,
    pub name: String,
    pub layers: Vec<usize>,
    pub candidates: Vec<usize>,
    pub ops: Vec<String>,
    pub exec_ms: Vec<f64>,
}

/// One outbound transfer: the full broadcast of a device's boundary
/// output. `to` has several entries only for a mesh root.
#[derive(Debug, Clone, PartialEq)]
pub struct Boundary {
    pub from: usize,
    pub to: Vec<usize>,
    pub payload_bits: u64,
    pub comm_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentPlan {
    pub name: String,
    pub kind: TopologyKind,
    pub root: Option<usize>,
    /// Bits of the network input, as held by device 1 before any compute.
    pub input_bits: u64,
    pub n_layers: usize,
    pub blocks: Vec<DeviceBlock>,
    pub boundaries: Vec<Boundary>,
}

// --- file schema (1-based ids) ---

#[derive(Debug, Serialize, Deserialize)]
struct PlanFile {
    name: String,
    kind: TopologyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    root: Option<usize>,
    input_bits: u64,
    n_layers: usize,
    blocks: Vec<BlockFile>,
    boundaries: Vec<BoundaryFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockFile {
    device: usize,
    name: String,
    layers: Vec<usize>,
    candidates: Vec<usize>,
    ops: Vec<String>,
    exec_ms: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryFile {
    from: usize,
    to: Vec<usize>,
    payload_bits: u64,
    comm_ms: f64,
}

impl DeploymentPlan {
    /// Assembles a plan from a searched architecture: latencies are read
    /// from the table, boundary payloads from the shared shape contract.
    pub fn build(
        name: &str,
        topo: &Topology,
        assignment: &LayerAssignment,
        table: &LatencyTable,
        arch: &[usize],
        specs: &[CandidateOpSpec],
        input_shape: &[usize],
    ) -> Result<Self> {
        let n_layers = arch.len();
        if assignment.n_layers() != n_layers {
            return Err(Error::Plan(format!(
                "assignment covers {} layers, architecture has {}",
                assignment.n_layers(),
                n_layers
            )));
        }
        let bits = output_bits(input_shape);
        let mut blocks = Vec::new();
        let mut boundaries = Vec::new();
        for device in 0..topo.num_devices() {
            let layers = assignment.blocks[device].clone();
            let mut candidates = Vec::new();
            let mut ops = Vec::new();
            let mut exec_ms = Vec::new();
            for &layer in &layers {
                let ci = arch[layer];
                let spec = specs.get(ci).ok_or_else(|| {
                    Error::Plan(format!("candidate index {ci} has no spec"))
                })?;
                candidates.push(ci);
                ops.push(spec.name());
                exec_ms.push(table.exec(layer, device, ci)?);
            }
            blocks.push(DeviceBlock {
                device,
                name: topo.devices[device].name.clone(),
                layers,
                candidates,
                ops,
                exec_ms,
            });
            let to = topo.downstream(device);
            if !to.is_empty() {
                let d_m = assignment.last_layer(device).unwrap();
                boundaries.push(Boundary {
                    from: device,
                    to,
                    payload_bits: bits,
                    comm_ms: table.comm(d_m, device, topo.last_device())?,
                });
            }
        }
        let plan = DeploymentPlan {
            name: name.to_string(),
            kind: topo.kind,
            root: topo.root,
            input_bits: bits,
            n_layers,
            blocks,
            boundaries,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: PlanFile =
            toml::from_str(text).map_err(|e| Error::parse("deployment plan", e.to_string()))?;
        let one_based = |v: usize, what: &str| -> Result<usize> {
            if v == 0 {
                return Err(Error::Plan(format!("{what} ids are 1-based")));
            }
            Ok(v - 1)
        };
        let mut blocks = Vec::new();
        for b in &file.blocks {
            blocks.push(DeviceBlock {
                device: one_based(b.device, "device")?,
                name: b.name.clone(),
                layers: b
                    .layers
                    .iter()
                    .map(|&l| one_based(l, "layer"))
                    .collect::<Result<_>>()?,
                candidates: b
                    .candidates
                    .iter()
                    .map(|&c| one_based(c, "candidate"))
                    .collect::<Result<_>>()?,
                ops: b.ops.clone(),
                exec_ms: b.exec_ms.clone(),
            });
        }
        let mut boundaries = Vec::new();
        for b in &file.boundaries {
            boundaries.push(Boundary {
                from: one_based(b.from, "device")?,
                to: b
                    .to
                    .iter()
                    .map(|&d| one_based(d, "device"))
                    .collect::<Result<_>>()?,
                payload_bits: b.payload_bits,
                comm_ms: b.comm_ms,
            });
        }
        let plan = DeploymentPlan {
            name: file.name,
            kind: file.kind,
            root: match file.root {
                Some(r) => Some(one_based(r, "root")?),
                None => None,
            },
            input_bits: file.input_bits,
            n_layers: file.n_layers,
            blocks,
            boundaries,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        let file = PlanFile {
            name: self.name.clone(),
            kind: self.kind,
            root: self.root.map(|r| r + 1),
            input_bits: self.input_bits,
            n_layers: self.n_layers,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockFile {
                    device: b.device + 1,
                    name: b.name.clone(),
                    layers: b.layers.iter().map(|l| l + 1).collect(),
                    candidates: b.candidates.iter().map(|c| c + 1).collect(),
                    ops: b.ops.clone(),
                    exec_ms: b.exec_ms.clone(),
                })
                .collect(),
            boundaries: self
                .boundaries
                .iter()
                .map(|b| BoundaryFile {
                    from: b.from + 1,
                    to: b.to.iter().map(|d| d + 1).collect(),
                    payload_bits: b.payload_bits,
                    comm_ms: b.comm_ms,
                })
                .collect(),
        };
        toml::to_string(&file).expect("plan serialization cannot fail")
    }

    pub fn num_devices(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, device: usize) -> &DeviceBlock {
        &self.blocks[device]
    }

    pub fn boundary_from(&self, device: usize) -> Option<&Boundary> {
        self.boundaries.iter().find(|b| b.from == device)
    }

    /// Structural checks: blocks keyed by contiguous device ids, layers
    /// partition `0..n_layers`, boundaries reference known devices, and
    /// exactly one terminal device exists. Empty blocks are allowed (pure
    /// relay devices, used by the cloud-only baseline).
    pub fn validate(&self) -> Result<()> {
        let m = self.blocks.len();
        if m == 0 {
            return Err(Error::Plan("plan has no devices".to_string()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.device != i {
                return Err(Error::Plan(format!(
                    "blocks must be listed in device order; position {} holds device {}",
                    i + 1,
                    b.device + 1
                )));
            }
            if b.layers.len() != b.exec_ms.len()
                || b.layers.len() != b.candidates.len()
                || b.layers.len() != b.ops.len()
            {
                return Err(Error::Plan(format!(
                    "device {}: layers, candidates, ops and exec_ms must align",
                    i + 1
                )));
            }
            if b.exec_ms.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Plan(format!(
                    "device {}: execution latencies must be finite and >= 0",
                    i + 1
                )));
            }
        }
        let mut seen = vec![false; self.n_layers];
        for b in &self.blocks {
            for &layer in &b.layers {
                if layer >= self.n_layers {
                    return Err(Error::Plan(format!(
                        "layer {} outside 1..={}",
                        layer + 1,
                        self.n_layers
                    )));
                }
                if seen[layer] {
                    return Err(Error::Plan(format!("layer {} assigned twice", layer + 1)));
                }
                seen[layer] = true;
            }
        }
        if let Some(miss) = seen.iter().position(|s| !s) {
            return Err(Error::Plan(format!("layer {} is unassigned", miss + 1)));
        }
        let mut has_outbound = vec![false; m];
        for b in &self.boundaries {
            if b.from >= m {
                return Err(Error::Plan(format!("boundary from unknown device {}", b.from + 1)));
            }
            if has_outbound[b.from] {
                return Err(Error::Plan(format!(
                    "device {} has more than one boundary",
                    b.from + 1
                )));
            }
            has_outbound[b.from] = true;
            if b.to.is_empty() {
                return Err(Error::Plan(format!(
                    "boundary from device {} has no destination",
                    b.from + 1
                )));
            }
            for &d in &b.to {
                if d >= m {
                    return Err(Error::Plan(format!("boundary to unknown device {}", d + 1)));
                }
                if d == b.from {
                    return Err(Error::Plan(format!(
                        "boundary from device {} loops back to itself",
                        b.from + 1
                    )));
                }
            }
            if !b.comm_ms.is_finite() || b.comm_ms < 0.0 {
                return Err(Error::Plan(format!(
                    "boundary from device {}: comm latency must be finite and >= 0",
                    b.from + 1
                )));
            }
        }
        let terminals = has_outbound.iter().filter(|o| !**o).count();
        if terminals != 1 {
            return Err(Error::Plan(format!(
                "plan must have exactly one terminal device, found {terminals}"
            )));
        }
        if self.kind == TopologyKind::Mesh && self.root.is_none() {
            return Err(Error::Plan("mesh plan needs a root".to_string()));
        }
        Ok(())
    }

    fn block_ms(&self, device: usize) -> f64 {
        self.blocks[device].exec_ms.iter().sum()
    }

    fn comm_ms(&self, device: usize) -> f64 {
        self.boundary_from(device).map_or(0.0, |b| b.comm_ms)
    }

    /// Completion latency from the plan's own numbers, chain or mesh
    /// composition. The simulator cross-checks this value.
    pub fn analytic_latency_ms(&self) -> Result<f64> {
        match self.kind {
            TopologyKind::Chain => Ok((0..self.num_devices())
                .map(|d| self.block_ms(d) + self.comm_ms(d))
                .sum()),
            TopologyKind::Mesh => {
                let root = self
                    .root
                    .ok_or_else(|| Error::Plan("mesh plan needs a root".to_string()))?;
                let branches = self
                    .boundary_from(root)
                    .ok_or_else(|| Error::Plan("mesh root has no broadcast boundary".to_string()))?
                    .to
                    .clone();
                let root_term = self.block_ms(root) + self.comm_ms(root);
                let worst = branches
                    .iter()
                    .map(|&b| root_term + self.block_ms(b) + self.comm_ms(b))
                    .fold(f64::NEG_INFINITY, f64::max);
                let serial: f64 = (0..self.num_devices())
                    .filter(|d| *d != root && !branches.contains(d))
                    .map(|d| self.block_ms(d) + self.comm_ms(d))
                    .sum();
                Ok(serial + worst)
            }
        }
    }
}

/// Builds the cloud-computing baseline for a chain deployment: the input
/// is relayed hop by hop to the final device, which executes every layer.
pub fn cloud_only_plan(
    plan: &DeploymentPlan,
    topo: &Topology,
    table: &LatencyTable,
) -> Result<DeploymentPlan> {
    if topo.kind != TopologyKind::Chain || plan.kind != TopologyKind::Chain {
        return Err(Error::Plan(
            "the cloud-only baseline applies to chain deployments".to_string(),
        ));
    }
    if topo.num_devices() != plan.num_devices() {
        return Err(Error::Plan(format!(
            "plan has {} devices, topology has {}",
            plan.num_devices(),
            topo.num_devices()
        )));
    }
    // Chosen candidate per layer, in layer order.
    let mut arch = vec![0usize; plan.n_layers];
    let mut ops = vec![String::new(); plan.n_layers];
    for b in &plan.blocks {
        for (pos, &layer) in b.layers.iter().enumerate() {
            arch[layer] = b.candidates[pos];
            ops[layer] = b.ops[pos].clone();
        }
    }
    let cloud = topo.last_device();
    let mut blocks = Vec::new();
    let mut boundaries = Vec::new();
    for device in 0..topo.num_devices() {
        if device == cloud {
            let mut exec_ms = Vec::new();
            for (layer, &candidate) in arch.iter().enumerate() {
                exec_ms.push(table.exec(layer, cloud, candidate)?);
            }
            blocks.push(DeviceBlock {
                device,
                name: topo.devices[device].name.clone(),
                layers: (0..plan.n_layers).collect(),
                candidates: arch.clone(),
                ops: ops.clone(),
                exec_ms,
            });
        } else {
            blocks.push(DeviceBlock {
                device,
                name: topo.devices[device].name.clone(),
                layers: vec![],
                candidates: vec![],
                ops: vec![],
                exec_ms: vec![],
            });
            let link = topo.link_between(device, device + 1).ok_or_else(|| {
                Error::Topology(format!("no link {} -> {}", device + 1, device + 2))
            })?;
            boundaries.push(Boundary {
                from: device,
                to: vec![device + 1],
                payload_bits: plan.input_bits,
                comm_ms: comm_latency(plan.input_bits, link),
            });
        }
    }
    let baseline = DeploymentPlan {
        name: format!("{} (cloud-only)", plan.name),
        kind: TopologyKind::Chain,
        root: None,
        input_bits: plan.input_bits,
        n_layers: plan.n_layers,
        blocks,
        boundaries,
    };
    baseline.validate()?;
    Ok(baseline)
}

/// Split deployment versus the cloud-only baseline, both simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyComparison {
    pub split_ms: f64,
    pub cloud_ms: f64,
    /// Positive when the split deployment is faster.
    pub reduction_pct: f64,
}

pub fn compare_with_cloud(
    plan: &DeploymentPlan,
    topo: &Topology,
    table: &LatencyTable,
) -> Result<LatencyComparison> {
    let split_ms = crate::sim::simulate(plan)?.completion_ms;
    let baseline = cloud_only_plan(plan, topo, table)?;
    let cloud_ms = crate::sim::simulate(&baseline)?.completion_ms;
    let reduction_pct = if cloud_ms > 0.0 {
        (cloud_ms - split_ms) / cloud_ms * 100.0
    } else {
        0.0
    };
    Ok(LatencyComparison {
        split_ms,
        cloud_ms,
        reduction_pct,
    })
}
