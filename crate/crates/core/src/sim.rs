//! Discrete-event simulation of one inference request executing a
//! deployment plan, with a timed trace and structural trace validation.
//!
//! A device starts its layer block once every inbound payload has
//! arrived; a mesh root broadcasts to its branches as simultaneous
//! independent transmissions, so branch blocks run concurrently.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::plan::DeploymentPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    ComputeStart,
    ComputeEnd,
    TxStart,
    TxEnd,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EventKind::ComputeStart => "compute_start",
            EventKind::ComputeEnd => "compute_end",
            EventKind::TxStart => "tx_start",
            EventKind::TxEnd => "tx_end",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    Device(usize),
    Link { tx: usize, rx: usize },
}

impl std::fmt::Display for Entity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Entity::Device(d) => write!(f, "device{}", d + 1),
            Entity::Link { tx, rx } => write!(f, "link{}-{}", tx + 1, rx + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time_ms: f64,
    pub entity: Entity,
    pub kind: EventKind,
    /// Global layer index for compute events.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    /// Tab-separated export with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("time_ms\tentity\tkind\tlayer\n");
        for e in &self.events {
            let layer = e.layer.map(|l| (l + 1).to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.time_ms, e.entity, e.kind, layer));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub completion_ms: f64,
    pub trace: SimTrace,
}

// Queue entry: earliest time first; ties broken by (device id, event kind
// rank, insertion sequence) so the run is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueEntry {
    time: f64,
    device: usize,
    rank: u8,
    seq: u64,
    action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Action {
    BlockStart { device: usize },
    ComputeEnd { device: usize, pos: usize },
    TxEnd { from: usize, to: usize },
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.device.cmp(&self.device))
            .then_with(|| other.rank.cmp(&self.rank))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Executes the plan event by event and returns the completion latency
/// with the full trace.
pub fn simulate(plan: &DeploymentPlan) -> Result<SimResult> {
    plan.validate().map_err(|e| Error::Simulation(e.to_string()))?;
    let m = plan.num_devices();
    let mut indegree = vec![0usize; m];
    for b in &plan.boundaries {
        for &to in &b.to {
            indegree[to] += 1;
        }
    }
    let sources: Vec<usize> = (0..m).filter(|&d| indegree[d] == 0).collect();
    if sources.len() != 1 {
        return Err(Error::Simulation(format!(
            "plan must have exactly one source device, found {}",
            sources.len()
        )));
    }

    let mut queue: BinaryHeap<QueueEntry> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |queue: &mut BinaryHeap<QueueEntry>, seq: &mut u64, time: f64, action: Action| {
        let (device, rank) = match action {
            Action::ComputeEnd { device, .. } => (device, 0),
            Action::TxEnd { to, .. } => (to, 1),
            Action::BlockStart { device } => (device, 2),
        };
        queue.push(QueueEntry {
            time,
            device,
            rank,
            seq: *seq,
            action,
        });
        *seq += 1;
    };

    push(&mut queue, &mut seq, 0.0, Action::BlockStart { device: sources[0] });

    let mut trace = SimTrace::default();
    let mut done_blocks = vec![false; m];
    let mut completion = 0.0f64;
    let mut guard = 0usize;
    let budget = 16 * (m + plan.n_layers + plan.boundaries.len() + 4);

    while let Some(entry) = queue.pop() {
        guard += 1;
        if guard > budget {
            return Err(Error::Simulation(
                "event budget exceeded; the plan's transfer graph must be cyclic".to_string(),
            ));
        }
        let t = entry.time;
        completion = completion.max(t);
        match entry.action {
            Action::BlockStart { device } => {
                let block = plan.block(device);
                if block.layers.is_empty() {
                    finish_block(plan, device, t, &mut trace, &mut queue, &mut seq, &mut push);
                    done_blocks[device] = true;
                } else {
                    trace.events.push(TraceEvent {
                        time_ms: t,
                        entity: Entity::Device(device),
                        kind: EventKind::ComputeStart,
                        layer: Some(block.layers[0]),
                    });
                    push(
                        &mut queue,
                        &mut seq,
                        t + block.exec_ms[0],
                        Action::ComputeEnd { device, pos: 0 },
                    );
                }
            }
            Action::ComputeEnd { device, pos } => {
                let block = plan.block(device);
                trace.events.push(TraceEvent {
                    time_ms: t,
                    entity: Entity::Device(device),
                    kind: EventKind::ComputeEnd,
                    layer: Some(block.layers[pos]),
                });
                if pos + 1 < block.layers.len() {
                    trace.events.push(TraceEvent {
                        time_ms: t,
                        entity: Entity::Device(device),
                        kind: EventKind::ComputeStart,
                        layer: Some(block.layers[pos + 1]),
                    });
                    push(
                        &mut queue,
                        &mut seq,
                        t + block.exec_ms[pos + 1],
                        Action::ComputeEnd { device, pos: pos + 1 },
                    );
                } else {
                    finish_block(plan, device, t, &mut trace, &mut queue, &mut seq, &mut push);
                    done_blocks[device] = true;
                }
            }
            Action::TxEnd { from, to } => {
                trace.events.push(TraceEvent {
                    time_ms: t,
                    entity: Entity::Link { tx: from, rx: to },
                    kind: EventKind::TxEnd,
                    layer: None,
                });
                indegree[to] -= 1;
                if indegree[to] == 0 {
                    push(&mut queue, &mut seq, t, Action::BlockStart { device: to });
                }
            }
        }
    }

    if let Some(dev) = done_blocks.iter().position(|d| !d) {
        return Err(Error::Simulation(format!(
            "device {} is unreachable from the source",
            dev + 1
        )));
    }
    Ok(SimResult {
        completion_ms: completion,
        trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_block(
    plan: &DeploymentPlan,
    device: usize,
    t: f64,
    trace: &mut SimTrace,
    queue: &mut BinaryHeap<QueueEntry>,
    seq: &mut u64,
    push: &mut impl FnMut(&mut BinaryHeap<QueueEntry>, &mut u64, f64, Action),
) {
    if let Some(boundary) = plan.boundary_from(device) {
        for &to in &boundary.to {
            trace.events.push(TraceEvent {
                time_ms: t,
                entity: Entity::Link { tx: device, rx: to },
                kind: EventKind::TxStart,
                layer: None,
            });
            push(queue, seq, t + boundary.comm_ms, Action::TxEnd { from: device, to });
        }
    }
}

/// A structural defect found in a trace.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceViolation {
    TimeRegression { entity: Entity, at: f64 },
    ComputeOverlap { device: usize, layer_a: usize, layer_b: usize },
    LayerNotExecuted { layer: usize },
    LayerExecutedTwice { layer: usize },
    TxBeforeCompute { from: usize, tx_at: f64, ready_at: f64 },
    StartBeforeInputs { device: usize, start_at: f64, inputs_at: f64 },
    UnpairedComputeEvent { device: usize, layer: usize },
}

impl std::fmt::Display for TraceViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TraceViolation::TimeRegression { entity, at } => {
                write!(f, "time regression on {entity} at {at} ms")
            }
            TraceViolation::ComputeOverlap { device, layer_a, layer_b } => write!(
                f,
                "device{} computes layers {} and {} concurrently",
                device + 1,
                layer_a + 1,
                layer_b + 1
            ),
            TraceViolation::LayerNotExecuted { layer } => {
                write!(f, "layer {} never executed", layer + 1)
            }
            TraceViolation::LayerExecutedTwice { layer } => {
                write!(f, "layer {} executed more than once", layer + 1)
            }
            TraceViolation::TxBeforeCompute { from, tx_at, ready_at } => write!(
                f,
                "device{} transmits at {tx_at} ms before its block is ready at {ready_at} ms",
                from + 1
            ),
            TraceViolation::StartBeforeInputs { device, start_at, inputs_at } => write!(
                f,
                "device{} starts at {start_at} ms before its inputs arrive at {inputs_at} ms",
                device + 1
            ),
            TraceViolation::UnpairedComputeEvent { device, layer } => write!(
                f,
                "device{} has an unpaired compute event for layer {}",
                device + 1,
                layer + 1
            ),
        }
    }
}

/// Checks causality, per-device non-overlap and layer coverage. Returns
/// every violation found; an empty list means the trace is consistent
/// with the plan.
pub fn validate_trace(trace: &SimTrace, plan: &DeploymentPlan) -> Vec<TraceViolation> {
    let mut violations = Vec::new();
    let m = plan.num_devices();

    // Times nondecreasing per entity.
    let mut entities: Vec<Entity> = Vec::new();
    for e in &trace.events {
        if !entities.contains(&e.entity) {
            entities.push(e.entity);
        }
    }
    for entity in &entities {
        let mut last = f64::NEG_INFINITY;
        for e in trace.events.iter().filter(|e| e.entity == *entity) {
            if e.time_ms < last {
                violations.push(TraceViolation::TimeRegression {
                    entity: *entity,
                    at: e.time_ms,
                });
            }
            last = last.max(e.time_ms);
        }
    }

    // Pair compute_start/compute_end into intervals per device.
    let mut intervals: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); m];
    let mut layer_runs = vec![0usize; plan.n_layers];
    for (device, device_intervals) in intervals.iter_mut().enumerate() {
        let mut open: Option<(usize, f64)> = None;
        for e in trace
            .events
            .iter()
            .filter(|e| e.entity == Entity::Device(device))
        {
            match (e.kind, open) {
                (EventKind::ComputeStart, None) => open = Some((e.layer.unwrap_or(0), e.time_ms)),
                (EventKind::ComputeEnd, Some((layer, start))) => {
                    if e.layer == Some(layer) {
                        device_intervals.push((layer, start, e.time_ms));
                        if layer < plan.n_layers {
                            layer_runs[layer] += 1;
                        }
                        open = None;
                    } else {
                        violations.push(TraceViolation::UnpairedComputeEvent {
                            device,
                            layer: e.layer.unwrap_or(0),
                        });
                        open = None;
                    }
                }
                (EventKind::ComputeStart, Some((layer, _))) => {
                    violations.push(TraceViolation::UnpairedComputeEvent { device, layer });
                    open = Some((e.layer.unwrap_or(0), e.time_ms));
                }
                (EventKind::ComputeEnd, None) => {
                    violations.push(TraceViolation::UnpairedComputeEvent {
                        device,
                        layer: e.layer.unwrap_or(0),
                    });
                }
                _ => {}
            }
        }
        if let Some((layer, _)) = open {
            violations.push(TraceViolation::UnpairedComputeEvent { device, layer });
        }
    }

    for (layer, &runs) in layer_runs.iter().enumerate() {
        if runs == 0 {
            violations.push(TraceViolation::LayerNotExecuted { layer });
        } else if runs > 1 {
            violations.push(TraceViolation::LayerExecutedTwice { layer });
        }
    }

    // Strict overlap within one device.
    for (device, iv) in intervals.iter().enumerate() {
        for i in 0..iv.len() {
            for j in i + 1..iv.len() {
                let (la, sa, ea) = iv[i];
                let (lb, sb, eb) = iv[j];
                if sa < eb && sb < ea {
                    violations.push(TraceViolation::ComputeOverlap {
                        device,
                        layer_a: la,
                        layer_b: lb,
                    });
                }
            }
        }
    }

    // Causality: transmissions only after the block is ready; blocks only
    // after every inbound payload has arrived.
    let arrival_at = |device: usize| -> f64 {
        trace
            .events
            .iter()
            .filter(|e| {
                e.kind == EventKind::TxEnd
                    && matches!(e.entity, Entity::Link { rx, .. } if rx == device)
            })
            .map(|e| e.time_ms)
            .fold(0.0f64, f64::max)
    };
    for (device, iv) in intervals.iter().enumerate() {
        let ready = iv
            .iter()
            .map(|&(_, _, end)| end)
            .fold(arrival_at(device), f64::max);
        for e in trace.events.iter().filter(|e| {
            e.kind == EventKind::TxStart
                && matches!(e.entity, Entity::Link { tx, .. } if tx == device)
        }) {
            if e.time_ms < ready - 1e-12 {
                violations.push(TraceViolation::TxBeforeCompute {
                    from: device,
                    tx_at: e.time_ms,
                    ready_at: ready,
                });
            }
        }
        if let Some(first_start) = iv.iter().map(|&(_, s, _)| s).next() {
            let inputs = arrival_at(device);
            if first_start < inputs - 1e-12 {
                violations.push(TraceViolation::StartBeforeInputs {
                    device,
                    start_at: first_start,
                    inputs_at: inputs,
                });
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests;
