use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::latency::{completion_latency, LatencyTable};
use crate::plan::{Boundary, DeviceBlock};
use crate::topology::{build_assignment, LayerAssignment, Topology, TopologyKind};

/// Chain plan from per-device blocks of exec latencies and per-boundary
/// comm latencies.
pub(crate) fn chain_plan(exec: &[Vec<f64>], comm: &[f64]) -> DeploymentPlan {
    let m = exec.len();
    assert_eq!(comm.len(), m - 1);
    let mut next_layer = 0;
    let mut blocks = Vec::new();
    let mut boundaries = Vec::new();
    for (device, costs) in exec.iter().enumerate() {
        let layers: Vec<usize> = (next_layer..next_layer + costs.len()).collect();
        next_layer += costs.len();
        blocks.push(DeviceBlock {
            device,
            name: format!("dev{}", device + 1),
            layers,
            candidates: vec![0; costs.len()],
            ops: vec!["op".to_string(); costs.len()],
            exec_ms: costs.clone(),
        });
        if device < m - 1 {
            boundaries.push(Boundary {
                from: device,
                to: vec![device + 1],
                payload_bits: 1024,
                comm_ms: comm[device],
            });
        }
    }
    DeploymentPlan {
        name: "chain".to_string(),
        kind: TopologyKind::Chain,
        root: None,
        input_bits: 1024,
        n_layers: next_layer,
        blocks,
        boundaries,
    }
}

/// Mesh plan: one prefix device, a root, `branch_exec.len()` branches and
/// one aggregation device. Every block holds one layer.
pub(crate) fn mesh_plan(
    prefix: (f64, f64),
    root: (f64, f64),
    branch_exec: &[(f64, f64)],
    agg_ms: f64,
) -> DeploymentPlan {
    let b = branch_exec.len();
    let root_dev = 1;
    let agg_dev = root_dev + b + 1;
    let m = agg_dev + 1;
    let mut blocks = Vec::new();
    let mut boundaries = Vec::new();
    for device in 0..m {
        let exec = if device == 0 {
            prefix.0
        } else if device == root_dev {
            root.0
        } else if device == agg_dev {
            agg_ms
        } else {
            branch_exec[device - root_dev - 1].0
        };
        blocks.push(DeviceBlock {
            device,
            name: format!("dev{}", device + 1),
            layers: vec![device],
            candidates: vec![0],
            ops: vec!["op".to_string()],
            exec_ms: vec![exec],
        });
    }
    boundaries.push(Boundary {
        from: 0,
        to: vec![root_dev],
        payload_bits: 1024,
        comm_ms: prefix.1,
    });
    boundaries.push(Boundary {
        from: root_dev,
        to: (root_dev + 1..agg_dev).collect(),
        payload_bits: 1024,
        comm_ms: root.1,
    });
    for (bi, &(_, comm)) in branch_exec.iter().enumerate() {
        boundaries.push(Boundary {
            from: root_dev + 1 + bi,
            to: vec![agg_dev],
            payload_bits: 1024,
            comm_ms: comm,
        });
    }
    DeploymentPlan {
        name: "mesh".to_string(),
        kind: TopologyKind::Mesh,
        root: Some(root_dev),
        input_bits: 1024,
        n_layers: m,
        blocks,
        boundaries,
    }
}

#[test]
fn chain_hand_instance_completes_in_ten_ms() {
    let plan = chain_plan(&[vec![1.0, 2.0], vec![3.0]], &[4.0]);
    let result = simulate(&plan).unwrap();
    assert!((result.completion_ms - 10.0).abs() < 1e-12);
    assert!((result.completion_ms - plan.analytic_latency_ms().unwrap()).abs() < 1e-12);
    assert!(validate_trace(&result.trace, &plan).is_empty());
}

#[test]
fn mesh_hand_instance_completes_in_twelve_ms() {
    let plan = mesh_plan((1.0, 1.0), (2.0, 1.0), &[(3.0, 1.0), (5.0, 1.0)], 1.0);
    let result = simulate(&plan).unwrap();
    assert!((result.completion_ms - 12.0).abs() < 1e-12);
    assert!((result.completion_ms - plan.analytic_latency_ms().unwrap()).abs() < 1e-12);
    assert!(validate_trace(&result.trace, &plan).is_empty());
}

#[test]
fn all_zero_latencies_complete_at_time_zero_with_a_well_ordered_trace() {
    let plan = chain_plan(&[vec![0.0, 0.0], vec![0.0]], &[0.0]);
    let result = simulate(&plan).unwrap();
    assert_eq!(result.completion_ms, 0.0);
    assert!(validate_trace(&result.trace, &plan).is_empty());
    assert!(result.trace.events.iter().all(|e| e.time_ms == 0.0));
}

#[test]
fn chain_compute_intervals_are_strictly_sequential() {
    let plan = chain_plan(&[vec![1.0], vec![2.0], vec![0.5]], &[0.25, 0.25]);
    let result = simulate(&plan).unwrap();
    let ends: Vec<(usize, f64, f64)> = result
        .trace
        .events
        .iter()
        .filter_map(|e| match (e.kind, e.entity) {
            (EventKind::ComputeStart, Entity::Device(d)) => Some((d, e.time_ms, f64::NAN)),
            _ => None,
        })
        .collect();
    // Each device starts strictly after the previous one started.
    for w in ends.windows(2) {
        assert!(w[1].1 > w[0].1);
    }
    assert!(validate_trace(&result.trace, &plan).is_empty());
}

#[test]
fn mesh_branches_overlap_in_time() {
    let plan = mesh_plan((0.5, 0.5), (1.0, 0.5), &[(4.0, 0.5), (4.0, 0.5)], 0.5);
    let result = simulate(&plan).unwrap();
    let branch_intervals: Vec<(f64, f64)> = [2usize, 3]
        .iter()
        .map(|&dev| {
            let start = result
                .trace
                .events
                .iter()
                .find(|e| e.kind == EventKind::ComputeStart && e.entity == Entity::Device(dev))
                .unwrap()
                .time_ms;
            let end = result
                .trace
                .events
                .iter()
                .find(|e| e.kind == EventKind::ComputeEnd && e.entity == Entity::Device(dev))
                .unwrap()
                .time_ms;
            (start, end)
        })
        .collect();
    let (s1, e1) = branch_intervals[0];
    let (s2, e2) = branch_intervals[1];
    assert!(s1 < e2 && s2 < e1, "branches must run concurrently");
}

#[test]
fn removing_any_single_branch_never_increases_completion() {
    let branches = [(3.0, 1.0), (5.0, 0.5), (1.0, 2.0)];
    let full = mesh_plan((1.0, 0.5), (2.0, 0.25), &branches, 1.5);
    let base = simulate(&full).unwrap().completion_ms;
    for drop in 0..branches.len() {
        let rest: Vec<(f64, f64)> = branches
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, b)| *b)
            .collect();
        let reduced = mesh_plan((1.0, 0.5), (2.0, 0.25), &rest, 1.5);
        let t = simulate(&reduced).unwrap().completion_ms;
        assert!(t <= base + 1e-12, "dropping branch {drop}: {t} > {base}");
    }
}

#[test]
fn tampered_trace_is_flagged() {
    let plan = chain_plan(&[vec![1.0], vec![2.0]], &[0.5]);
    let mut result = simulate(&plan).unwrap();
    assert!(validate_trace(&result.trace, &plan).is_empty());
    // Pull the second device's compute start before its input arrives.
    for e in &mut result.trace.events {
        if e.kind == EventKind::ComputeStart && e.entity == Entity::Device(1) {
            e.time_ms = 0.1;
        }
    }
    let violations = validate_trace(&result.trace, &plan);
    assert!(!violations.is_empty());
}

#[test]
fn unreachable_device_is_an_error() {
    let mut plan = chain_plan(&[vec![1.0], vec![2.0], vec![0.5]], &[0.25, 0.25]);
    // Re-point the middle boundary back to the source: device 3 becomes
    // unreachable and device 1 gains an inbound edge.
    plan.boundaries[1].to = vec![0];
    let err = simulate(&plan).unwrap_err();
    assert!(err.to_string().contains("source") || err.to_string().contains("unreachable"));
}

/// Randomized analytic cross-check; the full 100-instance sweep runs in
/// the acceptance suite.
#[test]
fn random_instances_match_the_analytic_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..20 {
        let mesh = case % 2 == 1;
        let (topo, plan) = random_instance(&mut rng, mesh);
        let n = plan.n_layers;
        let assignment = assignment_of(&plan);
        let mut table = LatencyTable::new();
        for b in &plan.blocks {
            for (pos, &layer) in b.layers.iter().enumerate() {
                table.insert_exec(layer, b.device, 0, b.exec_ms[pos]);
            }
            if let Some(boundary) = plan.boundary_from(b.device) {
                if let Some(last) = b.layers.last() {
                    table.insert_comm(*last, b.device, boundary.comm_ms);
                }
            }
        }
        let analytic = completion_latency(&assignment, &topo, &table, &vec![0; n])
            .unwrap()
            .value_ms;
        let simulated = simulate(&plan).unwrap().completion_ms;
        assert!(
            (analytic - simulated).abs() <= 1e-9,
            "case {case}: analytic {analytic} vs simulated {simulated}"
        );
    }
}

pub(crate) fn assignment_of(plan: &DeploymentPlan) -> LayerAssignment {
    LayerAssignment {
        blocks: plan.blocks.iter().map(|b| b.layers.clone()).collect(),
    }
}

pub(crate) fn random_instance(
    rng: &mut ChaCha8Rng,
    mesh: bool,
) -> (Topology, DeploymentPlan) {
    if mesh {
        let branches = rng.random_range(1..4usize);
        let topo = crate::latency::tests::mesh_topo(branches);
        let plan = mesh_plan(
            (rng.random_range(0.0..4.0), rng.random_range(0.0..2.0)),
            (rng.random_range(0.0..4.0), rng.random_range(0.0..2.0)),
            &(0..branches)
                .map(|_| (rng.random_range(0.0..4.0), rng.random_range(0.0..2.0)))
                .collect::<Vec<_>>(),
            rng.random_range(0.0..4.0),
        );
        (topo, plan)
    } else {
        let m = rng.random_range(1..6usize);
        let topo = crate::latency::tests::chain_topo(m);
        let exec: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..rng.random_range(1..4usize))
                    .map(|_| rng.random_range(0.0..4.0))
                    .collect()
            })
            .collect();
        let comm: Vec<f64> = (0..m - 1).map(|_| rng.random_range(0.0..2.0)).collect();
        (topo, chain_plan(&exec, &comm))
    }
}

#[test]
fn simulation_is_deterministic() {
    let plan = mesh_plan((1.0, 0.5), (2.0, 0.25), &[(3.0, 1.0), (5.0, 0.5)], 1.5);
    let a = simulate(&plan).unwrap();
    let b = simulate(&plan).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trace_export_has_a_header() {
    let plan = chain_plan(&[vec![1.0], vec![2.0]], &[0.5]);
    let tsv = simulate(&plan).unwrap().trace.to_tsv();
    assert!(tsv.starts_with("time_ms\tentity\tkind\tlayer\n"));
    assert!(tsv.lines().count() > 1);
}

#[test]
fn random_mesh_assignments_via_build_assignment_also_agree() {
    // Mesh instance whose blocks come from the proportional rule rather
    // than one layer per device.
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let topo = crate::latency::tests::mesh_topo(2);
    let n = 9;
    let assignment = build_assignment(n, &topo).unwrap();
    let mut table = LatencyTable::new();
    for layer in 0..n {
        let dev = assignment.device_of(layer).unwrap();
        table.insert_exec(layer, dev, 0, rng.random_range(0.0..3.0));
    }
    for dev in 0..4 {
        table.insert_comm(assignment.last_layer(dev).unwrap(), dev, rng.random_range(0.0..1.0));
    }
    let specs = [crate::kernel::CandidateOpSpec::Identity];
    let plan = DeploymentPlan::build(
        "mesh-n9",
        &topo,
        &assignment,
        &table,
        &vec![0; n],
        &specs,
        &[2, 2, 2],
    )
    .unwrap();
    let analytic = completion_latency(&assignment, &topo, &table, &vec![0; n])
        .unwrap()
        .value_ms;
    let simulated = simulate(&plan).unwrap().completion_ms;
    assert!((analytic - simulated).abs() <= 1e-9);
}
