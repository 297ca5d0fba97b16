//! Joint architecture search and multi-split deployment over simulated
//! mobile-edge networks.
//!
//! The crate searches a small neural architecture and its layer-to-device
//! split at the same time: a shape-preserving trunk of mixed candidate
//! operations is trained with sampled binary gates, the architecture
//! parameters follow the gradient of a penalized objective that trades
//! classification loss against an expected completion-latency constraint,
//! and the resulting deployment is cross-checked with a discrete-event
//! simulator.
//!
//! Modules:
//! - [`kernel`]: dense numeric kernels (candidate forward/backward, losses,
//!   optimizers) with exact gradients.
//! - [`supernet`]: the mixed-operation trunk, gate sampling and the
//!   architecture gradient.
//! - [`topology`]: device/link model, chain and mesh structures, the
//!   proportional layer assignment.
//! - [`latency`]: completion-latency formulas, expected latency and its
//!   gradient, the constraint penalty, synthetic latency tables.
//! - [`plan`]: deployment plans and the cloud-only baseline.
//! - [`sim`]: the discrete-event simulator and trace validation.
//! - [`search`]: the two-stage driver (warm-up, alternating search,
//!   derive-and-retrain) plus the synthetic dataset.

pub mod error;
pub mod kernel;
pub mod latency;
pub mod plan;
pub mod search;
pub mod sim;
pub mod supernet;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use kernel::loss::LossMode;
pub use kernel::{Batch, CandidateOpSpec, CandidateWeights, WeightSet};
pub use latency::{
    chain_latency, completion_latency, expected_op_latency, expected_total_latency,
    latency_grad_alpha, latency_penalty, mesh_latency, synthesize_table, CompletionLatency,
    LatencyTable,
};
pub use plan::{cloud_only_plan, compare_with_cloud, DeploymentPlan, LatencyComparison};
pub use search::{
    derive_and_retrain, evaluate, generate_split, run_pipeline, run_search, warmup, DataSettings,
    Dataset, EpochRecord, ModelSettings, RunConfig, SavedState, SearchConfig, SearchState,
    SplitDataset, TrainReport,
};
pub use sim::{simulate, validate_trace, SimResult, SimTrace, TraceViolation};
pub use supernet::{
    arch_grad, sample_gates, softmax_probs, CompactModel, ForwardMode, GateSample, MixedOp,
    ProbVector, SuperNet,
};
pub use tensor::Tensor;
pub use topology::{
    build_assignment, comm_latency, output_bits, LayerAssignment, Topology, TopologyKind,
};
