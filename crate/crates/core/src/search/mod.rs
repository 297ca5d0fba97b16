//! The two-stage search driver: warm-up, alternating weight and
//! architecture optimization of the penalized objective, compact-model
//! derivation, and retraining.

pub mod data;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::loss::LossMode;
use crate::kernel::optim::{optimizer_step_masked, Optimizer, ParamState};
use crate::kernel::{Batch, CandidateOpSpec};
use crate::latency::{
    completion_latency, expected_total_with_grad, latency_penalty, LatencyTable,
};
use crate::plan::DeploymentPlan;
use crate::supernet::{
    arch_grad, sample_gates, ArchEvalPoint, CompactModel, ForwardMode, GateSample, ProbVector,
    SuperNet,
};
use crate::tensor::Tensor;
use crate::topology::{build_assignment, LayerAssignment, Topology};

pub use data::{generate_split, DataSettings, Dataset};

/// Hyper-parameters of one search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Weight-decay coefficient on the squared parameter norm.
    pub lambda1: f64,
    /// Latency-penalty coefficient.
    pub lambda2: f64,
    /// The latency constraint, milliseconds.
    pub t_const_ms: f64,
    pub lr_weights: f64,
    pub lr_alpha: f64,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Mask all but two sampled candidates in every architecture step.
    pub two_path: bool,
    pub loss_mode: LossMode,
    /// Evaluate gate gradients at the relaxed mixture (default) or along
    /// a sampled path.
    pub arch_eval_point: ArchPointSetting,
    /// Draw architecture-step batches from the training split instead of
    /// the held-out validation split.
    pub arch_on_train: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPointSetting {
    Relaxed,
    Sampled,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda1: 1e-4,
            lambda2: 0.5,
            t_const_ms: 1.0,
            lr_weights: 0.002,
            lr_alpha: 0.01,
            warmup_epochs: 5,
            search_epochs: 15,
            retrain_epochs: 30,
            batch_size: 64,
            seed: 1,
            two_path: false,
            loss_mode: LossMode::MulticlassSoftmax,
            arch_eval_point: ArchPointSetting::Relaxed,
            arch_on_train: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("t_const_ms", self.t_const_ms),
            ("lr_weights", self.lr_weights),
            ("lr_alpha", self.lr_alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        Ok(())
    }
}

/// Trunk settings: layer count and the candidate family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub layers: usize,
    /// Candidate names per `CandidateOpSpec::name`; the same family is
    /// used at every layer. Defaults to the full 13-candidate family.
    pub candidates: Vec<String>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            layers: 4,
            candidates: CandidateOpSpec::full_family()
                .iter()
                .map(|s| s.name())
                .collect(),
        }
    }
}

impl ModelSettings {
    pub fn candidate_specs(&self) -> Result<Vec<CandidateOpSpec>> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".to_string()));
        }
        if self.candidates.is_empty() {
            return Err(Error::Config("model needs at least one candidate".to_string()));
        }
        self.candidates.iter().map(|s| CandidateOpSpec::parse(s)).collect()
    }
}

/// The full config file: search hyper-parameters, trunk settings and the
/// synthetic dataset settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub model: ModelSettings,
    pub data: DataSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::parse("search config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.model.candidate_specs()?;
        self.data.validate()?;
        if self.search.loss_mode == LossMode::BinarySigmoid && self.data.classes != 2 {
            return Err(Error::Config(
                "binary-sigmoid loss needs a two-class dataset".to_string(),
            ));
        }
        Ok(())
    }

    fn num_logits(&self) -> usize {
        match self.search.loss_mode {
            LossMode::BinarySigmoid => 1,
            LossMode::MulticlassSoftmax => self.data.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Search,
    Retrain,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Warmup => "warmup",
            Phase::Search => "search",
            Phase::Retrain => "retrain",
        };
        f.write_str(s)
    }
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based epoch number within its phase.
    pub epoch: usize,
    /// Mean data loss over the training split (relaxed mixture during
    /// warm-up/search, the compact model during retraining).
    pub loss: f64,
    pub expected_latency_ms: f64,
    pub penalty: f64,
    pub val_accuracy: f64,
    /// loss + lambda1 * |theta|^2 + penalty.
    pub objective: f64,
}

/// Tab-separated history export with a header row; floats are printed
/// with shortest-round-trip formatting so identical runs produce
/// byte-identical files.
pub fn history_to_tsv(history: &[EpochRecord]) -> String {
    let mut out =
        String::from("phase\tepoch\tloss\texpected_latency_ms\tpenalty\tval_accuracy\tobjective\n");
    for r in history {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.phase, r.epoch, r.loss, r.expected_latency_ms, r.penalty, r.val_accuracy, r.objective
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightOptState {
    layers: Vec<Vec<Vec<ParamState>>>,
    head_w: ParamState,
    head_b: ParamState,
}

impl WeightOptState {
    fn for_net(net: &SuperNet) -> Self {
        WeightOptState {
            layers: net
                .weights
                .layers
                .iter()
                .map(|cands| {
                    cands
                        .iter()
                        .map(|w| w.tensors().iter().map(|t| ParamState::new(t.numel())).collect())
                        .collect()
                })
                .collect(),
            head_w: ParamState::new(net.head.w.numel()),
            head_b: ParamState::new(net.head.b.numel()),
        }
    }
}

/// Everything a run accumulates: the supernet, optimizer states, the rng
/// stream, and the per-epoch history.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub config: RunConfig,
    pub net: SuperNet,
    pub topology: Topology,
    pub table: LatencyTable,
    pub assignment: LayerAssignment,
    pub history: Vec<EpochRecord>,
    /// Gate draws per layer/candidate during warm-up.
    pub warmup_gate_counts: Vec<Vec<u64>>,
    opt_weights: WeightOptState,
    opt_alpha: Vec<ParamState>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl SearchState {
    pub fn new(topo: &Topology, table: &LatencyTable, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.model.candidate_specs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.search.seed);
        let per_layer: Vec<Vec<CandidateOpSpec>> = vec![specs; config.model.layers];
        let net = SuperNet::new(
            &config.data.input_shape(),
            config.num_logits(),
            &per_layer,
            &mut rng,
        )?;
        let assignment = build_assignment(config.model.layers, topo)?;
        // Fail fast if the table does not cover the assigned grid.
        for layer in 0..config.model.layers {
            let device = assignment.device_of(layer).unwrap();
            table.exec_row(layer, device, net.layers[layer].num_candidates())?;
        }
        let opt_weights = WeightOptState::for_net(&net);
        let opt_alpha = net
            .layers
            .iter()
            .map(|l| ParamState::new(l.alpha.len()))
            .collect();
        let warmup_gate_counts = net
            .layers
            .iter()
            .map(|l| vec![0u64; l.num_candidates()])
            .collect();
        Ok(SearchState {
            config: config.clone(),
            net,
            topology: topo.clone(),
            table: table.clone(),
            assignment,
            history: Vec::new(),
            warmup_gate_counts,
            opt_weights,
            opt_alpha,
            optimizer: Optimizer::adam(),
            rng,
        })
    }

    fn alphas(&self) -> Vec<Vec<f64>> {
        self.net.layers.iter().map(|l| l.alpha.clone()).collect()
    }

    pub fn expected_latency_ms(&self) -> Result<f64> {
        Ok(expected_total_with_grad(
            &self.alphas(),
            &self.assignment,
            &self.topology,
            &self.table,
        )?
        .0)
    }

    /// Exact completion latency of a fixed architecture on this run's
    /// assignment and table.
    pub fn architecture_latency_ms(&self, arch: &[usize]) -> Result<f64> {
        Ok(completion_latency(&self.assignment, &self.topology, &self.table, arch)?.value_ms)
    }

    fn shuffled_batches(&mut self, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            let j = self.rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
            .chunks(self.config.search.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// One weight update along the sampled paths: data gradient plus
    /// weight decay on the touched tensors, Adam step. Never touches
    /// alpha.
    fn weight_step(&mut self, batch: &Batch, gates: &[GateSample]) -> Result<f64> {
        let lambda1 = self.config.search.lambda1;
        let lr = self.config.search.lr_weights;
        let loss_mode = self.config.search.loss_mode;
        let (loss, mut grads) = self.net.backward_weights_sampled(batch, gates, loss_mode)?;
        for (li, gate) in gates.iter().enumerate() {
            let ci = gate.active_indices()[0];
            let weights = &mut self.net.weights.layers[li][ci];
            let states = &mut self.opt_weights.layers[li][ci];
            let gtensors = grads.layers[li][ci].tensors_mut();
            for ((tensor, state), grad) in weights
                .tensors_mut()
                .into_iter()
                .zip(states.iter_mut())
                .zip(gtensors)
            {
                // d/dtheta of lambda1 * |theta|^2.
                grad.add_scaled(tensor, 2.0 * lambda1);
                optimizer_step_masked(
                    &self.optimizer,
                    state,
                    tensor.data_mut(),
                    grad.data(),
                    lr,
                    None,
                    &format!("weights of layer {}, candidate {}", li + 1, ci + 1),
                )?;
            }
        }
        grads.head_w.add_scaled(&self.net.head.w, 2.0 * lambda1);
        grads.head_b.add_scaled(&self.net.head.b, 2.0 * lambda1);
        optimizer_step_masked(
            &self.optimizer,
            &mut self.opt_weights.head_w,
            self.net.head.w.data_mut(),
            grads.head_w.data(),
            lr,
            None,
            "head weights",
        )?;
        optimizer_step_masked(
            &self.optimizer,
            &mut self.opt_weights.head_b,
            self.net.head.b.data_mut(),
            grads.head_b.data(),
            lr,
            None,
            "head bias",
        )?;
        Ok(loss)
    }

    /// One architecture update: gate gradients at the configured
    /// evaluation point plus the latency-penalty gradient, Adam step on
    /// alpha. Never touches the weights.
    fn arch_step(&mut self, batch: &Batch) -> Result<f64> {
        let cfg = self.config.search.clone();
        let probs = self.net.probs();
        let gates: Option<Vec<GateSample>> = if cfg.two_path {
            Some(
                probs
                    .iter()
                    .map(|p| sample_gates(p, &mut self.rng, true))
                    .collect(),
            )
        } else if cfg.arch_eval_point == ArchPointSetting::Sampled {
            Some(
                probs
                    .iter()
                    .map(|p| sample_gates(p, &mut self.rng, false))
                    .collect(),
            )
        } else {
            None
        };
        let point = match (&gates, cfg.arch_eval_point) {
            (Some(g), _) if cfg.two_path => ArchEvalPoint::PairRelaxed(g),
            (Some(g), ArchPointSetting::Sampled) => ArchEvalPoint::Sampled(g),
            _ => ArchEvalPoint::Relaxed,
        };
        let (data_loss, dl_dg) = self.net.gate_grads(batch, &point, cfg.loss_mode)?;

        let (e_total, e_grad) = expected_total_with_grad(
            &self.alphas(),
            &self.assignment,
            &self.topology,
            &self.table,
        )?;
        let (_, dpen_dt) = latency_penalty(e_total, cfg.t_const_ms, cfg.lambda2);

        for li in 0..self.net.num_layers() {
            let r = self.net.layers[li].num_candidates();
            let mut grad = vec![0.0; r];
            let mut mask: Option<Vec<bool>> = None;
            match &gates {
                Some(g) if cfg.two_path => {
                    // Pair-renormalized subproblem: only the two sampled
                    // entries receive gradient.
                    let pair = g[li].active_indices();
                    let (i, j) = (pair[0], pair[1]);
                    let (pi, pj) = (probs[li].as_slice()[i], probs[li].as_slice()[j]);
                    let total = (pi + pj).max(f64::MIN_POSITIVE);
                    let q = ProbVector::new(vec![pi / total, pj / total])
                        .unwrap_or_else(|_| ProbVector::uniform(2));
                    let sub = arch_grad(&[dl_dg[li][i], dl_dg[li][j]], &q);
                    grad[i] = sub[0] + dpen_dt * e_grad[li][i];
                    grad[j] = sub[1] + dpen_dt * e_grad[li][j];
                    let mut m = vec![false; r];
                    m[i] = true;
                    m[j] = true;
                    mask = Some(m);
                }
                _ => {
                    let data_part = arch_grad(&dl_dg[li], &probs[li]);
                    for ci in 0..r {
                        grad[ci] = data_part[ci] + dpen_dt * e_grad[li][ci];
                    }
                }
            }
            optimizer_step_masked(
                &self.optimizer,
                &mut self.opt_alpha[li],
                &mut self.net.layers[li].alpha,
                &grad,
                cfg.lr_alpha,
                mask.as_deref(),
                &format!("alpha of layer {}", li + 1),
            )?;
        }
        Ok(data_loss)
    }

    /// Loss, expected latency, penalty, validation accuracy and the
    /// penalized objective at the current parameters.
    fn record_epoch(&mut self, phase: Phase, epoch: usize, data: &SplitDataset) -> Result<()> {
        let loss_mode = self.config.search.loss_mode;
        let probs = self.net.probs();
        let train_batch = data.train.full_batch()?;
        let loss = self
            .net
            .loss_batch(&train_batch, &ForwardMode::Relaxed(&probs), loss_mode)?;
        let expected = self.expected_latency_ms()?;
        let (penalty, _) = latency_penalty(
            expected,
            self.config.search.t_const_ms,
            self.config.search.lambda2,
        );
        let norm = self.net.weights.squared_norm()
            + self.net.head.w.squared_norm()
            + self.net.head.b.squared_norm();
        let objective = loss + self.config.search.lambda1 * norm + penalty;
        if !objective.is_finite() {
            return Err(Error::NonFinite {
                context: format!("objective after {phase} epoch {epoch}"),
            });
        }
        let compact = CompactModel::from_supernet(&self.net, &self.net.derive_compact())?;
        let (val_accuracy, _) = evaluate(|x| compact.forward(x), &data.val, loss_mode)?;
        self.history.push(EpochRecord {
            phase,
            epoch,
            loss,
            expected_latency_ms: expected,
            penalty,
            val_accuracy,
            objective,
        });
        Ok(())
    }
}

/// A train/validation pair.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
}

impl SplitDataset {
    pub fn generate(settings: &DataSettings) -> Result<Self> {
        let (train, val) = generate_split(settings)?;
        Ok(SplitDataset { train, val })
    }
}

/// Top-1 accuracy and mean loss of a forward function over a dataset.
pub fn evaluate(
    forward: impl Fn(&Tensor) -> Result<Tensor>,
    dataset: &Dataset,
    loss_mode: LossMode,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for (x, &label) in dataset.inputs.iter().zip(&dataset.labels) {
        let logits = forward(x)?;
        loss_sum += crate::kernel::loss::loss_ce(&logits, label, loss_mode)?;
        let predicted = match loss_mode {
            LossMode::BinarySigmoid => usize::from(logits.data()[0] > 0.0),
            LossMode::MulticlassSoftmax => {
                let d = logits.data();
                let mut best = 0;
                for (i, &v) in d.iter().enumerate() {
                    if v > d[best] {
                        best = i;
                    }
                }
                best
            }
        };
        if predicted == label {
            correct += 1;
        }
    }
    Ok((
        correct as f64 / dataset.len() as f64,
        loss_sum / dataset.len() as f64,
    ))
}

/// Warm-up: weights trained along uniformly drawn paths, alpha frozen.
pub fn warmup(state: &mut SearchState, data: &SplitDataset) -> Result<()> {
    let epochs = state.config.search.warmup_epochs;
    for epoch in 1..=epochs {
        let batches = state.shuffled_batches(data.train.len());
        let uniforms: Vec<ProbVector> = state
            .net
            .layers
            .iter()
            .map(|l| ProbVector::uniform(l.num_candidates()))
            .collect();
        for indices in batches {
            let batch = data.train.batch(&indices)?;
            let gates: Vec<GateSample> = uniforms
                .iter()
                .map(|p| sample_gates(p, &mut state.rng, false))
                .collect();
            for (li, g) in gates.iter().enumerate() {
                state.warmup_gate_counts[li][g.active_indices()[0]] += 1;
            }
            state.weight_step(&batch, &gates)?;
        }
        state.record_epoch(Phase::Warmup, epoch, data)?;
    }
    Ok(())
}

/// Stage one: warm-up followed by alternating weight/architecture epochs.
/// Deterministic for a fixed config (seed included).
pub fn run_search(
    data: &SplitDataset,
    topo: &Topology,
    table: &LatencyTable,
    config: &RunConfig,
) -> Result<SearchState> {
    let mut state = SearchState::new(topo, table, config)?;
    warmup(&mut state, data)?;
    let arch_source = if config.search.arch_on_train {
        &data.train
    } else {
        &data.val
    };
    for epoch in 1..=config.search.search_epochs {
        let weight_batches = state.shuffled_batches(data.train.len());
        let arch_batches = state.shuffled_batches(arch_source.len());
        let mut arch_iter = arch_batches.iter().cycle();
        for indices in &weight_batches {
            // (a) weight step on a sampled path.
            let probs = state.net.probs();
            let gates: Vec<GateSample> = probs
                .iter()
                .map(|p| sample_gates(p, &mut state.rng, false))
                .collect();
            let batch = data.train.batch(indices)?;
            state.weight_step(&batch, &gates)?;
            // (b) architecture step on a separate mini-batch, gates reset.
            let arch_indices = arch_iter.next().expect("cycled iterator");
            let arch_batch = arch_source.batch(arch_indices)?;
            state.arch_step(&arch_batch)?;
        }
        state.record_epoch(Phase::Search, epoch, data)?;
    }
    Ok(state)
}

/// Everything the pipeline reports about one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Chosen candidate index per layer.
    pub architecture: Vec<usize>,
    pub ops: Vec<String>,
    pub val_accuracy: f64,
    pub pre_retrain_val_accuracy: f64,
    pub expected_latency_ms: f64,
    pub simulated_latency_ms: f64,
    pub t_const_ms: f64,
    pub final_objective: f64,
    pub history: Vec<EpochRecord>,
    #[serde(skip)]
    pub compact: Option<CompactModel>,
    #[serde(skip)]
    pub plan: Option<DeploymentPlan>,
}

/// Stage two: fix the argmax architecture, inherit the searched weights,
/// retrain, and report expected plus simulated latency.
pub fn derive_and_retrain(state: &mut SearchState, data: &SplitDataset) -> Result<TrainReport> {
    let cfg = state.config.search.clone();
    let arch = state.net.derive_compact();
    let mut compact = CompactModel::from_supernet(&state.net, &arch)?;
    let (pre_acc, _) = evaluate(|x| compact.forward(x), &data.val, cfg.loss_mode)?;

    let mut opt_layers: Vec<Vec<ParamState>> = compact
        .weights
        .iter()
        .map(|w| w.tensors().iter().map(|t| ParamState::new(t.numel())).collect())
        .collect();
    let mut opt_head_w = ParamState::new(compact.head.w.numel());
    let mut opt_head_b = ParamState::new(compact.head.b.numel());
    let optimizer = state.optimizer;

    let expected_latency = state.architecture_latency_ms(&arch)?;
    let (penalty, _) = latency_penalty(expected_latency, cfg.t_const_ms, cfg.lambda2);
    let mut history = state.history.clone();

    for epoch in 1..=cfg.retrain_epochs {
        let batches = state.shuffled_batches(data.train.len());
        for indices in batches {
            let batch = data.train.batch(&indices)?;
            let (_, mut grads) = compact.backward(&batch, cfg.loss_mode)?;
            for ((weights, states), gts) in compact
                .weights
                .iter_mut()
                .zip(opt_layers.iter_mut())
                .zip(grads.layers.iter_mut())
            {
                for ((tensor, st), grad) in weights
                    .tensors_mut()
                    .into_iter()
                    .zip(states.iter_mut())
                    .zip(gts.tensors_mut())
                {
                    grad.add_scaled(tensor, 2.0 * cfg.lambda1);
                    optimizer_step_masked(
                        &optimizer,
                        st,
                        tensor.data_mut(),
                        grad.data(),
                        cfg.lr_weights,
                        None,
                        "compact weights",
                    )?;
                }
            }
            grads.head_w.add_scaled(&compact.head.w, 2.0 * cfg.lambda1);
            grads.head_b.add_scaled(&compact.head.b, 2.0 * cfg.lambda1);
            optimizer_step_masked(
                &optimizer,
                &mut opt_head_w,
                compact.head.w.data_mut(),
                grads.head_w.data(),
                cfg.lr_weights,
                None,
                "compact head weights",
            )?;
            optimizer_step_masked(
                &optimizer,
                &mut opt_head_b,
                compact.head.b.data_mut(),
                grads.head_b.data(),
                cfg.lr_weights,
                None,
                "compact head bias",
            )?;
        }
        let (val_accuracy, _) = evaluate(|x| compact.forward(x), &data.val, cfg.loss_mode)?;
        let train_batch = data.train.full_batch()?;
        let mut loss_sum = 0.0;
        for (x, &y) in train_batch.inputs().iter().zip(train_batch.labels()) {
            let logits = compact.forward(x)?;
            loss_sum += crate::kernel::loss::loss_ce(&logits, y, cfg.loss_mode)?;
        }
        let loss = loss_sum / train_batch.len() as f64;
        let objective = loss + cfg.lambda1 * compact.squared_norm() + penalty;
        history.push(EpochRecord {
            phase: Phase::Retrain,
            epoch,
            loss,
            expected_latency_ms: expected_latency,
            penalty,
            val_accuracy,
            objective,
        });
    }

    let (val_accuracy, _) = evaluate(|x| compact.forward(x), &data.val, cfg.loss_mode)?;
    let (_, final_train_loss) = evaluate(|x| compact.forward(x), &data.train, cfg.loss_mode)?;
    let specs: Vec<CandidateOpSpec> = compact.specs.clone();
    let plan = DeploymentPlan::build(
        "derived",
        &state.topology,
        &state.assignment,
        &state.table,
        &arch,
        &state.net.layers[0].candidates,
        &state.config.data.input_shape(),
    )?;
    let simulated = crate::sim::simulate(&plan)?.completion_ms;
    let final_objective = final_train_loss + cfg.lambda1 * compact.squared_norm() + penalty;
    Ok(TrainReport {
        architecture: arch,
        ops: specs.iter().map(|s| s.name()).collect(),
        val_accuracy,
        pre_retrain_val_accuracy: pre_acc,
        expected_latency_ms: expected_latency,
        simulated_latency_ms: simulated,
        t_const_ms: cfg.t_const_ms,
        final_objective,
        history,
        compact: Some(compact),
        plan: Some(plan),
    })
}

/// The whole pipeline: search stage then derive-and-retrain.
pub fn run_pipeline(
    data: &SplitDataset,
    topo: &Topology,
    table: &LatencyTable,
    config: &RunConfig,
) -> Result<(SearchState, TrainReport)> {
    let mut state = run_search(data, topo, table, config)?;
    let report = derive_and_retrain(&mut state, data)?;
    Ok((state, report))
}

/// What `derive` needs later: the config and the searched supernet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedState {
    pub config: RunConfig,
    pub net: SuperNet,
    pub history: Vec<EpochRecord>,
}

impl SavedState {
    pub fn of(state: &SearchState) -> Self {
        SavedState {
            config: state.config.clone(),
            net: state.net.clone(),
            history: state.history.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serialization cannot fail")
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("saved state", e.to_string()))
    }
}

#[cfg(test)]
mod tests;
