use super::*;
use crate::latency::synthesize_table;
use crate::supernet::ForwardMode;
use crate::topology::{DeviceProfile, LinkKind, LinkSpec, TopologyKind};

fn topo2() -> Topology {
    Topology {
        kind: TopologyKind::Chain,
        devices: vec![
            DeviceProfile {
                id: 0,
                name: "edge".to_string(),
                speed_factor: 1.0,
            },
            DeviceProfile {
                id: 1,
                name: "cloud".to_string(),
                speed_factor: 4.0,
            },
        ],
        links: vec![LinkSpec {
            tx: 0,
            rx: 1,
            capacity_mbps: 25.0,
            kind: LinkKind::Wireless,
        }],
        chain_set: vec![],
        tree_set: vec![],
        root: None,
    }
}

fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        search: SearchConfig {
            lambda2: 0.5,
            t_const_ms: 0.3,
            warmup_epochs: 2,
            search_epochs: 3,
            retrain_epochs: 2,
            batch_size: 24,
            seed,
            lr_alpha: 0.05,
            ..Default::default()
        },
        model: ModelSettings {
            layers: 2,
            candidates: vec![
                "identity".to_string(),
                "conv3x3-e3".to_string(),
                "conv5x5-e3-res".to_string(),
            ],
        },
        data: DataSettings {
            train: 96,
            val: 48,
            ..Default::default()
        },
    }
}

fn setup(seed: u64) -> (SplitDataset, Topology, LatencyTable, RunConfig) {
    let config = tiny_config(seed);
    let data = SplitDataset::generate(&config.data).unwrap();
    let topo = topo2();
    let specs = config.model.candidate_specs().unwrap();
    let table = synthesize_table(&topo, &config.data.input_shape(), config.model.layers, &specs)
        .unwrap();
    (data, topo, table, config)
}

fn alpha_bits(net: &SuperNet) -> Vec<u64> {
    net.layers
        .iter()
        .flat_map(|l| l.alpha.iter().map(|a| a.to_bits()))
        .collect()
}

fn weight_bits(net: &SuperNet) -> Vec<u64> {
    let mut out = Vec::new();
    for cands in &net.weights.layers {
        for w in cands {
            for t in w.tensors() {
                out.extend(t.data().iter().map(|v| v.to_bits()));
            }
        }
    }
    out.extend(net.head.w.data().iter().map(|v| v.to_bits()));
    out.extend(net.head.b.data().iter().map(|v| v.to_bits()));
    out
}

#[test]
fn warmup_freezes_alpha_bit_for_bit() {
    let (data, topo, table, config) = setup(7);
    let mut state = SearchState::new(&topo, &table, &config).unwrap();
    let before = alpha_bits(&state.net);
    warmup(&mut state, &data).unwrap();
    assert_eq!(before, alpha_bits(&state.net));
    assert_eq!(state.history.len(), config.search.warmup_epochs);
}

#[test]
fn warmup_reduces_training_loss_for_most_seeds() {
    let mut improved = 0;
    for seed in [1u64, 2, 3] {
        let (data, topo, table, config) = setup(seed);
        let mut state = SearchState::new(&topo, &table, &config).unwrap();
        let probs = state.net.probs();
        let initial = state
            .net
            .loss_batch(
                &data.train.full_batch().unwrap(),
                &ForwardMode::Relaxed(&probs),
                config.search.loss_mode,
            )
            .unwrap();
        warmup(&mut state, &data).unwrap();
        if state.history.last().unwrap().loss <= initial {
            improved += 1;
        }
    }
    assert!(improved >= 2, "warm-up improved the loss in {improved}/3 seeds");
}

#[test]
fn warmup_selection_frequencies_are_uniform_within_three_sigma() {
    let (data, topo, table, mut config) = setup(11);
    config.search.warmup_epochs = 25;
    let mut state = SearchState::new(&topo, &table, &config).unwrap();
    warmup(&mut state, &data).unwrap();
    let r = 3.0;
    for layer_counts in &state.warmup_gate_counts {
        let draws: u64 = layer_counts.iter().sum();
        let q = 1.0 / r;
        let sigma = (q * (1.0 - q) / draws as f64).sqrt();
        for &c in layer_counts {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - q).abs() <= 3.0 * sigma,
                "frequency {freq} vs expected {q} over {draws} draws"
            );
        }
    }
}

#[test]
fn weight_steps_never_touch_alpha_and_arch_steps_never_touch_weights() {
    use rand::SeedableRng;
    let (data, topo, table, config) = setup(13);
    let mut state = SearchState::new(&topo, &table, &config).unwrap();
    let alpha_before = alpha_bits(&state.net);
    let batch = data.train.batch(&[0, 1, 2, 3]).unwrap();
    let probs = state.net.probs();
    let mut gate_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let gates: Vec<_> = probs
        .iter()
        .map(|p| crate::supernet::sample_gates(p, &mut gate_rng, false))
        .collect();
    state.weight_step(&batch, &gates).unwrap();
    assert_eq!(alpha_before, alpha_bits(&state.net));

    let weights_before = weight_bits(&state.net);
    state.arch_step(&batch).unwrap();
    assert_eq!(weights_before, weight_bits(&state.net));
    assert_ne!(alpha_before, alpha_bits(&state.net));
}

#[test]
fn zero_lambda2_records_zero_penalty_throughout() {
    let (data, topo, table, mut config) = setup(17);
    config.search.lambda2 = 0.0;
    let state = run_search(&data, &topo, &table, &config).unwrap();
    assert!(state.history.iter().all(|r| r.penalty == 0.0));
}

#[test]
fn identical_seeds_give_bit_identical_histories() {
    let (data, topo, table, config) = setup(23);
    let a = run_search(&data, &topo, &table, &config).unwrap();
    let b = run_search(&data, &topo, &table, &config).unwrap();
    assert_eq!(history_to_tsv(&a.history), history_to_tsv(&b.history));
    let mut sa = a;
    let mut sb = b;
    let ra = derive_and_retrain(&mut sa, &data).unwrap();
    let rb = derive_and_retrain(&mut sb, &data).unwrap();
    assert_eq!(history_to_tsv(&ra.history), history_to_tsv(&rb.history));
    assert_eq!(ra.architecture, rb.architecture);
}

#[test]
fn objective_matches_an_independent_recomputation() {
    let (data, topo, table, config) = setup(29);
    let state = run_search(&data, &topo, &table, &config).unwrap();
    let record = state.history.last().unwrap();

    // Independent checker: per-sample relaxed losses, a manual norm sum,
    // and the penalty from the expected latency.
    let probs = state.net.probs();
    let mut loss_sum = 0.0;
    for (x, &y) in data.train.inputs.iter().zip(&data.train.labels) {
        let logits = state
            .net
            .forward(x, &ForwardMode::Relaxed(&probs))
            .unwrap();
        loss_sum += crate::kernel::loss::loss_ce(&logits, y, config.search.loss_mode).unwrap();
    }
    let loss = loss_sum / data.train.len() as f64;
    let mut norm = 0.0;
    for cands in &state.net.weights.layers {
        for w in cands {
            for t in w.tensors() {
                norm += t.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    norm += state.net.head.w.data().iter().map(|v| v * v).sum::<f64>();
    norm += state.net.head.b.data().iter().map(|v| v * v).sum::<f64>();
    let alphas: Vec<Vec<f64>> = state.net.layers.iter().map(|l| l.alpha.clone()).collect();
    let expected = crate::latency::expected_total_latency(
        &alphas,
        &state.assignment,
        &state.topology,
        &state.table,
    )
    .unwrap();
    let diff = expected - config.search.t_const_ms;
    let objective = loss + config.search.lambda1 * norm + config.search.lambda2 * diff * diff;
    assert!(
        (objective - record.objective).abs() <= 1e-10,
        "checker {objective} vs recorded {}",
        record.objective
    );
}

#[test]
fn penalty_does_not_grow_over_the_search_for_most_seeds() {
    let mut ok = 0;
    for seed in [31u64, 32, 33] {
        let (data, topo, table, mut config) = setup(seed);
        config.search.search_epochs = 6;
        let state = run_search(&data, &topo, &table, &config).unwrap();
        let search_records: Vec<&EpochRecord> = state
            .history
            .iter()
            .filter(|r| r.phase == Phase::Search)
            .collect();
        let first = search_records.first().unwrap().penalty;
        let last = search_records.last().unwrap().penalty;
        if last <= first + 1e-12 {
            ok += 1;
        }
    }
    assert!(ok >= 2, "penalty was non-increasing in {ok}/3 seeds");
}

#[test]
fn derived_compact_model_matches_the_sampled_supernet_path() {
    let (data, topo, table, config) = setup(37);
    let mut state = run_search(&data, &topo, &table, &config).unwrap();
    let arch = state.net.derive_compact();
    let compact = CompactModel::from_supernet(&state.net, &arch).unwrap();
    let gates: Vec<GateSample> = arch
        .iter()
        .map(|&i| GateSample::OneHot {
            index: i,
            len: state.net.layers[0].num_candidates(),
        })
        .collect();
    for x in data.val.inputs.iter().take(5) {
        let a = compact.forward(x).unwrap();
        let b = state.net.forward(x, &ForwardMode::Sampled(&gates)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    let report = derive_and_retrain(&mut state, &data).unwrap();
    assert_eq!(report.architecture, arch);
    assert_eq!(
        report.expected_latency_ms,
        state.architecture_latency_ms(&arch).unwrap()
    );
    assert!((report.simulated_latency_ms - report.expected_latency_ms).abs() <= 1e-9);
    assert_eq!(
        report.history.len(),
        config.search.warmup_epochs + config.search.search_epochs + config.search.retrain_epochs
    );
}

#[test]
fn retraining_does_not_hurt_accuracy_for_most_seeds() {
    let mut ok = 0;
    for seed in [41u64, 42, 43] {
        let (data, topo, table, mut config) = setup(seed);
        config.search.retrain_epochs = 4;
        let mut state = run_search(&data, &topo, &table, &config).unwrap();
        let report = derive_and_retrain(&mut state, &data).unwrap();
        if report.val_accuracy >= report.pre_retrain_val_accuracy - 0.005 {
            ok += 1;
        }
    }
    assert!(ok >= 2, "retraining held accuracy in {ok}/3 seeds");
}

#[test]
fn evaluate_scores_a_perfect_classifier_at_one() {
    let (data, _, _, config) = setup(47);
    // Cheating forward: reads the label through a lookup.
    let lookup: std::collections::HashMap<u64, usize> = data
        .val
        .inputs
        .iter()
        .zip(&data.val.labels)
        .map(|(x, &y)| (x.data()[0].to_bits(), y))
        .collect();
    let (acc, loss) = evaluate(
        |x| {
            let label = lookup[&x.data()[0].to_bits()];
            let mut logits = Tensor::zeros(&[4]);
            logits.data_mut()[label] = 50.0;
            Ok(logits)
        },
        &data.val,
        config.search.loss_mode,
    )
    .unwrap();
    assert_eq!(acc, 1.0);
    assert!(loss < 1e-9);
}

#[test]
fn evaluate_on_shuffled_labels_is_near_chance() {
    use rand::{Rng, SeedableRng};
    let settings = DataSettings {
        train: 64,
        val: 1200,
        ..Default::default()
    };
    let (_, mut val) = generate_split(&settings).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for l in val.labels.iter_mut() {
        *l = rng.random_range(0..4);
    }
    // A fixed classifier cannot beat chance on independently random labels.
    let (acc, _) = evaluate(
        |x| {
            let mut logits = Tensor::zeros(&[4]);
            logits.data_mut()[0] = x.data()[3];
            logits.data_mut()[1] = x.data()[17];
            Ok(logits)
        },
        &val,
        LossMode::MulticlassSoftmax,
    )
    .unwrap();
    // 3.5 binomial sigmas around 0.25 for n = 1200.
    let sigma = (0.25 * 0.75 / 1200.0_f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.5 * sigma, "accuracy {acc}");
}

#[test]
fn evaluate_rejects_an_empty_dataset() {
    let ds = Dataset {
        inputs: vec![],
        labels: vec![],
        num_classes: 4,
    };
    assert!(matches!(
        evaluate(|_| Ok(Tensor::zeros(&[4])), &ds, LossMode::MulticlassSoftmax),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn config_round_trips_and_rejects_bad_values() {
    let config = tiny_config(3);
    let text = config.to_toml();
    let reparsed = RunConfig::parse(&text).unwrap();
    assert_eq!(config, reparsed);

    assert!(RunConfig::parse("search = { lambda1 = -1.0 }").is_err());
    assert!(RunConfig::parse("model = { candidates = [\"conv9x9-e3\"] }").is_err());
    let defaults = RunConfig::parse("").unwrap();
    assert_eq!(defaults, RunConfig::default());
    assert_eq!(defaults.model.candidates.len(), 13);
}

#[test]
fn saved_state_round_trips_through_json() {
    let (data, topo, table, config) = setup(53);
    let state = run_search(&data, &topo, &table, &config).unwrap();
    let saved = SavedState::of(&state);
    let json = saved.to_json();
    let parsed = SavedState::parse(&json).unwrap();
    assert_eq!(parsed.net, state.net);
    assert_eq!(parsed.history, state.history);
}

#[test]
fn two_path_search_runs_and_stays_deterministic() {
    let (data, topo, table, mut config) = setup(59);
    config.search.two_path = true;
    let a = run_search(&data, &topo, &table, &config).unwrap();
    let b = run_search(&data, &topo, &table, &config).unwrap();
    assert_eq!(history_to_tsv(&a.history), history_to_tsv(&b.history));
}

#[test]
fn binary_sigmoid_mode_trains_a_two_class_head() {
    let (_, topo, _, mut config) = setup(61);
    config.search.loss_mode = LossMode::BinarySigmoid;
    config.data.classes = 2;
    config.data.train = 48;
    config.data.val = 24;
    config.search.warmup_epochs = 1;
    config.search.search_epochs = 1;
    config.search.retrain_epochs = 1;
    let data = SplitDataset::generate(&config.data).unwrap();
    let specs = config.model.candidate_specs().unwrap();
    let table = synthesize_table(&topo, &config.data.input_shape(), config.model.layers, &specs)
        .unwrap();
    let (state, report) = run_pipeline(&data, &topo, &table, &config).unwrap();
    assert_eq!(state.net.num_classes, 1);
    assert!(report.val_accuracy >= 0.0 && report.val_accuracy <= 1.0);
}
