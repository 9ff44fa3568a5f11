use std::fs;

use qtrain::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use qtrain::config::{config_from_json, parse_config_str, MappingConfig, MappingKind, OptimizerConfig, TrainConfig};
use qtrain::data::{Dataset, Split};
use qtrain::mapping::{Mapping, MpsMapping};
use qtrain::qnn::{CircuitSpec, ThetaParams};
use qtrain::target::{Batch, LayerSpec, TargetNetworkSpec};
use qtrain::trainer::{count_trainable_params, Experiment, TrainState, METRICS_HEADER};
use qtrain::Error;

fn toy_target() -> TargetNetworkSpec {
    TargetNetworkSpec {
        input_shape: [1, 1, 2],
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 2, outputs: 2, activation: None }],
        class_count: 2,
    }
}

fn toy_state(lr: f64, seed: u64) -> TrainState {
    // m = 6 weights need three qubits
    TrainState::initialise(
        CircuitSpec::new(vec![1, 2], 2).unwrap(),
        &MappingConfig { kind: MappingKind::Mps, bond_dim: Some(2), hidden: None },
        toy_target(),
        OptimizerConfig { lr_theta: lr, lr_mapping: lr },
        true,
        seed,
    )
    .unwrap()
}

const POINTS: [[f32; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

fn two_points() -> Batch<'static> {
    Batch { inputs: POINTS.iter().map(|p| p.as_slice()).collect(), labels: vec![0, 1] }
}

#[test]
fn separable_toy_loss_decreases() {
    let mut state = toy_state(1e-2, 3);
    let batch = two_points();
    let mut last = state.evaluate(&batch).unwrap().loss;
    for _ in 0..5 {
        state.train_step(&batch, 1).unwrap();
        let loss = state.evaluate(&batch).unwrap().loss;
        assert!(loss < last, "loss went from {last} to {loss}");
        last = loss;
    }
}

#[test]
fn zero_learning_rate_changes_only_the_step() {
    let mut state = toy_state(0.0, 1);
    let theta = state.theta().clone();
    let mapping = state.mapping().clone();
    let record = state.train_step(&two_points(), 1).unwrap();
    assert_eq!(state.theta(), &theta);
    assert_eq!(state.mapping(), &mapping);
    assert_eq!(state.step(), 1);
    assert_eq!(record.step, 1);
}

#[test]
fn weights_are_regenerated_every_step() {
    let mut state = toy_state(1e-2, 2);
    let before = state.weight_generations();
    for _ in 0..4 {
        state.train_step(&two_points(), 1).unwrap();
    }
    assert_eq!(state.weight_generations() - before, 4);
    let w1 = state.generate_full_weights().unwrap();
    state.train_step(&two_points(), 1).unwrap();
    assert_ne!(state.generate_full_weights().unwrap(), w1);
}

#[test]
fn empty_batch_is_rejected() {
    let mut state = toy_state(1e-2, 0);
    let empty = Batch { inputs: vec![], labels: vec![] };
    assert!(matches!(state.train_step(&empty, 1), Err(Error::Data(_))));
}

#[test]
fn exploding_loss_aborts_with_a_snapshot() {
    let circuit = CircuitSpec::new(vec![1, 2], 1).unwrap();
    let theta = ThetaParams::zeros(&circuit);
    // huge random tensors give huge, unequal weights and a huge loss
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mapping = Mapping::Mps(MpsMapping::gaussian(4, 2, 1e3, &mut rng).unwrap());
    let mut state =
        TrainState::new(circuit, theta, mapping, toy_target(), OptimizerConfig::default(), true, 0).unwrap();
    match state.train_step(&two_points(), 1) {
        Err(Error::Diverged(snap)) => {
            assert_eq!(snap.step, 0);
            assert!(snap.loss.abs() > 1e6 || !snap.loss.is_finite());
            assert!(snap.mapping_max_abs >= 1e3);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn budget_is_closed_form_and_matches_the_optimizer() {
    for (splits, layers, r) in [(vec![1, 2], 2, 2), (vec![2, 2], 3, 3), (vec![3], 1, 1)] {
        let circuit = CircuitSpec::new(splits, layers).unwrap();
        let n = circuit.total_qubits();
        let target = TargetNetworkSpec {
            input_shape: [1, 1, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 2, outputs: 2, activation: None }],
            class_count: 2,
        };
        let state = TrainState::initialise(
            circuit,
            &MappingConfig { kind: MappingKind::Mps, bond_dim: Some(r), hidden: None },
            target,
            OptimizerConfig::default(),
            true,
            0,
        )
        .unwrap();
        let b = count_trainable_params(&state);
        assert_eq!(b.theta, layers * n);
        assert_eq!(b.mapping, 4 * r + 2 * r * r * (n - 1));
        assert_eq!(b.total, state.optimizer_visible_entries());
        assert_eq!(b.m, 6);
    }
}

#[test]
fn same_seed_same_weights() {
    let a = toy_state(1e-2, 42).generate_full_weights().unwrap();
    let b = toy_state(1e-2, 42).generate_full_weights().unwrap();
    let c = toy_state(1e-2, 43).generate_full_weights().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn ten_qubit_generation_has_requested_length() {
    let target = TargetNetworkSpec {
        input_shape: [1, 1, 98],
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 98, outputs: 10, activation: None }],
        class_count: 10,
    };
    // 98·10 + 10 = 990 weights on 10 qubits
    let state = TrainState::initialise(
        CircuitSpec::new(vec![5, 5], 2).unwrap(),
        &MappingConfig { kind: MappingKind::Mps, bond_dim: Some(2), hidden: None },
        target,
        OptimizerConfig::default(),
        true,
        9,
    )
    .unwrap();
    let w = state.generate_full_weights().unwrap();
    assert_eq!(w.len(), 990);
    assert_eq!(w, state.generate_full_weights().unwrap());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let mut state = toy_state(1e-2, 5);
    for _ in 0..3 {
        state.train_step(&two_points(), 1).unwrap();
    }
    let cfg = toy_config(std::path::Path::new("/tmp/unused"), std::path::Path::new("/tmp/unused"));
    let bytes = encode_checkpoint(&state, 7, &cfg).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.epoch, 7);
    assert_eq!(back.config, cfg);
    assert_eq!(back.state.theta(), state.theta());
    assert_eq!(back.state.mapping(), state.mapping());
    assert_eq!(back.state.adam_theta(), state.adam_theta());
    assert_eq!(back.state.adam_mapping(), state.adam_mapping());
    assert_eq!(back.state.step(), 3);
}

#[test]
fn checkpoint_corruption_and_versions_are_detected() {
    let state = toy_state(1e-2, 5);
    let cfg = toy_config(std::path::Path::new("/tmp/a"), std::path::Path::new("/tmp/b"));
    let bytes = encode_checkpoint(&state, 0, &cfg).unwrap();

    let mut flipped = bytes.clone();
    let at = flipped.len() - 20;
    flipped[at] ^= 0x01;
    let err = decode_checkpoint(&flipped).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(decode_checkpoint(truncated), Err(Error::Checkpoint(_))));

    let text = String::from_utf8(bytes.clone()).unwrap().replacen(" v1 ", " v9 ", 1);
    let err = decode_checkpoint(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");

    assert!(decode_checkpoint(b"not a checkpoint\n{}").is_err());
}

#[test]
fn checkpoint_files_are_replaced_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.qtc");
    let cfg = toy_config(dir.path(), dir.path());
    save_checkpoint(&toy_state(0.1, 1), 0, &cfg, &path).unwrap();
    save_checkpoint(&toy_state(0.1, 2), 1, &cfg, &path).unwrap();
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1, "{names:?}");
    assert_eq!(load_checkpoint(&path).unwrap().epoch, 1);
}

/// Two linearly separable classes of 2-pixel images.
fn toy_dataset(split: Split, count: usize) -> Dataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..count {
        let label = i % 2;
        let t = (i as f32 * 0.37).fract() * 0.3;
        if label == 0 {
            images.extend([0.7 + t, 0.2 - t * 0.5]);
        } else {
            images.extend([0.2 - t * 0.5, 0.7 + t]);
        }
        labels.push(label);
    }
    Dataset::new(images, labels, [1, 1, 2], 2, split).unwrap()
}

fn toy_config(out: &std::path::Path, data: &std::path::Path) -> TrainConfig {
    let text = format!(
        r#"{{
            "dataset": {{"name": "mnist", "data_dir": {data:?}, "classes": [0, 1]}},
            "target": {{"layers": [{{"type": "flatten"}}, {{"type": "dense", "inputs": 784, "outputs": 2}}]}},
            "circuit": {{"splits": [6, 6], "layers": 1}},
            "mapping": {{"kind": "mps", "bond_dim": 2}},
            "run": {{"epochs": 3, "batch_size": 8, "seed": 4, "output_dir": {out:?}, "record_wall_time": false}}
        }}"#
    );
    parse_config_str(&text, "toy", &[]).unwrap()
}

fn tiny_run_config(out: &std::path::Path, epochs: u64) -> TrainConfig {
    let mut cfg = toy_config(out, out);
    cfg.run.epochs = epochs;
    cfg
}

/// The config supplies run settings; the state uses the two-pixel target.
fn start<'d>(cfg: TrainConfig, train: &'d Dataset, test: &'d Dataset) -> Experiment<'d> {
    let state = TrainState::initialise(
        CircuitSpec::new(vec![1, 2], 2).unwrap(),
        &cfg.mapping,
        toy_target(),
        cfg.optimizer,
        cfg.run.prob_scale,
        cfg.run.seed,
    )
    .unwrap();
    Experiment::with_state(cfg, state, train, test).unwrap()
}

#[test]
fn zero_epochs_write_only_the_initial_record() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (toy_dataset(Split::Train, 40), toy_dataset(Split::Test, 10));
    let outcome = start(tiny_run_config(dir.path(), 0), &train, &test).run().unwrap();
    let text = fs::read_to_string(&outcome.metrics_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,0,"));
    assert!(outcome.checkpoint_path.exists());
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let (train, test) = (toy_dataset(Split::Train, 40), toy_dataset(Split::Test, 10));
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let outcome = start(tiny_run_config(dir.path(), 3), &train, &test).run().unwrap();
        fs::read(outcome.metrics_path).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    // header, initial record, 3 epochs of 5 batches
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2 + 15);
}

#[test]
fn resumed_run_continues_the_same_trajectory() {
    let (train, test) = (toy_dataset(Split::Train, 40), toy_dataset(Split::Test, 10));
    let full_dir = tempfile::tempdir().unwrap();
    let full = start(tiny_run_config(full_dir.path(), 4), &train, &test).run().unwrap();
    let full_csv = fs::read_to_string(&full.metrics_path).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let first = start(tiny_run_config(split_dir.path(), 2), &train, &test).run().unwrap();
    let resumed = Experiment::resume(tiny_run_config(split_dir.path(), 4), &first.checkpoint_path, &train, &test)
        .unwrap()
        .run()
        .unwrap();
    let split_csv = fs::read_to_string(&resumed.metrics_path).unwrap();
    assert_eq!(full_csv, split_csv);
    assert_eq!(full.state.theta(), resumed.state.theta());
}

#[test]
fn config_echo_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), dir.path());
    let back = config_from_json(cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let overridden = parse_config_str(
        &serde_json::to_string(&cfg.to_json()).unwrap(),
        "echo",
        &["run.seed=42".into()],
    )
    .unwrap();
    let bytes = encode_checkpoint(&toy_state(0.1, 0), 0, &overridden).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap().config.run.seed, 42);
}
