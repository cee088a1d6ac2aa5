//! End-to-end training driver behavior: determinism, zero-epoch runs,
//! resume, freezing, and continual-training smoke.

use std::collections::BTreeMap;

use ssta::node::slices;
use ssta::protocol::{
    build_workers, evaluate, load_checkpoint, run_training, train, LifelongStrategy, MsgMode,
    TrainConfig,
};
use ssta::world::{generate_dataset, preset, Dataset};

fn tiny_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(1);
    cfg.horizon = 3;
    cfg.epochs = 2;
    cfg.pretrain_epochs = 0;
    cfg.seed = seed;
    cfg
}

#[test]
fn zero_epochs_leaves_initialization_and_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out_dir = dir.path().join("out");
    let world = preset(2, 5).unwrap();
    generate_dataset(&world, 20, 10, &data_dir).unwrap();

    let mut cfg = tiny_cfg(5);
    cfg.epochs = 0;
    run_training(&data_dir, &out_dir, &cfg, false).unwrap();

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "epoch,node,mse,psnr,ssim,loss\n");

    // Checkpoints equal the seeded initialization.
    let dataset = Dataset::load(&data_dir).unwrap();
    let (reference, _) = build_workers(&dataset, &cfg).unwrap();
    for (id, worker) in &reference {
        let (loaded, _) =
            load_checkpoint(&out_dir.join("checkpoints").join(format!("node_{id}.ckpt"))).unwrap();
        for name in worker.params.names() {
            assert_eq!(
                loaded.params.get(name).unwrap(),
                worker.params.get(name).unwrap(),
                "node {id} slice {name}"
            );
        }
    }
}

#[test]
fn serial_training_is_bit_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let world = preset(2, 9).unwrap();
    generate_dataset(&world, 16, 8, &data_dir).unwrap();
    let run = |out: &std::path::Path| {
        run_training(&data_dir, out, &tiny_cfg(9), false).unwrap();
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b, "metric logs must be byte-identical for a fixed seed");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let world = preset(2, 11).unwrap();
    generate_dataset(&world, 16, 8, &data_dir).unwrap();

    let mut full_cfg = tiny_cfg(11);
    full_cfg.epochs = 4;
    let full_out = dir.path().join("full");
    run_training(&data_dir, &full_out, &full_cfg, false).unwrap();

    let split_out = dir.path().join("split");
    let mut first = tiny_cfg(11);
    first.epochs = 2;
    run_training(&data_dir, &split_out, &first, false).unwrap();
    let mut second = tiny_cfg(11);
    second.epochs = 4;
    run_training(&data_dir, &split_out, &second, true).unwrap();

    for id in [1usize, 2] {
        let (a, _) =
            load_checkpoint(&full_out.join("checkpoints").join(format!("node_{id}.ckpt"))).unwrap();
        let (b, _) =
            load_checkpoint(&split_out.join("checkpoints").join(format!("node_{id}.ckpt"))).unwrap();
        for name in a.params.names() {
            let ta = a.params.get(name).unwrap();
            let tb = b.params.get(name).unwrap();
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "node {id} slice {name}");
            }
        }
    }
    let full_csv = std::fs::read_to_string(full_out.join("metrics.csv")).unwrap();
    let split_csv = std::fs::read_to_string(split_out.join("metrics.csv")).unwrap();
    assert_eq!(full_csv, split_csv);
}

#[test]
fn loss_decreases_over_training() {
    let world = preset(2, 13).unwrap();
    let dataset = Dataset::generate_in_memory(&world, 24).unwrap();
    let mut cfg = tiny_cfg(13);
    cfg.epochs = 8;
    let outcome = train(&dataset, &cfg).unwrap();
    let epoch_loss = |epoch: usize| -> f64 {
        outcome.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).sum()
    };
    assert!(
        epoch_loss(7) < epoch_loss(0),
        "first {} last {}",
        epoch_loss(0),
        epoch_loss(7)
    );
}

#[test]
fn frozen_message_head_never_moves() {
    let world = preset(2, 17).unwrap();
    let dataset = Dataset::generate_in_memory(&world, 16).unwrap();
    let mut cfg = tiny_cfg(17);
    cfg.freeze_msg_head = true;
    let (reference, _) = build_workers(&dataset, &cfg).unwrap();
    let outcome = train(&dataset, &cfg).unwrap();
    for (id, worker) in &outcome.workers {
        for name in [slices::MSG_HEAD_WEIGHT, slices::MSG_HEAD_BIAS] {
            assert_eq!(
                worker.params.get(name).unwrap(),
                reference[id].params.get(name).unwrap(),
                "node {id} slice {name} moved despite freeze"
            );
        }
        // Everything else trains.
        assert_ne!(
            worker.params.get(slices::OUT_KERNEL).unwrap(),
            reference[id].params.get(slices::OUT_KERNEL).unwrap()
        );
    }
}

#[test]
fn self_message_round_trips() {
    let world = preset(2, 19).unwrap();
    let dataset = Dataset::generate_in_memory(&world, 12).unwrap();
    let mut cfg = tiny_cfg(19);
    cfg.self_message = true;
    let outcome = train(&dataset, &cfg).unwrap();
    assert_eq!(outcome.workers.len(), 2);
}

#[test]
fn lifelong_strategies_run_and_respect_capacity() {
    let world = preset(2, 23).unwrap();
    let dataset = Dataset::generate_in_memory(&world, 40).unwrap();
    for strategy in [LifelongStrategy::SlidingWindow, LifelongStrategy::InterestingData] {
        let mut cfg = tiny_cfg(23);
        cfg.lifelong = Some((strategy, 8));
        cfg.replay_batch = 4;
        let outcome = train(&dataset, &cfg).unwrap();
        for worker in outcome.workers.values() {
            let state = worker.lifelong.as_ref().unwrap();
            assert!(state.buffer.len() <= 8);
            assert!(!state.buffer.is_empty());
        }
        // Single pass: only epoch 0 appears in the log.
        assert!(outcome.rows.iter().all(|r| r.epoch == 0));
    }
}

#[test]
fn evaluation_reports_all_views() {
    let world = preset(4, 29).unwrap();
    let dataset = Dataset::generate_in_memory(&world, 20).unwrap();
    let mut cfg = tiny_cfg(29);
    cfg.k = 2;
    cfg.epochs = 1;
    let outcome = train(&dataset, &cfg).unwrap();
    let mut workers: BTreeMap<_, _> = outcome.workers;
    let tail = dataset.slice(12, 20);
    let report = evaluate(&mut workers, &tail, 3, MsgMode::Emerged, 0).unwrap();
    assert_eq!(report.per_view.len(), 4);
    assert!(report.mean.mse > 0.0);
    assert!(report.mean.ssim.is_finite());
    let csv = report.csv();
    assert!(csv.starts_with("view,mse,psnr,ssim,lpips\n"));
    assert_eq!(csv.lines().count(), 6); // header + 4 views + mean
}
