use hegraph_core::io::{load_checkpoint, load_task, save_checkpoint};
use hegraph_core::synth::{generate, SyntheticSpec};
use hegraph_core::train::{train, TrainConfig, Trainer, Variant};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 5,
        shots: 4,
        dim: 16,
        test_per_class: 8,
        seed: 21,
        ..SyntheticSpec::default()
    }
}

#[test]
fn resume_from_disk_continues_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&spec()).unwrap().write(dir.path()).unwrap();
    let task = load_task(&manifest, Variant::Full).unwrap();
    let test = task.test.as_ref();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 7,
        ..task.config(Variant::Full)
    };

    let straight = train(&task.graph, &cfg, test).unwrap();

    let mut first = Trainer::new(&task.graph, test, cfg.clone()).unwrap();
    for _ in 0..3 {
        first.run_epoch().unwrap();
    }
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);

    let resumed = Trainer::resume(&task.graph, test, load_checkpoint(&path).unwrap())
        .unwrap()
        .run(|_| {})
        .unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn every_variant_trains_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&spec()).unwrap().write(dir.path()).unwrap();
    for v in Variant::ALL {
        let task = load_task(&manifest, v).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..task.config(v)
        };
        let ck = train(&task.graph, &cfg, task.test.as_ref()).unwrap();
        let first = &ck.history[0].train;
        let last = &ck.history.last().unwrap().train;
        if v.trains() {
            assert_eq!(ck.epoch, 3);
            assert!(last.total < first.total, "{v}: {} -> {}", first.total, last.total);
        } else {
            assert_eq!(ck.history.len(), 1);
        }
    }
}

#[test]
fn loaded_graph_satisfies_invariants_across_seeds() {
    for seed in 0..10 {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&SyntheticSpec {
            classes: 2 + seed as usize % 5,
            shots: 1 + seed as usize % 3,
            dim: 4 + seed as usize,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .write(dir.path())
        .unwrap();
        load_task(&manifest, Variant::Full).unwrap().graph.validate().unwrap();
    }
}
