//! The task loop on tiny images where every class lights up its own block.

use ari_core::attack::AttackConfig;
use ari_core::data::{Dataset, Split, TaskSpec};
use ari_core::engine::{
    meta_train, softmax, train_task, update_memory, EngineConfig, FusionMode, Learner,
    RehearsalMemory,
};
use ari_core::nn::{ArchSpec, Model};
use ari_core::optim::LrSchedule;
use ari_core::{rng, Error};
use rand::Rng;

const SIDE: usize = 8;

fn blocks(classes: &[usize], per_class: usize, seed: u64) -> Dataset {
    let mut r = rng::rng(seed, &[]);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for &c in classes {
        for _ in 0..per_class {
            for p in 0..SIDE * SIDE {
                let lit = (p / SIDE) / 2 == c % 4 && (p % SIDE) / 4 == c / 4;
                images.push(if lit { 0.9 } else { r.gen_range(0.0..0.2) });
            }
            labels.push(c);
        }
    }
    Dataset::new(SIDE, images, labels, Split::Train).unwrap()
}

fn spec() -> ArchSpec {
    ArchSpec {
        side: SIDE,
        hidden: 12,
        ..ArchSpec::mlp2()
    }
}

fn cfg() -> EngineConfig {
    EngineConfig {
        epochs_per_task: 3,
        meta_epochs: 2,
        schedule: LrSchedule {
            initial: 0.1,
            factor: 0.5,
            milestones: vec![2],
        },
        batch_size: 16,
        memory_budget: 40,
        ..EngineConfig::default()
    }
}

fn attack() -> AttackConfig {
    AttackConfig {
        epsilon: 0.05,
        step_size: 0.02,
        ..AttackConfig::default()
    }
}

fn task(index: usize, classes: &[usize]) -> TaskSpec {
    TaskSpec {
        index,
        classes: classes.to_vec(),
    }
}

#[test]
fn single_task_weights_come_from_the_base_row() {
    let d1 = blocks(&[0, 1], 20, 1);
    let phi = Model::build(spec(), 2, 0).unwrap();
    let out = train_task(
        &[task(1, &[0, 1])],
        &d1,
        &RehearsalMemory::new(40, SIDE),
        &phi,
        &cfg(),
        &attack(),
    )
    .unwrap();
    assert_eq!(out.trace.len(), 3);
    let expected = softmax(&[1.0, 0.0]);
    for row in &out.trace {
        assert_eq!(row.weights, expected);
        assert!(row.max_offdiag_dif > 0.0);
    }
    assert_eq!(
        out.memory
            .class_counts()
            .values()
            .copied()
            .collect::<Vec<_>>(),
        vec![20, 20]
    );
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let d1 = blocks(&[0, 1], 10, 2);
    let phi = Model::build(spec(), 2, 3).unwrap();
    let c = EngineConfig {
        gamma: 1.0,
        epochs_per_task: 1,
        meta_epochs: 0,
        schedule: LrSchedule {
            initial: 0.0,
            factor: 0.5,
            milestones: vec![],
        },
        ..cfg()
    };
    let out = train_task(
        &[task(1, &[0, 1])],
        &d1,
        &RehearsalMemory::new(40, SIDE),
        &phi,
        &c,
        &attack(),
    )
    .unwrap();
    assert_eq!(out.model.snapshot(), phi.snapshot());
    assert_eq!(out.trace[0].max_offdiag_dif, 0.0);
}

#[test]
fn meta_training_without_epochs_returns_the_input() {
    let mem = update_memory(
        &RehearsalMemory::new(40, SIDE),
        &blocks(&[0, 1], 10, 4),
        &[0, 1],
        0,
    )
    .unwrap();
    let phi = Model::build(spec(), 2, 5).unwrap();
    let c = EngineConfig {
        meta_epochs: 0,
        ..cfg()
    };
    let (out, losses) = meta_train(&phi, &mem, &c, &attack(), 1).unwrap();
    assert_eq!(out.snapshot(), phi.snapshot());
    assert_eq!(losses.len(), 1);
    let empty = meta_train(&phi, &RehearsalMemory::new(40, SIDE), &cfg(), &attack(), 1);
    assert!(matches!(empty, Err(Error::Config(_))));
}

#[test]
fn meta_training_is_deterministic_and_lowers_memory_loss() {
    let train = blocks(&[0, 1, 2, 3], 20, 6);
    let tasks = [task(1, &[0, 1]), task(2, &[2, 3])];
    let c = EngineConfig {
        meta_epochs: 6,
        ..cfg()
    };
    let mut a = Learner::new(spec(), c.clone(), attack(), &tasks).unwrap();
    let mut b = Learner::new(spec(), c, attack(), &tasks).unwrap();
    for _ in 0..2 {
        let oa = a.learn_next(&train).unwrap();
        let ob = b.learn_next(&train).unwrap();
        assert_eq!(oa.model.snapshot(), ob.model.snapshot());
        assert_eq!(oa.meta_losses, ob.meta_losses);
    }
    let losses = &a.meta_losses()[1];
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "memory loss rose: {losses:?}");
    }
}

#[test]
fn parallel_phase_one_matches_serial() {
    let train = blocks(&[0, 1, 2, 3], 12, 7);
    let tasks = [task(1, &[0, 1]), task(2, &[2, 3])];
    let run = |parallel: bool| {
        let mut l =
            Learner::new(spec(), EngineConfig { parallel, ..cfg() }, attack(), &tasks).unwrap();
        l.learn_next(&train).unwrap();
        l.learn_next(&train).unwrap().model.snapshot()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn task_data_must_not_leak_across_tasks() {
    let phi = Model::build(spec(), 4, 0).unwrap();
    let tasks = [task(1, &[0, 1]), task(2, &[2, 3])];
    let leaky = blocks(&[1, 2], 5, 8);
    let err = train_task(
        &tasks,
        &leaky,
        &RehearsalMemory::new(40, SIDE),
        &phi,
        &cfg(),
        &attack(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    let future = update_memory(
        &RehearsalMemory::new(40, SIDE),
        &blocks(&[3], 5, 9),
        &[3],
        0,
    )
    .unwrap();
    let err = train_task(
        &tasks,
        &blocks(&[2, 3], 5, 8),
        &future,
        &phi,
        &cfg(),
        &attack(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn learner_evaluates_every_task_and_fusion_mode() {
    let train = blocks(&[0, 1, 2, 3], 20, 10);
    let test = blocks(&[0, 1, 2, 3], 10, 11);
    let tasks = [task(1, &[0, 1]), task(2, &[2, 3])];
    for fusion in FusionMode::ALL {
        let mut l =
            Learner::new(spec(), EngineConfig { fusion, ..cfg() }, attack(), &tasks).unwrap();
        let b = l.baseline(&test, 2).unwrap();
        assert!((0.0..=1.0).contains(&b));
        l.learn_next(&train).unwrap();
        l.learn_next(&train).unwrap();
        for j in 1..=2 {
            let (full, own) = l.evaluate_task(&test, j).unwrap();
            assert!(
                (0.0..=1.0).contains(&full) && own >= full,
                "{fusion}: {full} {own}"
            );
        }
        assert!(matches!(l.learn_next(&train), Err(Error::State(_))));
    }
}
