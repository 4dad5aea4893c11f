mod support;

use myops::model::{EncoderId, MyoPsNet, NetConfig, NetInput, ScenarioConfig, ScenarioName};
use myops::nn::Tape;
use myops::phantom::{generate_dataset, PhantomParams};
use myops::study_io::{preprocess_slice, AugmentConfig, Availability};
use myops::trainer::*;
use myops::Error;

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr_init: 3e-3,
        epochs,
        batch_size: 2,
        seed: 5,
        net: NetConfig {
            n_scales: 3,
            base_channels: 2,
            ..Default::default()
        },
        crop_size: (32, 32),
        augmentation: AugmentConfig::default(),
        ..Default::default()
    }
}

fn small_params(seed: u64) -> PhantomParams {
    PhantomParams {
        n_slices: 2,
        rng_seed: seed,
        ..PhantomParams::for_size(32)
    }
}

fn step_kinds(log: &[LogRecord]) -> (usize, usize) {
    log.iter().fold((0, 0), |(l, u), r| match r {
        LogRecord::Step { labeled: true, .. } => (l + 1, u),
        LogRecord::Step { labeled: false, .. } => (l, u + 1),
        _ => (l, u),
    })
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = generate_dataset(3, 1, 0, &small_params(1), &[]).unwrap();
    let c = tiny_config(2);
    let f = ScenarioConfig::new(ScenarioName::F);
    let a = train(&ds.train, &ds.val, f.clone(), &c).unwrap();
    let b = train(&ds.train, &ds.val, f.clone(), &c).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.sha256().unwrap(), b.best.sha256().unwrap());
    assert_eq!(a.last.sha256().unwrap(), b.last.sha256().unwrap());
    let other = train(&ds.train, &ds.val, f, &TrainConfig { seed: 6, ..c }).unwrap();
    assert_ne!(other.last.sha256().unwrap(), a.last.sha256().unwrap());
}

#[test]
fn both_loss_paths_run_only_with_unlabeled_data() {
    let ds = generate_dataset(4, 0, 0, &small_params(2), &[]).unwrap();
    let c = tiny_config(1);
    let f = ScenarioConfig::new(ScenarioName::F);
    let sup = train(&ds.train, &[], f.clone(), &c).unwrap();
    assert_eq!(step_kinds(&sup.log).1, 0);

    let mut mixed = ds.train.clone();
    mixed[3] = mixed[3].clone().without_labels();
    let semi = train(&mixed, &[], f, &c).unwrap();
    let (l, u) = step_kinds(&semi.log);
    assert!(l > 0 && u > 0);
    for r in &semi.log {
        if let LogRecord::Step {
            labeled: false,
            report,
            ..
        } = r
        {
            assert!(report.seg.is_none());
        }
    }
    // Without validation data the last epoch is kept.
    assert_eq!(sup.best.epoch, 0);
}

#[test]
fn best_checkpoint_follows_validation_dice() {
    let ds = generate_dataset(2, 1, 0, &small_params(3), &[]).unwrap();
    let out = train(
        &ds.train,
        &ds.val,
        ScenarioConfig::new(ScenarioName::L),
        &tiny_config(3),
    )
    .unwrap();
    let dice: Vec<f64> = out
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch { val_dice, .. } => *val_dice,
            _ => None,
        })
        .collect();
    assert_eq!(dice.len(), 3);
    let best = dice.iter().copied().fold(f64::MIN, f64::max);
    assert_eq!(out.best_val_dice, Some(best));
    assert_eq!(dice[out.best.epoch], best);
}

#[test]
fn log_lines_are_json_with_schedule() {
    let ds = generate_dataset(2, 0, 0, &small_params(4), &[]).unwrap();
    let c = TrainConfig {
        cycle_epochs: 2,
        ..tiny_config(3)
    };
    let out = train(&ds.train, &[], ScenarioConfig::new(ScenarioName::M), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    write_log(&path, &out.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] == "step" {
            let e = v["epoch"].as_u64().unwrap() as usize;
            assert_eq!(v["lr"].as_f64().unwrap(), lr_at(e, &c));
            assert!(v["report"]["total"].is_number());
        }
    }
    assert_eq!(lr_at(2, &c), c.lr_init);
}

#[test]
fn mix_rejects_unsupported_patterns() {
    let params = small_params(5);
    let odd = Availability::new([
        myops::study_io::SequenceId::C0,
        myops::study_io::SequenceId::T2,
    ])
    .unwrap();
    let ds = generate_dataset(2, 0, 0, &params, &[(Availability::full(), 1), (odd, 1)]).unwrap();
    assert!(matches!(
        train_mix(&ds.train, &[], &tiny_config(1)),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn lge_triple_batch_leaves_mapping_encoder_without_gradient() {
    let ds = generate_dataset(
        1,
        0,
        0,
        &small_params(6),
        &[(Availability::lge_triple(), 1)],
    )
    .unwrap();
    let cfg = tiny_config(1);
    let net = MyoPsNet::new(ScenarioConfig::new(ScenarioName::Mix), cfg.net.clone(), 0).unwrap();
    let slice = preprocess_slice(&ds.train[0].slices[0], (32, 32))
        .unwrap()
        .0;
    let input = NetInput::from_slices(&[&slice]).unwrap();
    let mut tape = Tape::new(net.params());
    let vars = net.forward(&mut tape, &input).unwrap();
    assert!(!vars.encoders.contains_key(&EncoderId::Mappings));
    let seeds = vars
        .decoders
        .values()
        .map(|v| (*v, myops::nn::Tensor::full(tape.value(*v).shape(), 1.0)))
        .collect();
    let grads = tape.backward(seeds);
    for id in net.params().ids() {
        let name = net.params().name(id);
        if name.contains("mappings") {
            assert!(grads[id.index()].is_none(), "{name} received a gradient");
        } else if name.starts_with("enc.LGE") {
            assert!(grads[id.index()].is_some(), "{name} has no gradient");
        }
    }
}

#[test]
fn mix_training_updates_every_branch() {
    let mix = [
        (Availability::full(), 1),
        (Availability::lge_triple(), 1),
        (Availability::mapping_quad(), 1),
    ];
    let ds = generate_dataset(3, 0, 0, &small_params(7), &mix).unwrap();
    let c = tiny_config(1);
    let out = train_mix(&ds.train, &[], &c).unwrap();
    let init = MyoPsNet::new(
        ScenarioConfig::new(ScenarioName::Mix),
        c.net.clone(),
        c.seed,
    )
    .unwrap();
    for prefix in [
        "enc.LGE",
        "enc.T2",
        "enc.mappings",
        "dec.LGE_scar",
        "dec.mappings_scar",
        "dec.T2_edema",
    ] {
        let changed = init.params().ids().any(|id| {
            init.params().name(id).starts_with(prefix)
                && init.params().get(id) != out.last.net.params().get(id)
        });
        assert!(changed, "{prefix} was never updated");
    }
    for avail in [
        Availability::full(),
        Availability::lge_triple(),
        Availability::mapping_quad(),
    ] {
        let study = ds.train[0].restricted_to(&avail).unwrap();
        evaluate_net(&out.last.net, &[study], (32, 32), true).unwrap();
    }
}

#[test]
fn exploding_rate_aborts_with_the_offending_report() {
    let ds = generate_dataset(2, 0, 0, &small_params(8), &[]).unwrap();
    let c = TrainConfig {
        lr_init: 1e30,
        ..tiny_config(5)
    };
    match train(&ds.train, &[], ScenarioConfig::new(ScenarioName::L), &c) {
        Err(Error::NumericFailure { report, .. }) => {
            let v: serde_json::Value = serde_json::from_str(&report).unwrap();
            assert!(v.get("total").is_some());
        }
        other => panic!(
            "expected a numeric failure, got {:?}",
            other.map(|o| o.log.len())
        ),
    }
}

#[test]
fn ensemble_of_identical_members_equals_single_model() {
    let ds = generate_dataset(2, 0, 1, &small_params(9), &[]).unwrap();
    let out = train(
        &ds.train,
        &[],
        ScenarioConfig::new(ScenarioName::F),
        &tiny_config(1),
    )
    .unwrap();
    let single = myops::model::predict_study(&out.best.net, &ds.test[0], (32, 32), true).unwrap();
    let c = &out.best;
    assert_eq!(
        ensemble_predict(&[c, c, c], &ds.test[0], (32, 32), true).unwrap(),
        single
    );
    assert_eq!(
        ensemble_predict(&[c], &ds.test[0], (32, 32), true).unwrap(),
        single
    );

    let other = train(
        &ds.train,
        &[],
        ScenarioConfig::new(ScenarioName::L),
        &tiny_config(1),
    )
    .unwrap();
    assert!(matches!(
        ensemble_predict(&[c, &other.best], &ds.test[0], (32, 32), true),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn ensemble_members_differ_by_seed() {
    let ds = generate_dataset(2, 0, 0, &small_params(10), &[]).unwrap();
    let e = EnsembleConfig {
        member_seeds: vec![1, 2],
    };
    let members = train_ensemble(
        &ds.train,
        &[],
        ScenarioConfig::new(ScenarioName::M),
        &tiny_config(1),
        &e,
    )
    .unwrap();
    assert_eq!(members.len(), 2);
    assert_eq!((members[0].best.seed, members[1].best.seed), (1, 2));
    assert_ne!(
        members[0].best.sha256().unwrap(),
        members[1].best.sha256().unwrap()
    );
}
