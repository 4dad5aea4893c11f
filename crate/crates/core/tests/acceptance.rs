//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 6 10`.

mod support;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use myops::losses::*;
use myops::metrics::*;
use myops::model::{
    cmff_fuse, fuse_max, model_forward, pathology_class, predict_study, Checkpoint, EncoderId,
    FeaturePyramid, MyoPsNet, NetConfig, ProbabilityMaps, ScenarioConfig, ScenarioName,
};
use myops::nn::Tensor;
use myops::phantom::{generate_dataset, PhantomParams};
use myops::study_io::{
    AugmentConfig, Availability, LabelMap, Mask, MultiSequenceStudy, SequenceId,
};
use myops::trainer::*;
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use support::*;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn loss_identities() -> Check {
    let mut r = rng(101);
    let w = LossWeights::default();
    let mut worst_inc: f64 = 0.0;
    let mut worst_con: f64 = 0.0;
    for _ in 0..50 {
        let label = random_label(&mut r, 8, 8);
        let (edema, scar) = (label.edema_mask(), label.scar_mask());
        // Scar probability vanishes outside GT edema; edema probability is 1 on GT scar.
        let ps = Array2::from_shape_fn((8, 8), |ix| {
            if edema[ix] {
                r.random_range(0.0..1.0)
            } else {
                0.0
            }
        });
        let pe = Array2::from_shape_fn((8, 8), |ix| {
            if scar[ix] {
                1.0
            } else {
                r.random_range(0.0..1.0)
            }
        });
        let maps = scar_edema_maps(ps, pe);
        let (ls, le, _) = inclusiveness_labeled(&maps, &label, &w).map_err(e2s)?;
        worst_inc = worst_inc.max(ls.abs()).max(le.abs());

        // Decoders whose myo/not-myo split equals the prior's.
        let mut maps = random_maps(&mut r, 8, 8);
        let prior = maps.mpc.clone();
        for psi in maps.decoders.values_mut() {
            for ((row, col), &myo) in prior
                .slice(s![myops::model::mpc_class::MYO, .., ..])
                .indexed_iter()
            {
                let t: f64 = r.random_range(0.0..1.0);
                let not_myo = 1.0 - myo;
                let u: f64 = r.random_range(0.0..1.0);
                psi[(pathology_class::HEALTHY_MYO, row, col)] = myo * t;
                psi[(pathology_class::PATHOLOGY, row, col)] = myo * (1.0 - t);
                psi[(pathology_class::BACKGROUND, row, col)] = not_myo * u;
                psi[(pathology_class::LV, row, col)] = not_myo * (1.0 - u);
            }
        }
        let (con, _) = consistency_loss(&maps, w.eps_denom).map_err(e2s)?;
        worst_con = worst_con.max(con.abs());
    }
    ensure(worst_inc < 1e-5, || {
        format!("inclusiveness {worst_inc:.3e} ≥ 1e-5")
    })?;
    ensure(worst_con < 1e-6, || {
        format!("consistency {worst_con:.3e} ≥ 1e-6")
    })?;
    Ok(format!(
        "max |inc| {worst_inc:.1e}, max |con| {worst_con:.1e}"
    ))
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn fd_array(x: &Array3<f64>, g: &Array3<f64>, f: impl Fn(&Array3<f64>) -> f64) -> f64 {
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for (idx, &a) in g.indexed_iter() {
        let v = x[idx];
        probe[idx] = v + FD_STEP;
        let up = f(&probe);
        probe[idx] = v - FD_STEP;
        let down = f(&probe);
        probe[idx] = v;
        worst = worst.max(rel(a, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn gradient_suite() -> Check {
    let mut r = rng(202);
    let w = LossWeights::default();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let v = worst.entry(k).or_insert(0.0);
        *v = v.max(e);
    };
    for _ in 0..20 {
        let psi = random_simplex(&mut r, 4, 4, 4);
        let label = random_label(&mut r, 4, 4);
        let y = one_hot(label.classes().mapv(|c| c.min(3)).view(), 4);
        let cw: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();

        let (_, g) = dice_loss(psi.view(), y.view(), 1e-6).map_err(e2s)?;
        note(
            "dice_loss",
            fd_array(&psi, &g, |p| dice_loss(p.view(), y.view(), 1e-6).unwrap().0),
        );
        let (_, g) = wce_loss(psi.view(), y.view(), &cw, 1e-7).map_err(e2s)?;
        note(
            "wce_loss",
            fd_array(&psi, &g, |p| {
                wce_loss(p.view(), y.view(), &cw, 1e-7).unwrap().0
            }),
        );

        let maps = random_maps(&mut r, 4, 4);
        let (_, g) = consistency_loss(&maps, w.eps_denom).map_err(e2s)?;
        note(
            "consistency_loss",
            max_fd_error(&maps, &g, FD_STEP, |m| {
                consistency_loss(m, w.eps_denom).unwrap().0
            }),
        );
        let (_, _, g) = inclusiveness_labeled(&maps, &label, &w).map_err(e2s)?;
        note(
            "inclusiveness_labeled",
            max_fd_error(&maps, &g, FD_STEP, |m| {
                let (s, e, _) = inclusiveness_labeled(m, &label, &w).unwrap();
                s + e
            }),
        );
        let (_, _, g) = inclusiveness_unlabeled(&maps, &w).map_err(e2s)?;
        note(
            "inclusiveness_unlabeled",
            max_fd_error(&maps, &g, FD_STEP, |m| {
                let (s, e, _) = inclusiveness_unlabeled(m, &w).unwrap();
                s + e
            }),
        );
    }
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.values().all(|&v| v < 1e-4), || {
        format!("relative error ≥ 1e-4: {detail}")
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    // Half-integers in [-3, 3) so ties are common.
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| r.random_range(-6i32..6) as f32 * 0.5)
            .collect(),
    )
}

fn random_pyramid(r: &mut ChaCha8Rng, shapes: &[[usize; 4]]) -> FeaturePyramid {
    shapes.iter().map(|&s| random_tensor(r, s)).collect()
}

fn brute_max(pyramids: &[&FeaturePyramid]) -> FeaturePyramid {
    (0..pyramids[0].len())
        .map(|l| {
            let shape = pyramids[0][l].shape();
            let data = (0..pyramids[0][l].numel())
                .map(|i| {
                    let mut m = f32::NEG_INFINITY;
                    for p in pyramids {
                        if p[l].data()[i] > m {
                            m = p[l].data()[i];
                        }
                    }
                    m
                })
                .collect();
            Tensor::from_vec(shape, data)
        })
        .collect()
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

fn fusion_oracle() -> Check {
    let mut r = rng(303);
    let mut checked = 0;
    for _ in 0..50 {
        let n_scales = r.random_range(1..=4);
        let (b, c0, h0) = (
            r.random_range(1..=2),
            r.random_range(1..=4),
            2usize.pow(n_scales as u32 - 1) * r.random_range(1..=3),
        );
        let shapes: Vec<[usize; 4]> = (0..n_scales)
            .map(|l| [b, c0 << l, h0 >> l, h0 >> l])
            .collect();
        let mut order = EncoderId::ALL.to_vec();
        order.shuffle(&mut r);
        let pyramids: BTreeMap<EncoderId, FeaturePyramid> = order
            .iter()
            .map(|&e| (e, random_pyramid(&mut r, &shapes)))
            .collect();
        for target in EncoderId::ALL {
            let others: Vec<&FeaturePyramid> = EncoderId::ALL
                .iter()
                .filter(|&&e| e != target)
                .map(|e| &pyramids[e])
                .collect();
            let fused = cmff_fuse(&pyramids, target).map_err(e2s)?;
            ensure(fused == brute_max(&others), || {
                format!("cmff_fuse differs from brute force for {target}")
            })?;
            for perm in permutations(&others) {
                ensure(fuse_max(&perm).map_err(e2s)? == fused, || {
                    format!("order changes fusion for {target}")
                })?;
            }
            checked += 1;
        }
        // A wider pool: every ordering of five pyramids gives the same max.
        let pool: Vec<FeaturePyramid> = (0..5).map(|_| random_pyramid(&mut r, &shapes)).collect();
        let refs: Vec<&FeaturePyramid> = pool.iter().collect();
        let expected = brute_max(&refs);
        for perm in permutations(&refs) {
            ensure(fuse_max(&perm).map_err(e2s)? == expected, || {
                "five-way fusion depends on order".into()
            })?;
        }
    }
    Ok(format!(
        "{checked} fusions exact, 50×120 orderings invariant"
    ))
}

// ---------------------------------------------------------------- 4

fn oracle_boundary(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = m.dim();
    let at = |r: i64, c: i64| {
        r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m[(r as usize, c as usize)]
    };
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(r, c)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dr, dc)| !at(r + dr, c + dc))
            {
                out.push((r, c));
            }
        }
    }
    out
}

fn oracle_hd(a: &Mask, b: &Mask, sp: [f64; 2]) -> Option<f64> {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let d = |p: (i64, i64), q: (i64, i64)| {
        (((p.0 - q.0) as f64 * sp[0]).powi(2) + ((p.1 - q.1) as f64 * sp[1]).powi(2)).sqrt()
    };
    let directed = |x: &[(i64, i64)], y: &[(i64, i64)]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&ba, &bb).max(directed(&bb, &ba)))
}

fn random_mask(r: &mut ChaCha8Rng, n: usize) -> Mask {
    let density = [0.0, 0.05, 0.3, 0.6, 0.95][r.random_range(0..5)];
    Array2::from_shape_fn((n, n), |_| r.random_bool(density))
}

fn metric_oracle() -> Check {
    let mut r = rng(404);
    let (mut hd_defined, mut dice_identity) = (0, 0);
    for i in 0..200 {
        let (a, b) = (random_mask(&mut r, 16), random_mask(&mut r, 16));
        let sp = [r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &g) in a.iter().zip(&b) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let c = confusion_metrics(&a, &b).map_err(e2s)?;
        ensure(
            (c.counts.tp, c.counts.fp, c.counts.tn, c.counts.fn_) == (tp, fp, tn, fn_),
            || format!("pair {i}: counts"),
        )?;
        let ratio = |n: u64, d: u64| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        ensure(
            c.acc == ratio(tp + tn, 256)
                && c.sen == ratio(tp, tp + fn_)
                && c.spe == ratio(tn, tn + fp),
            || format!("pair {i}: acc/sen/spe"),
        )?;
        let dice = dice_score(&a, &b).map_err(e2s)?;
        if 2 * tp + fp + fn_ > 0 {
            ensure(dice == 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, || {
                format!("pair {i}: Dice identity")
            })?;
            dice_identity += 1;
        } else {
            ensure(dice == 1.0, || format!("pair {i}: two empty masks"))?;
        }
        match oracle_hd(&a, &b, sp) {
            Some(d) => {
                ensure(hausdorff_mm(&a, &b, sp).map_err(e2s)? == d, || {
                    format!("pair {i}: HD")
                })?;
                hd_defined += 1;
            }
            None => ensure(hausdorff_mm(&a, &b, sp).is_err(), || {
                format!("pair {i}: HD on empty mask")
            })?,
        }
    }
    Ok(format!(
        "200 pairs exact ({dice_identity} with Dice identity, {hd_defined} with defined HD)"
    ))
}

// ---------------------------------------------------------------- 5

/// Scenario, scar decoders, edema decoders, a sufficient and an insufficient availability.
type Row = (
    ScenarioName,
    &'static [&'static str],
    &'static [&'static str],
    Availability,
    Availability,
);

fn scenario_structure() -> Check {
    let rows: [Row; 4] = [
        (
            ScenarioName::F,
            &["LGE_scar", "mappings_scar"],
            &["T2_edema"],
            Availability::full(),
            Availability::lge_triple(),
        ),
        (
            ScenarioName::L,
            &["LGE_scar"],
            &["T2_edema"],
            Availability::lge_triple(),
            Availability::mapping_quad(),
        ),
        (
            ScenarioName::M,
            &["mappings_scar"],
            &["T2_edema"],
            Availability::mapping_quad(),
            Availability::lge_triple(),
        ),
        (
            ScenarioName::Mix,
            &["LGE_scar", "mappings_scar"],
            &["T2_edema"],
            Availability::full(),
            Availability::new([SequenceId::C0, SequenceId::T2]).map_err(e2s)?,
        ),
    ];
    let params = PhantomParams {
        n_slices: 1,
        ..PhantomParams::for_size(32)
    };
    let ds = generate_dataset(1, 0, 0, &params, &[]).map_err(e2s)?;
    let study = &ds.train[0];
    let net_cfg = NetConfig {
        n_scales: 3,
        base_channels: 2,
        ..Default::default()
    };
    for (name, scar, edema, ok, short) in rows {
        let net = MyoPsNet::new(ScenarioConfig::new(name), net_cfg.clone(), 0).map_err(e2s)?;
        let names =
            |v: &[myops::model::DecoderId]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>();
        ensure(
            names(&net.scenario().d_scar) == scar && names(&net.scenario().d_edema) == edema,
            || {
                format!(
                    "{name}: decoders {:?} / {:?}",
                    net.scenario().d_scar,
                    net.scenario().d_edema
                )
            },
        )?;
        let slice = &study.restricted_to(&ok).map_err(e2s)?.slices[0];
        let maps: ProbabilityMaps = model_forward(&net, slice).map_err(e2s)?;
        let produced: Vec<String> = maps.decoders.keys().map(|d| d.to_string()).collect();
        let mut expected: Vec<String> = scar.iter().chain(edema).map(|s| s.to_string()).collect();
        expected.sort();
        ensure(produced == expected, || {
            format!("{name}: forward produced {produced:?}")
        })?;
        let slice = &study.restricted_to(&short).map_err(e2s)?.slices[0];
        ensure(
            matches!(
                model_forward(&net, slice),
                Err(myops::Error::MissingSequence(_))
            ),
            || format!("{name}: accepted availability {short}"),
        )?;
    }
    // The mix network falls back to the branches the data supports.
    let mix = MyoPsNet::new(ScenarioConfig::new(ScenarioName::Mix), net_cfg, 0).map_err(e2s)?;
    for (avail, expected) in [
        (Availability::lge_triple(), vec!["LGE_scar", "T2_edema"]),
        (
            Availability::mapping_quad(),
            vec!["T2_edema", "mappings_scar"],
        ),
    ] {
        let slice = &study.restricted_to(&avail).map_err(e2s)?.slices[0];
        let produced: Vec<String> = model_forward(&mix, slice)
            .map_err(e2s)?
            .decoders
            .keys()
            .map(|d| d.to_string())
            .collect();
        let mut expected: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
        expected.sort();
        ensure(produced == expected, || {
            format!("mix on {avail}: {produced:?}")
        })?;
    }
    Ok("F, L, M and mix decoder sets exact; insufficient inputs rejected".into())
}

// ---------------------------------------------------------------- 6–8

/// Criterion 6's model and data, reused by criterion 10.
type Trained = (Checkpoint, Vec<MultiSequenceStudy>, (usize, usize));

/// Network and optimiser settings for the phantom experiments, chosen to fit
/// the time budgets on a single CPU core.
fn phantom_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_init: 3e-3,
        epochs,
        batch_size: 4,
        seed,
        net: NetConfig {
            n_scales: 4,
            base_channels: 8,
            ..Default::default()
        },
        augmentation: AugmentConfig::disabled(),
        ..Default::default()
    }
}

const CROP: (usize, usize) = (64, 64);

fn scar_edema(report: &EvaluationReport) -> (f64, f64) {
    (
        report.summary.scar.dice.mean,
        report.summary.edema.dice.mean,
    )
}

fn overfit(keep: &mut Option<Trained>) -> Check {
    let params = PhantomParams {
        rng_seed: 6,
        ..Default::default()
    };
    let ds = generate_dataset(4, 0, 0, &params, &[]).map_err(e2s)?;
    let out = train(
        &ds.train,
        &[],
        ScenarioConfig::new(ScenarioName::F),
        &phantom_config(60, 0),
    )
    .map_err(e2s)?;
    let (scar, edema) =
        scar_edema(&evaluate_net(&out.last.net, &ds.train, CROP, true).map_err(e2s)?);
    let detail = format!("train scar Dice {scar:.3}, edema Dice {edema:.3}");
    *keep = Some((out.last, ds.train, CROP));
    ensure(scar >= 0.80 && edema >= 0.85, || {
        format!("{detail} (need ≥ 0.80 / ≥ 0.85)")
    })?;
    Ok(detail)
}

const SEEDS: [u64; 3] = [0, 1, 2];
const GENERALIZATION_EPOCHS: usize = 20;

fn generalization_data() -> Result<myops::phantom::PhantomDataset, String> {
    let params = PhantomParams {
        rng_seed: 7,
        ..Default::default()
    };
    generate_dataset(25, 0, 20, &params, &[]).map_err(e2s)
}

fn test_scar_dice(
    train_set: &[MultiSequenceStudy],
    test: &[MultiSequenceStudy],
    name: ScenarioName,
    seed: u64,
) -> Result<f64, String> {
    let scenario = ScenarioConfig::new(name);
    let train_set: Vec<_> = train_set.to_vec();
    let out = train(
        &train_set,
        &[],
        scenario,
        &phantom_config(GENERALIZATION_EPOCHS, seed),
    )
    .map_err(e2s)?;
    Ok(scar_edema(&evaluate_net(&out.last.net, test, CROP, true).map_err(e2s)?).0)
}

fn restricted(
    studies: &[MultiSequenceStudy],
    avail: &Availability,
) -> Result<Vec<MultiSequenceStudy>, String> {
    studies
        .iter()
        .map(|s| s.restricted_to(avail).map_err(e2s))
        .collect()
}

fn ordering() -> Check {
    let ds = generalization_data()?;
    let mut means = BTreeMap::new();
    for (name, avail) in [
        (ScenarioName::F, Availability::full()),
        (ScenarioName::L, Availability::lge_triple()),
        (ScenarioName::M, Availability::mapping_quad()),
    ] {
        let (tr, te) = (
            restricted(&ds.train, &avail)?,
            restricted(&ds.test, &avail)?,
        );
        let mut per_seed = Vec::new();
        for seed in SEEDS {
            per_seed.push(test_scar_dice(&tr, &te, name, seed)?);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        means.insert(name.as_str(), (mean, per_seed));
    }
    let (f, l, m) = (means["F"].0, means["L"].0, means["M"].0);
    let detail = means
        .iter()
        .map(|(k, (mean, v))| format!("{k} {mean:.3} {v:.3?}"))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(f >= l - 0.02 && l >= m - 0.02, || {
        format!("ordering violated: {detail}")
    })?;
    Ok(format!("mean test scar Dice {detail}"))
}

fn semi_supervised() -> Check {
    let ds = generalization_data()?;
    let labeled: Vec<_> = ds.train[..10].to_vec();
    let mut semi_set = labeled.clone();
    semi_set.extend(ds.train[10..].iter().map(|s| s.clone().without_labels()));
    let (mut semi, mut sup) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        semi.push(test_scar_dice(&semi_set, &ds.test, ScenarioName::F, seed)?);
        sup.push(test_scar_dice(&labeled, &ds.test, ScenarioName::F, seed)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&semi), mean(&sup));
    let detail = format!("semi {a:.3} {semi:.3?}; labeled-only {b:.3} {sup:.3?}");
    ensure(a >= b - 0.01, || {
        format!("semi-supervised below floor: {detail}")
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn determinism() -> Check {
    let params = PhantomParams {
        n_slices: 2,
        rng_seed: 9,
        ..PhantomParams::for_size(32)
    };
    let run = || -> Result<(String, String, TrainOutcome), String> {
        let ds = generate_dataset(3, 1, 0, &params, &[]).map_err(e2s)?;
        let mut train_set = ds.train.clone();
        train_set[2] = train_set[2].clone().without_labels();
        let cfg = TrainConfig {
            lr_init: 3e-3,
            epochs: 3,
            batch_size: 2,
            seed: 11,
            net: NetConfig {
                n_scales: 3,
                base_channels: 4,
                ..Default::default()
            },
            crop_size: (32, 32),
            augmentation: AugmentConfig::default(),
            ..Default::default()
        };
        let out = train(
            &train_set,
            &ds.val,
            ScenarioConfig::new(ScenarioName::F),
            &cfg,
        )
        .map_err(e2s)?;
        Ok((ds.hash(), out.last.sha256().map_err(e2s)?, out))
    };
    let (ha, ca, a) = run()?;
    let (hb, cb, b) = run()?;
    let dir = tempfile::tempdir().map_err(e2s)?;
    let (la, lb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_log(&la, &a.log).map_err(e2s)?;
    write_log(&lb, &b.log).map_err(e2s)?;
    let same_log = std::fs::read(&la).map_err(e2s)? == std::fs::read(&lb).map_err(e2s)?;
    ensure(ha == hb, || "dataset hashes differ".into())?;
    ensure(ca == cb, || {
        format!("final checkpoints differ: {ca} vs {cb}")
    })?;
    ensure(
        a.best.sha256().map_err(e2s)? == b.best.sha256().map_err(e2s)?,
        || "best checkpoints differ".into(),
    )?;
    ensure(same_log, || "logs differ".into())?;
    Ok(format!(
        "checkpoint {}…, {} log lines identical",
        &ca[..12],
        a.log.len()
    ))
}

// ---------------------------------------------------------------- 10

fn ensemble_identity(trained: &Option<Trained>) -> Check {
    let (ck, studies, crop) = match trained {
        Some(t) => t.clone(),
        None => {
            let params = PhantomParams {
                n_slices: 2,
                rng_seed: 10,
                ..PhantomParams::for_size(32)
            };
            let ds = generate_dataset(2, 0, 0, &params, &[]).map_err(e2s)?;
            let cfg = TrainConfig {
                crop_size: (32, 32),
                net: NetConfig {
                    n_scales: 3,
                    base_channels: 2,
                    ..Default::default()
                },
                ..phantom_config(2, 0)
            };
            let out =
                train(&ds.train, &[], ScenarioConfig::new(ScenarioName::F), &cfg).map_err(e2s)?;
            (out.last, ds.train, (32, 32))
        }
    };
    let mut pixels = 0;
    for study in &studies {
        let single = predict_study(&ck.net, study, crop, true).map_err(e2s)?;
        let voted = ensemble_predict(&[&ck, &ck, &ck], study, crop, true).map_err(e2s)?;
        let copies: Vec<&LabelMap> = vec![&single[0]; 3];
        ensure(majority_vote(&copies).map_err(e2s)? == single[0], || {
            "vote of identical labels changed them".into()
        })?;
        ensure(voted == single, || {
            format!("{}: ensemble differs from single model", study.study_id)
        })?;
        pixels += single.iter().map(|l| l.dim().0 * l.dim().1).sum::<usize>();
    }
    Ok(format!(
        "{pixels} pixels identical over {} studies",
        studies.len()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut trained = None;
    let mut failures = 0;
    let mut report =
        |n: usize, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Check| {
            if !selected(n) {
                return;
            }
            let start = Instant::now();
            let result = f();
            let took = start.elapsed();
            let result = match (result, budget) {
                (Ok(d), Some(b)) if took > b => Err(format!("{d}; took {took:.1?}, budget {b:?}")),
                (r, _) => r,
            };
            let (tag, detail) = match &result {
                Ok(d) => ("PASS", d),
                Err(d) => ("FAIL", d),
            };
            println!(
                "criterion {n:>2} {tag} {name} [{:.1} s] {detail}",
                took.as_secs_f64()
            );
            if result.is_err() {
                failures += 1;
            }
        };
    report(
        1,
        "loss identities",
        Some(Duration::from_secs(5)),
        &mut loss_identities,
    );
    report(2, "gradient suite", minutes(1), &mut gradient_suite);
    report(
        3,
        "fusion oracle",
        Some(Duration::from_secs(5)),
        &mut fusion_oracle,
    );
    report(
        4,
        "metric oracle",
        Some(Duration::from_secs(30)),
        &mut metric_oracle,
    );
    report(
        5,
        "scenario structure",
        Some(Duration::from_secs(5)),
        &mut scenario_structure,
    );
    report(6, "phantom overfit", minutes(15), &mut || {
        overfit(&mut trained)
    });
    report(7, "generalization ordering", minutes(90), &mut ordering);
    report(
        8,
        "semi-supervised benefit",
        minutes(90),
        &mut semi_supervised,
    );
    report(9, "determinism", None, &mut determinism);
    report(10, "ensemble identity", None, &mut || {
        ensemble_identity(&trained)
    });
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
