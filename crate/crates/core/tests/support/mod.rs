//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use myops::losses::MapGrads;
use myops::model::{
    DecoderId, EncoderId, Pathology, ProbabilityMaps, ScenarioConfig, ScenarioName,
};
use myops::study_io::LabelMap;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random per-pixel probability simplex, bounded away from 0.
pub fn random_simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut a = Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.05..1.0));
    let sums = a.sum_axis(Axis(0));
    for mut lane in a.axis_iter_mut(Axis(0)) {
        lane /= &sums;
    }
    a
}

/// Random maps for every decoder of scenario F.
pub fn random_maps(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ProbabilityMaps {
    let decoders = ScenarioConfig::new(ScenarioName::F)
        .decoders()
        .map(|d| (d, random_simplex(rng, 4, h, w)))
        .collect();
    ProbabilityMaps {
        mpc: random_simplex(rng, 3, h, w),
        decoders,
    }
}

/// Random nested label: every class 0..=4 uniformly.
pub fn random_label(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    LabelMap::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0..=4u8))).unwrap()
}

pub fn scar_edema_maps(scar: Array2<f64>, edema: Array2<f64>) -> ProbabilityMaps {
    let (h, w) = scar.dim();
    let dec = |p: &Array2<f64>| {
        Array3::from_shape_fn((4, h, w), |(c, r, col)| match c {
            3 => p[(r, col)],
            2 => 1.0 - p[(r, col)],
            _ => 0.0,
        })
    };
    ProbabilityMaps {
        mpc: Array3::from_elem((3, h, w), 1.0 / 3.0),
        decoders: BTreeMap::from([
            (DecoderId::new(EncoderId::Lge, Pathology::Scar), dec(&scar)),
            (DecoderId::new(EncoderId::T2, Pathology::Edema), dec(&edema)),
        ]),
    }
}

/// Central-difference check of `grads` against `f` over every map entry.
/// Returns the largest relative error, with denominator
/// max(|analytic|, |numeric|, 1e-6).
pub fn max_fd_error(
    maps: &ProbabilityMaps,
    grads: &MapGrads,
    h: f64,
    f: impl Fn(&ProbabilityMaps) -> f64,
) -> f64 {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut probe = maps.clone();
    for (idx, &g) in grads.mpc.indexed_iter() {
        let v = maps.mpc[idx];
        probe.mpc[idx] = v + h;
        let up = f(&probe);
        probe.mpc[idx] = v - h;
        let down = f(&probe);
        probe.mpc[idx] = v;
        worst = worst.max(rel(g, (up - down) / (2.0 * h)));
    }
    for (d, gd) in &grads.decoders {
        for (idx, &g) in gd.indexed_iter() {
            let v = maps.decoders[d][idx];
            probe.decoders.get_mut(d).unwrap()[idx] = v + h;
            let up = f(&probe);
            probe.decoders.get_mut(d).unwrap()[idx] = v - h;
            let down = f(&probe);
            probe.decoders.get_mut(d).unwrap()[idx] = v;
            worst = worst.max(rel(g, (up - down) / (2.0 * h)));
        }
    }
    worst
}
