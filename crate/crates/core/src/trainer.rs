//! Optimization loop: Adam with L2 weight decay, cosine annealing with warm
//! restarts, homogeneous mini-batches mixing labelled and unlabelled data,
//! validation-based checkpoint selection and seed-bagged ensembles.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, ClassWeights, LossReport, LossWeights};
use crate::metrics::{evaluate_study, EvaluationReport};
use crate::model::{
    predict_study, Checkpoint, MyoPsNet, NetConfig, NetInput, ProbabilityMaps, ScenarioConfig,
};
use crate::nn::{ParamStore, Tape, Tensor};
use crate::study_io::{
    augment, preprocess_slice, AugmentConfig, LabelMap, MultiSequenceStudy, SequenceId, Slice,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    /// Epochs per cosine cycle; the rate restarts at every multiple.
    pub cycle_epochs: usize,
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub crop_size: (usize, usize),
    pub augmentation: AugmentConfig,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    /// Add scar outside predicted edema to edema when assembling labels.
    pub repair_nesting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            lr_min: 0.0,
            cycle_epochs: 20,
            weight_decay: 5e-4,
            adam: AdamConfig::default(),
            epochs: 60,
            batch_size: 8,
            seed: 0,
            net: NetConfig::default(),
            loss: LossWeights::default(),
            crop_size: (64, 64),
            augmentation: AugmentConfig::default(),
            val_every: 1,
            repair_nesting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr_init > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad("learning rates need 0 <= lr_min <= lr_init and lr_init > 0");
        }
        if self.cycle_epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return bad("cycle length, batch size and validation interval must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        self.net.validate()?;
        self.net.check_input_size(self.crop_size)?;
        self.loss.validate()?;
        self.augmentation.validate()
    }
}

/// Cosine-annealed learning rate with a restart every `cycle_epochs`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let phase = (epoch % config.cycle_epochs) as f64 / config.cycle_epochs as f64;
    config.lr_min + (config.lr_init - config.lr_min) / 2.0 * (1.0 + (PI * phase).cos())
}

/// Adam with L2 weight decay added to the gradient. Parameters without a
/// gradient in a step keep their value, moments and step count.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
        weight_decay: f64,
    ) {
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        for id in params.ids() {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            self.t[i] += 1;
            let c1 = 1.0 - b1.powi(self.t[i]);
            let c2 = 1.0 - b2.powi(self.t[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k] as f64 + weight_decay * w[k] as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                w[k] -= (lr * (mk / c1) / ((vk / c2).sqrt() + eps)) as f32;
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        labeled: bool,
        batch_size: usize,
        report: LossReport,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        steps: usize,
        mean_total: f64,
        /// Mean over validation studies of (scar Dice + edema Dice) / 2.
        val_dice: Option<f64>,
    },
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the best validation epoch, or the last epoch without
    /// validation data.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_val_dice: Option<f64>,
    pub log: Vec<LogRecord>,
}

type GroupKey = (Vec<SequenceId>, bool);

fn group_key(s: &Slice) -> GroupKey {
    (s.images.keys().copied().collect(), s.label.is_some())
}

/// Seed-shuffled batches, each drawn from a single (availability, labelled)
/// group; the batch order interleaves groups in proportion to their size.
pub fn plan_batches(slices: &[Slice], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, s) in slices.iter().enumerate() {
        groups.entry(group_key(s)).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut idx in groups.into_values() {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Mean over studies of (scar Dice + edema Dice) / 2.
pub fn mean_pathology_dice(report: &EvaluationReport) -> f64 {
    let s = &report.summary;
    (s.scar.dice.mean + s.edema.dice.mean) / 2.0
}

/// Predicts and scores labelled studies.
pub fn evaluate_net(
    net: &MyoPsNet,
    studies: &[MultiSequenceStudy],
    crop_size: (usize, usize),
    repair_nesting: bool,
) -> Result<EvaluationReport> {
    let mut reports = Vec::with_capacity(studies.len());
    for study in studies {
        let gt: Vec<LabelMap> = study
            .slices
            .iter()
            .map(|s| s.label.clone().ok_or(Error::MissingLabel))
            .collect::<Result<_>>()?;
        let pred = predict_study(net, study, crop_size, repair_nesting)?;
        reports.push(evaluate_study(
            &study.study_id,
            &pred,
            &gt,
            study.pixel_spacing_mm,
        )?);
    }
    EvaluationReport::new(reports)
}

fn check_training_data(train: &[MultiSequenceStudy], scenario: &ScenarioConfig) -> Result<()> {
    if train.iter().all(|s| s.slices.is_empty()) {
        return Err(Error::InvalidConfig("training split has no slices".into()));
    }
    for s in train {
        s.validate()?;
        if scenario.is_mix() {
            ScenarioConfig::check_mix_pattern(&s.availability)?;
        }
        scenario.active_decoders(&s.availability)?;
    }
    Ok(())
}

/// One optimization step on a homogeneous batch; returns the batch-mean
/// loss report.
fn train_step(
    net: &mut MyoPsNet,
    adam: &mut Adam,
    batch: &[&Slice],
    lr: f64,
    config: &TrainConfig,
    (epoch, step): (usize, usize),
) -> Result<LossReport> {
    let input = NetInput::from_slices(batch)?;
    let n = batch.len();
    let (grads, report) = {
        let mut tape = Tape::new(net.params());
        let vars = net.forward(&mut tape, &input)?;
        let mpc = tape.value(vars.mpc);
        let decs: BTreeMap<_, _> = vars
            .decoders
            .iter()
            .map(|(d, v)| (*d, tape.value(*v)))
            .collect();
        let labels: Vec<&LabelMap> = batch.iter().filter_map(|s| s.label.as_ref()).collect();
        let class_weights = (labels.len() == n).then(|| ClassWeights::from_labels(&labels));
        let mut seed_mpc = Tensor::zeros(mpc.shape());
        let mut seed_dec: BTreeMap<_, _> = decs
            .iter()
            .map(|(d, t)| (*d, Tensor::zeros(t.shape())))
            .collect();
        let mut reports = Vec::with_capacity(n);
        let scale = 1.0 / n as f64;
        for (i, slice) in batch.iter().enumerate() {
            let maps = ProbabilityMaps::from_batch(mpc, &decs, i);
            let (r, g) = total_loss(
                &maps,
                slice.label.as_ref(),
                &config.loss,
                class_weights.as_ref(),
            )?;
            reports.push(r);
            for (dst, src) in seed_mpc.sample_mut(i).iter_mut().zip(g.mpc.iter()) {
                *dst = (src * scale) as f32;
            }
            for (d, gd) in &g.decoders {
                let t = seed_dec.get_mut(d).expect("same decoders");
                for (dst, src) in t.sample_mut(i).iter_mut().zip(gd.iter()) {
                    *dst = (src * scale) as f32;
                }
            }
        }
        let report = LossReport::mean(&reports).expect("nonempty batch");
        if !report.is_finite() {
            return Err(Error::NumericFailure {
                epoch,
                step,
                report: serde_json::to_string(&report)?,
            });
        }
        let mut seeds = vec![(vars.mpc, seed_mpc)];
        seeds.extend(
            vars.decoders
                .iter()
                .map(|(d, v)| (*v, seed_dec.remove(d).expect("seeded"))),
        );
        (tape.backward(seeds), report)
    };
    adam.step(net.params_mut(), &grads, lr, config.weight_decay);
    Ok(report)
}

/// Trains a network for `scenario`.
///
/// Unlabelled training studies contribute consistency and prediction-only
/// inclusiveness terms; labelled ones the full objective. `observer` sees
/// every log record as it is produced.
pub fn train_with_observer(
    train: &[MultiSequenceStudy],
    val: &[MultiSequenceStudy],
    scenario: ScenarioConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_training_data(train, &scenario)?;
    let mut net = MyoPsNet::new(scenario, config.net.clone(), config.seed)?;
    let mut adam = Adam::new(net.params(), config.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut slices = Vec::new();
    for study in train {
        for s in &study.slices {
            slices.push(preprocess_slice(s, config.crop_size)?.0);
        }
    }

    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| {
        observer(&r);
        log.push(r);
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let batches = plan_batches(&slices, config.batch_size, &mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let augmented: Vec<Slice> = idx
                .iter()
                .map(|&i| augment(&slices[i], &config.augmentation, &mut rng))
                .collect();
            let refs: Vec<&Slice> = augmented.iter().collect();
            let report = train_step(&mut net, &mut adam, &refs, lr, config, (epoch, step))?;
            sum += report.total;
            emit(
                LogRecord::Step {
                    epoch,
                    step,
                    lr,
                    labeled: report.labeled,
                    batch_size: refs.len(),
                    report,
                },
                &mut log,
            );
            step += 1;
        }
        let validate =
            !val.is_empty() && ((epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs);
        let val_dice = if validate {
            let report = evaluate_net(&net, val, config.crop_size, config.repair_nesting)?;
            Some(mean_pathology_dice(&report))
        } else {
            None
        };
        if let Some(d) = val_dice {
            if best.as_ref().is_none_or(|(b, _)| d > *b) {
                best = Some((
                    d,
                    Checkpoint {
                        net: net.clone(),
                        epoch,
                        seed: config.seed,
                    },
                ));
            }
        }
        emit(
            LogRecord::Epoch {
                epoch,
                lr,
                steps: batches.len(),
                mean_total: sum / batches.len().max(1) as f64,
                val_dice,
            },
            &mut log,
        );
    }
    let last = Checkpoint {
        net,
        epoch: config.epochs.saturating_sub(1),
        seed: config.seed,
    };
    let (best_val_dice, best) = match best {
        Some((d, c)) => (Some(d), c),
        None => (None, last.clone()),
    };
    Ok(TrainOutcome {
        best,
        last,
        best_val_dice,
        log,
    })
}

pub fn train(
    train: &[MultiSequenceStudy],
    val: &[MultiSequenceStudy],
    scenario: ScenarioConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(train, val, scenario, config, &mut |_| {})
}

/// Trains the unified model on studies of mixed availability. Every study
/// must match one of the supported input patterns.
pub fn train_mix(
    train_studies: &[MultiSequenceStudy],
    val: &[MultiSequenceStudy],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train(
        train_studies,
        val,
        ScenarioConfig::new(crate::model::ScenarioName::Mix),
        config,
    )
}

/// Member seeds of a bagged ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub member_seeds: Vec<u64>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.member_seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "an ensemble needs at least one member".into(),
            ));
        }
        let mut seen = self.member_seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.member_seeds.len() {
            return Err(Error::InvalidConfig(
                "ensemble member seeds must be distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn n_members(&self) -> usize {
        self.member_seeds.len()
    }
}

/// Trains one member per seed, differing only in initialization and batch
/// order.
pub fn train_ensemble(
    train_studies: &[MultiSequenceStudy],
    val: &[MultiSequenceStudy],
    scenario: ScenarioConfig,
    config: &TrainConfig,
    ensemble: &EnsembleConfig,
) -> Result<Vec<TrainOutcome>> {
    ensemble.validate()?;
    ensemble
        .member_seeds
        .iter()
        .map(|&seed| {
            let c = TrainConfig {
                seed,
                ..config.clone()
            };
            train(train_studies, val, scenario.clone(), &c)
        })
        .collect()
}

/// Per-pixel majority vote over the LV, myocardium, edema and scar masks of
/// several label maps. A tie counts as present.
pub fn majority_vote(labels: &[&LabelMap]) -> Result<LabelMap> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidConfig("majority vote of no predictions".into()))?;
    let dim = first.dim();
    if labels.iter().any(|l| l.dim() != dim) {
        return Err(Error::shape("voted label maps differ in size"));
    }
    let n = labels.len();
    let vote = |mask: fn(&LabelMap) -> crate::study_io::Mask| {
        let mut votes = ndarray::Array2::<usize>::zeros(dim);
        for l in labels {
            votes.zip_mut_with(&mask(l), |v, &m| *v += usize::from(m));
        }
        votes.mapv(|v| 2 * v >= n)
    };
    LabelMap::from_masks(
        &vote(LabelMap::lv_mask),
        &vote(LabelMap::myo_mask),
        &vote(LabelMap::edema_mask),
        &vote(LabelMap::scar_mask),
    )
}

/// Majority-vote prediction of a study by several checkpoints of one
/// scenario.
pub fn ensemble_predict(
    members: &[&Checkpoint],
    study: &MultiSequenceStudy,
    crop_size: (usize, usize),
    repair_nesting: bool,
) -> Result<Vec<LabelMap>> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidConfig("an ensemble needs at least one member".into()))?;
    if let Some(m) = members
        .iter()
        .find(|m| m.net.scenario() != first.net.scenario())
    {
        return Err(Error::ConfigMismatch(format!(
            "ensemble mixes scenarios {} and {}",
            first.net.scenario().name,
            m.net.scenario().name
        )));
    }
    let preds: Vec<Vec<LabelMap>> = members
        .iter()
        .map(|m| predict_study(&m.net, study, crop_size, repair_nesting))
        .collect::<Result<_>>()?;
    (0..study.slices.len())
        .map(|z| majority_vote(&preds.iter().map(|p| &p[z]).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lr_schedule_points() {
        let c = TrainConfig::default();
        assert!((lr_at(0, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_at(10, &c) - 5e-5).abs() < 1e-15);
        assert_eq!(lr_at(20, &c), lr_at(0, &c));
        assert_eq!(lr_at(37, &c), lr_at(17, &c));
        for e in 0..100 {
            let lr = lr_at(e, &c);
            assert!(lr > 0.0 && lr <= c.lr_init);
        }
    }

    #[test]
    fn votes_with_tie_toward_presence() {
        let scar = LabelMap::new(array![[4u8]]).unwrap();
        let healthy = LabelMap::new(array![[2u8]]).unwrap();
        assert_eq!(majority_vote(&[&scar, &scar, &healthy]).unwrap(), scar);
        assert_eq!(majority_vote(&[&scar, &healthy]).unwrap(), scar);
        assert_eq!(
            majority_vote(&[&scar, &healthy, &healthy]).unwrap(),
            healthy
        );
    }

    #[test]
    fn identical_votes_reproduce_every_class() {
        let l = LabelMap::new(array![[0u8, 1, 2], [3, 4, 0]]).unwrap();
        assert_eq!(majority_vote(&[&l, &l, &l]).unwrap(), l);
    }

    #[test]
    fn adam_skips_params_without_gradient() {
        let mut p = ParamStore::new();
        let a = p.add("a", Tensor::full([1, 1, 1, 2], 1.0));
        let b = p.add("b", Tensor::full([1, 1, 1, 1], 1.0));
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(
            &mut p,
            &[Some(Tensor::full([1, 1, 1, 2], 0.5)), None],
            0.1,
            0.0,
        );
        // First Adam step moves by lr·sign(g).
        assert!((p.get(a).data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(p.get(b).data()[0], 1.0);
    }

    #[test]
    fn ensemble_config_rejects_duplicates() {
        assert!(EnsembleConfig {
            member_seeds: vec![1, 1]
        }
        .validate()
        .is_err());
        assert!(EnsembleConfig {
            member_seeds: vec![]
        }
        .validate()
        .is_err());
        assert!(EnsembleConfig {
            member_seeds: vec![1, 2, 3]
        }
        .validate()
        .is_ok());
    }
}
