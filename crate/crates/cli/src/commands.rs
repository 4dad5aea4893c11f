use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use myops::metrics::{evaluate_study, EvaluationReport};
use myops::model::{predict_study, Checkpoint, ScenarioConfig};
use myops::phantom::{dataset_hash, generate_dataset, PhantomParams, Split};
use myops::study_io::{
    load_study, read_label_volume, save_study, write_label_volume, AugmentConfig, Availability,
    LabelMap, MultiSequenceStudy, SequenceId, MANIFEST_FILE,
};
use myops::trainer::{ensemble_predict, train_with_observer, write_log, LogRecord, TrainConfig};
use myops::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    DataArgs, EnsembleArgs, EvalArgs, PhantomArgs, PredictArgs, SplitArgs, TrainArgs,
};
use crate::{overlay, CliError};

type CliResult<T = ()> = Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "checkpoint.myops";
pub const LAST_CHECKPOINT_FILE: &str = "last.myops";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const METRICS_SCHEMA: &str = "metrics.schema.json";
pub const PREDICTION_FILE: &str = "prediction.nii.gz";

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &(text + "\n"))
}

/// `run.json`: command, raw arguments and whatever the command resolved.
fn write_run(out: &Path, command: &str, args: &impl Serialize, resolved: Value) -> CliResult {
    write_json(
        &out.join(RUN_FILE),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "args": args,
            "resolved": resolved,
        }),
    )
}

/// Study directories of one split, sorted by name.
fn study_ids(root: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(MANIFEST_FILE).is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    Ok(ids)
}

fn load_split(data: &Path, split: &str) -> CliResult<Vec<MultiSequenceStudy>> {
    let root = data.join(split);
    let ids = study_ids(&root)?;
    if ids.is_empty() {
        return Err(Error::CorruptData(format!("no studies under {}", root.display())).into());
    }
    Ok(ids
        .iter()
        .map(|id| load_study(&root, id))
        .collect::<Result<_, _>>()?)
}

/// Like [`load_split`], but a missing directory is an empty split.
fn load_optional_split(data: &Path, split: &str) -> CliResult<Vec<MultiSequenceStudy>> {
    if data.join(split).is_dir() {
        let root = data.join(split);
        let ids = study_ids(&root)?;
        Ok(ids
            .iter()
            .map(|id| load_study(&root, id))
            .collect::<Result<_, _>>()?)
    } else {
        Ok(Vec::new())
    }
}

fn crop(d: &DataArgs) -> (usize, usize) {
    (d.crop, d.crop)
}

pub fn phantom(a: &PhantomArgs) -> CliResult {
    let params = PhantomParams {
        n_slices: a.slices,
        rng_seed: a.seed,
        ..PhantomParams::for_size(a.size)
    };
    let mix = match &a.mix {
        Some(c) if c.len() != 3 => {
            return Err(CliError::Usage(format!(
                "--mix takes three counts, got {}",
                c.len()
            )))
        }
        Some(c) => vec![
            (Availability::full(), c[0]),
            (Availability::lge_triple(), c[1]),
            (Availability::mapping_quad(), c[2]),
        ],
        None => Vec::new(),
    };
    let ds = generate_dataset(a.train, a.val, a.test, &params, &mix)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = a.out.join(split.as_str());
        create_dir(&dir)?;
        for study in ds.split(split) {
            save_study(&dir, study)?;
        }
    }
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for s in &ds.train {
        *histogram.entry(s.availability.to_string()).or_default() += 1;
    }
    let hash = ds.hash();
    write_json(
        &a.out.join(DATASET_FILE),
        &json!({
            "seed": a.seed,
            "hash": hash,
            "params": params,
            "train_availability": histogram,
            "studies": ds.records,
        }),
    )?;
    write_run(
        &a.out,
        "phantom",
        a,
        json!({ "dataset_hash": hash, "params": params }),
    )?;
    println!(
        "wrote {} studies to {} (hash {hash})",
        ds.records.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    c.crop_size = crop(&a.data);
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.lr_init = v;
    }
    if let Some(v) = a.base_channels {
        c.net.base_channels = v;
    }
    if let Some(v) = a.scales {
        c.net.n_scales = v;
    }
    if a.no_augment {
        c.augmentation = AugmentConfig::disabled();
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: &TrainArgs) -> CliResult {
    let config = resolve_train_config(a)?;
    let mut train_set = load_split(&a.data.data, "train")?;
    let val = load_optional_split(&a.data.data, "val")?;
    if let Some(n) = a.labeled {
        if n > train_set.len() {
            return Err(CliError::Usage(format!(
                "{n} labelled studies requested, training split has {}",
                train_set.len()
            )));
        }
        train_set = train_set
            .into_iter()
            .enumerate()
            .map(|(i, s)| if i < n { s } else { s.without_labels() })
            .collect();
    }
    let out = &a.data.out;
    create_dir(out)?;
    let scenario = ScenarioConfig::new(a.scenario);
    let mut progress = |r: &LogRecord| {
        if let LogRecord::Epoch {
            epoch,
            mean_total,
            val_dice,
            ..
        } = r
        {
            let val = val_dice.map_or(String::new(), |d| format!(" val dice {d:.4}"));
            eprintln!("epoch {epoch}: loss {mean_total:.4}{val}");
        }
    };
    let outcome = match train_with_observer(&train_set, &val, scenario, &config, &mut progress) {
        Err(Error::NumericFailure {
            epoch,
            step,
            report,
        }) => {
            let dump: Value =
                serde_json::from_str(&report).unwrap_or(Value::String(report.clone()));
            write_json(
                &out.join("failure.json"),
                &json!({ "epoch": epoch, "step": step, "report": dump }),
            )?;
            return Err(Error::NumericFailure {
                epoch,
                step,
                report,
            }
            .into());
        }
        other => other?,
    };
    outcome.best.save(out.join(CHECKPOINT_FILE))?;
    outcome.last.save(out.join(LAST_CHECKPOINT_FILE))?;
    write_log(&out.join(LOG_FILE), &outcome.log)?;
    let labeled = train_set.iter().filter(|s| s.is_labeled()).count();
    write_run(
        out,
        "train",
        a,
        json!({
            "config": config,
            "scenario": a.scenario,
            "train_studies": train_set.len(),
            "labeled_studies": labeled,
            "val_studies": val.len(),
            "dataset_hash": dataset_hash(train_set.iter().chain(&val)),
            "best_epoch": outcome.best.epoch,
            "best_val_dice": outcome.best_val_dice,
            "checkpoint_sha256": outcome.best.sha256()?,
        }),
    )?;
    println!(
        "best epoch {} written to {}",
        outcome.best.epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, s: &SplitArgs) -> CliResult<Checkpoint> {
    let expected = s.scenario.map(ScenarioConfig::new);
    Ok(Checkpoint::load(path, expected.as_ref())?)
}

fn ground_truth(study: &MultiSequenceStudy) -> CliResult<Vec<LabelMap>> {
    Ok(study
        .slices
        .iter()
        .map(|s| s.label.clone().ok_or(Error::MissingLabel))
        .collect::<Result<_, _>>()?)
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let studies = load_split(&a.data.data, &a.split.split)?;
    let repair = !a.split.no_repair;
    let ckpt = a
        .checkpoint
        .as_deref()
        .map(|p| load_checkpoint(p, &a.split))
        .transpose()?;
    let mut reports = Vec::with_capacity(studies.len());
    for study in &studies {
        let gt = ground_truth(study)?;
        let pred = match (&ckpt, &a.predictions) {
            (Some(c), _) => predict_study(&c.net, study, crop(&a.data), repair)?,
            (None, Some(dir)) => {
                read_label_volume(dir.join(&study.study_id).join(PREDICTION_FILE))?
            }
            (None, None) => unreachable!("clap requires a checkpoint or predictions"),
        };
        reports.push(evaluate_study(
            &study.study_id,
            &pred,
            &gt,
            study.pixel_spacing_mm,
        )?);
    }
    let report = EvaluationReport::new(reports)?;
    let out = &a.data.out;
    create_dir(out)?;
    write_json(&out.join(METRICS_JSON), &report)?;
    let table = report.to_table();
    write_text(&out.join(METRICS_TABLE), &table)?;
    write_text(
        &out.join(METRICS_SCHEMA),
        myops::metrics::EVALUATION_REPORT_SCHEMA,
    )?;
    let source = match (&ckpt, &a.predictions) {
        (Some(c), _) => {
            json!({ "checkpoint_sha256": c.sha256()?, "scenario": c.net.scenario().name })
        }
        _ => json!({ "predictions": a.predictions }),
    };
    write_run(
        out,
        "eval",
        a,
        json!({ "studies": studies.len(), "source": source }),
    )?;
    print!("{table}");
    Ok(())
}

fn write_predictions(
    out: &Path,
    study: &MultiSequenceStudy,
    labels: &[LabelMap],
    overlay_seq: SequenceId,
) -> CliResult<PathBuf> {
    let dir = out.join(&study.study_id);
    create_dir(&dir)?;
    let refs: Vec<&LabelMap> = labels.iter().collect();
    write_label_volume(&dir.join(PREDICTION_FILE), &refs, study.pixel_spacing_mm)?;
    let seq = if study.availability.contains(overlay_seq) {
        overlay_seq
    } else {
        SequenceId::C0
    };
    for (z, (slice, label)) in study.slices.iter().zip(labels).enumerate() {
        overlay::save(
            slice.image(seq)?,
            label,
            &dir.join(format!("overlay_{z:02}.png")),
        )?;
    }
    Ok(dir)
}

pub fn predict(a: &PredictArgs) -> CliResult {
    let studies = load_split(&a.data.data, &a.split.split)?;
    let ckpt = load_checkpoint(&a.checkpoint, &a.split)?;
    let out = &a.data.out;
    create_dir(out)?;
    for study in &studies {
        let labels = predict_study(&ckpt.net, study, crop(&a.data), !a.split.no_repair)?;
        write_predictions(out, study, &labels, a.overlay)?;
    }
    write_run(
        out,
        "predict",
        a,
        json!({
            "studies": studies.len(),
            "scenario": ckpt.net.scenario().name,
            "checkpoint_sha256": ckpt.sha256()?,
        }),
    )?;
    println!(
        "wrote predictions for {} studies to {}",
        studies.len(),
        out.display()
    );
    Ok(())
}

pub fn ensemble(a: &EnsembleArgs) -> CliResult {
    let studies = load_split(&a.data.data, &a.split.split)?;
    let members: Vec<Checkpoint> = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p, &a.split))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Checkpoint> = members.iter().collect();
    let out = &a.data.out;
    create_dir(out)?;
    for study in &studies {
        let labels = ensemble_predict(&refs, study, crop(&a.data), !a.split.no_repair)?;
        write_predictions(out, study, &labels, a.overlay)?;
    }
    let hashes: Vec<String> = members
        .iter()
        .map(Checkpoint::sha256)
        .collect::<Result<_, _>>()?;
    write_run(
        out,
        "ensemble",
        a,
        json!({
            "studies": studies.len(),
            "members": members.len(),
            "scenario": members[0].net.scenario().name,
            "checkpoint_sha256": hashes,
        }),
    )?;
    println!(
        "wrote {}-member ensemble predictions to {}",
        members.len(),
        out.display()
    );
    Ok(())
}
