use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ovsg_core::benchmark::{
    build_split, evaluate_sgdet, generate_synthetic, split_leaks, write_synthetic, BenchError, EvalConfig, Slice,
    SplitSpec, SynthSpec,
};
use ovsg_core::losses::LossError;
use ovsg_core::model::{parse_feature_ref, write_predictions, FeatureMap, ModelConfig, PredictionMeta, OBJECTNESS_METHOD};
use ovsg_core::train::{self, Checkpoint, StepLog, TrainConfig, TrainError};
use ovsg_core::types::{Dataset, TypesError};
use ovsg_core::weak::{parse_corpus, CaptionParser, Lexicon, ParserRules};

use crate::config::{self, require_file};
use crate::{plot, CliError};

pub const RUN_FILE: &str = "run.json";
pub const SPLIT_MANIFEST: &str = "split_manifest.json";
pub const TRAIN_FILE: &str = "train.json";
pub const EVAL_FILE: &str = "eval.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DETECTOR_DIR: &str = "detector";
pub const PSEUDO_FILE: &str = "pseudo_labels.json";
pub const PSEUDO_SUMMARY: &str = "pseudo_summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOT_FILE: &str = "recall.svg";

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::InvalidConfig(_)
            | TrainError::MissingTeacher(_)
            | TrainError::VocabularyMismatch { .. }
            | TrainError::Loss(LossError::InvalidConfig(_))
            | TrainError::Bench(BenchError::InvalidSpec(_)) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::InvalidSpec(m) => CliError::Validation(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// One JSON object per line on stdout.
fn emit(event: &str, body: Value) {
    let mut line = json!({ "event": event });
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), body) {
        obj.extend(extra);
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_run(dir: &Path, command: &str, resolved: &Value) -> Result<(), CliError> {
    write_json(&dir.join(RUN_FILE), &json!({ "command": command, "config": resolved }))
}

/// Loads a dataset and reports anything the loader had to repair.
fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    let (ds, report) = Dataset::load(path).map_err(|e| match e {
        TypesError::Io(m) => CliError::Runtime(m),
        e => CliError::Validation(format!("{}: {e}", path.display())),
    })?;
    if !report.is_clean() {
        let msg = format!(
            "{}: {} oov objects, {} oov relations, {} violations, {} duplicates removed",
            path.display(),
            report.oov_objects.len(),
            report.oov_relations.len(),
            report.violations.len(),
            report.duplicates_removed
        );
        log::warn!("{msg}");
        emit("warning", json!({ "message": msg }));
    }
    Ok(ds)
}

fn dataset_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CliError> {
    require_file(dir, "checkpoint")?;
    Checkpoint::load(dir).map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", dir.display())))
}

struct StepWriter {
    file: fs::File,
}

impl StepWriter {
    fn new(path: &Path) -> Result<Self, CliError> {
        let file = fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        Ok(Self { file })
    }

    fn log(&mut self, entry: &StepLog) {
        let value = serde_json::to_value(entry).unwrap_or(Value::Null);
        let _ = writeln!(self.file, "{value}");
        emit("step", value);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenArgs {
    out: PathBuf,
    seed: Option<u64>,
    #[serde(default)]
    synth: SynthSpec,
}

pub fn gen(args: &[String]) -> Result<(), CliError> {
    let (file, pairs) = config::parse_args(args)?;
    let (mut cfg, _): (GenArgs, _) = config::load(file.as_deref(), &pairs)?;
    if let Some(seed) = cfg.seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    let data = generate_synthetic(&cfg.synth)?;
    create_dir(&cfg.out)?;
    let manifest = write_synthetic(&cfg.out, &cfg.synth, &data)?;
    write_run(&cfg.out, "gen", &json!({ "out": cfg.out, "synth": cfg.synth }))?;
    let triplets = data.dataset.triplet_count();
    log::info!("wrote {} scenes, {triplets} triplets to {}", data.dataset.records.len(), cfg.out.display());
    emit(
        "done",
        json!({
            "command": "gen",
            "dataset": cfg.out.join(&manifest.dataset),
            "scenes": data.dataset.records.len(),
            "triplets": triplets,
        }),
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitArgs {
    dataset: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    #[serde(default)]
    split: SplitSpec,
}

/// Copies every feature store referenced by `ds` (blob and sidecar) next to the split files.
fn copy_features(ds: &Dataset, from: &Path, to: &Path) -> Result<(), CliError> {
    let files: BTreeSet<&str> = ds
        .records
        .iter()
        .map(|r| parse_feature_ref(&r.features).map(|(f, _)| f))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    for f in files {
        let src = from.join(f);
        for (a, b) in [(src.clone(), to.join(f)), (src.with_extension("json"), to.join(f).with_extension("json"))] {
            if a == b {
                continue;
            }
            require_file(&a, "feature file")?;
            if let Some(dir) = b.parent() {
                create_dir(dir)?;
            }
            fs::copy(&a, &b).map_err(|e| runtime(format!("{} -> {}: {e}", a.display(), b.display())))?;
        }
    }
    Ok(())
}

pub fn split(args: &[String]) -> Result<(), CliError> {
    let (file, pairs) = config::parse_args(args)?;
    let (mut cfg, _): (SplitArgs, _) = config::load(file.as_deref(), &pairs)?;
    if let Some(seed) = cfg.seed {
        cfg.split.seed = seed;
    }
    let ds = load_dataset(&cfg.dataset)?;
    let split = build_split(&ds, &cfg.split)?;
    let leaks = split_leaks(&split.train, cfg.split.setting);
    if !leaks.is_empty() {
        return Err(runtime(format!("split leaks novel names into training: {}", leaks.join(", "))));
    }
    create_dir(&cfg.out)?;
    copy_features(&ds, &dataset_root(&cfg.dataset), &cfg.out)?;
    split.train.save(&cfg.out.join(TRAIN_FILE)).map_err(runtime)?;
    split.eval.save(&cfg.out.join(EVAL_FILE)).map_err(runtime)?;
    write_json(&cfg.out.join(SPLIT_MANIFEST), &split.manifest)?;
    write_run(&cfg.out, "split", &json!({ "dataset": cfg.dataset, "out": cfg.out, "split": cfg.split }))?;
    log::info!(
        "{} split: {} train / {} eval images, novel objects {:?}, novel relations {:?}",
        cfg.split.setting.as_str(),
        split.manifest.train_images,
        split.manifest.eval_images,
        split.manifest.novel_objects,
        split.manifest.novel_relations
    );
    emit(
        "done",
        json!({
            "command": "split",
            "setting": cfg.split.setting.as_str(),
            "train": cfg.out.join(TRAIN_FILE),
            "eval": cfg.out.join(EVAL_FILE),
            "train_images": split.manifest.train_images,
            "eval_images": split.manifest.eval_images,
        }),
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    dataset: PathBuf,
    out: PathBuf,
    /// Teacher checkpoint directory; only read by `finetune`.
    teacher: Option<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn train_args(args: &[String]) -> Result<TrainArgs, CliError> {
    let (file, pairs) = config::parse_args(args)?;
    let (mut cfg, _): (TrainArgs, _) = config::load(file.as_deref(), &pairs)?;
    if let Some(seed) = cfg.seed {
        cfg.train.seed = seed;
    }
    cfg.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn feature_maps(ds: &Dataset, path: &Path) -> Result<Vec<FeatureMap>, CliError> {
    train::load_feature_maps(ds, &dataset_root(path)).map_err(|e| CliError::Validation(format!("features: {e}")))
}

pub fn pretrain(args: &[String]) -> Result<(), CliError> {
    let cfg = train_args(args)?;
    if cfg.teacher.is_some() {
        return Err(CliError::Validation("pretrain does not take a teacher".into()));
    }
    let ds = load_dataset(&cfg.dataset)?;
    let maps = feature_maps(&ds, &cfg.dataset)?;
    create_dir(&cfg.out)?;
    let mut log = StepWriter::new(&cfg.out.join(LOG_FILE))?;
    let out = train::pretrain(&ds, &maps, &cfg.model, &cfg.train, |l| log.log(l))?;
    out.detector.save(&cfg.out.join(DETECTOR_DIR))?;
    out.teacher.save(&cfg.out.join(CHECKPOINT_DIR))?;
    out.pseudo.save(&cfg.out.join(PSEUDO_FILE)).map_err(runtime)?;
    write_json(&cfg.out.join(PSEUDO_SUMMARY), &out.summary)?;
    write_run(
        &cfg.out,
        "pretrain",
        &json!({ "dataset": cfg.dataset, "out": cfg.out, "model": cfg.model, "train": cfg.train }),
    )?;
    log::info!(
        "pseudo-labels: {} of {} parsed triplets kept over {} images; relations {:?}",
        out.summary.kept_edges,
        out.summary.parsed_triplets,
        out.summary.images_with_labels,
        out.summary.relations
    );
    emit(
        "done",
        json!({
            "command": "pretrain",
            "checkpoint": cfg.out.join(CHECKPOINT_DIR),
            "relations": out.teacher.meta.relation_names,
            "final_loss": out.teacher.meta.final_loss,
        }),
    );
    Ok(())
}

pub fn finetune(args: &[String]) -> Result<(), CliError> {
    let cfg = train_args(args)?;
    let teacher = cfg.teacher.as_deref().map(load_checkpoint).transpose()?;
    let ds = load_dataset(&cfg.dataset)?;
    let maps = feature_maps(&ds, &cfg.dataset)?;
    if cfg.train.loss.lambda > 0.0 && teacher.is_none() {
        return Err(TrainError::MissingTeacher(cfg.train.loss.lambda).into());
    }
    create_dir(&cfg.out)?;
    let mut log = StepWriter::new(&cfg.out.join(LOG_FILE))?;
    let out = train::finetune(&ds, &maps, teacher.as_ref(), &cfg.model, &cfg.train, |l| log.log(l))?;
    out.student.save(&cfg.out.join(CHECKPOINT_DIR))?;
    write_run(
        &cfg.out,
        "finetune",
        &json!({
            "dataset": cfg.dataset,
            "out": cfg.out,
            "teacher": cfg.teacher,
            "model": out.student.meta.model,
            "train": cfg.train,
        }),
    )?;
    emit(
        "done",
        json!({
            "command": "finetune",
            "checkpoint": cfg.out.join(CHECKPOINT_DIR),
            "lambda": cfg.train.loss.lambda,
            "final_loss": out.student.meta.final_loss,
        }),
    );
    Ok(())
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    dataset: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    #[serde(default)]
    eval: EvalConfig,
    /// Slice summarized on stderr; the report always holds every slice.
    slice: Option<String>,
    #[serde(default = "default_true")]
    plot: bool,
}

pub fn eval(args: &[String]) -> Result<(), CliError> {
    let (file, pairs) = config::parse_args(args)?;
    let (cfg, _): (EvalArgs, _) = config::load(file.as_deref(), &pairs)?;
    let slice = match &cfg.slice {
        Some(s) => Slice::parse(s).ok_or_else(|| CliError::Validation(format!("unknown slice {s:?}")))?,
        None => Slice::All,
    };
    if cfg.eval.ks.is_empty() || cfg.eval.ks.contains(&0) || !(0.0..=1.0).contains(&cfg.eval.iou_threshold) {
        return Err(CliError::Validation(format!("eval config {:?}", cfg.eval)));
    }
    let ck = load_checkpoint(&cfg.checkpoint)?;
    let ds = load_dataset(&cfg.dataset)?;
    let concepts = ck.check_vocabulary(&ds.vocabulary)?;
    let maps = feature_maps(&ds, &cfg.dataset)?;
    let preds = train::predict_dataset(&ck, &ds, &maps, &concepts)?;
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.graph_constraint = ck.model.config().graph_constraint;
    let report = evaluate_sgdet(&preds, &ds, &eval_cfg);

    create_dir(&cfg.out)?;
    let meta = PredictionMeta {
        graph_constraint: ck.model.config().graph_constraint,
        objectness: OBJECTNESS_METHOD.into(),
        top_n_detections: ck.model.config().top_n_detections,
    };
    write_predictions(&cfg.out.join(PREDICTIONS_FILE), &preds, &meta).map_err(runtime)?;
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    fs::write(cfg.out.join(REPORT_CSV), report.to_csv()).map_err(runtime)?;
    if cfg.plot {
        fs::write(cfg.out.join(PLOT_FILE), plot::recall_svg(&report)).map_err(runtime)?;
    }
    let mut recall = serde_json::Map::new();
    for &k in &report.ks {
        let r = report.get(k, slice);
        match r {
            Some(v) => log::info!("{} R@{k} = {v:.4}", slice.as_str()),
            None => log::warn!("{} R@{k}: not applicable (slice is empty)", slice.as_str()),
        }
        recall.insert(format!("R@{k}"), json!(r));
    }
    emit(
        "done",
        json!({
            "command": "eval",
            "slice": slice.as_str(),
            "recall": recall,
            "report": cfg.out.join(REPORT_FILE),
        }),
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParseArgs {
    /// A dataset JSON (captions and lexicon come from it) or a text file with one caption per line.
    input: PathBuf,
    /// Optional dataset whose vocabulary seeds the lexicon of a text input.
    vocabulary: Option<PathBuf>,
    rules: Option<PathBuf>,
}

pub fn parse_captions(args: &[String]) -> Result<(), CliError> {
    let (file, pairs) = config::parse_args(args)?;
    let (cfg, _): (ParseArgs, _) = config::load(file.as_deref(), &pairs)?;
    require_file(&cfg.input, "input")?;
    let rules = match &cfg.rules {
        Some(p) => {
            require_file(p, "rules")?;
            ParserRules::load(p).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => ParserRules::builtin(),
    };
    let is_json = cfg.input.extension().is_some_and(|e| e == "json");
    let (ids, captions, lexicon) = if is_json {
        let ds = load_dataset(&cfg.input)?;
        let (ids, captions): (Vec<String>, Vec<String>) = ds
            .records
            .iter()
            .filter_map(|r| Some((r.image_id.clone(), r.caption.clone()?)))
            .unzip();
        (ids, captions, Lexicon::from_vocabulary(&ds.vocabulary))
    } else {
        let text = fs::read_to_string(&cfg.input).map_err(|e| runtime(format!("{}: {e}", cfg.input.display())))?;
        let captions: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        let ids = (1..=captions.len()).map(|i| format!("line{i}")).collect();
        let lexicon = match &cfg.vocabulary {
            Some(p) => Lexicon::from_vocabulary(&load_dataset(p)?.vocabulary),
            None => Lexicon::default(),
        };
        (ids, captions, lexicon)
    };
    let parser = CaptionParser::new(rules, lexicon);
    let parsed = parse_corpus(&parser, &captions);
    let mut total = 0;
    for ((id, caption), triplets) in ids.iter().zip(&captions).zip(&parsed) {
        total += triplets.len();
        emit("caption", json!({ "id": id, "caption": caption, "triplets": triplets }));
    }
    log::info!("{} captions, {total} triplets", captions.len());
    emit("done", json!({ "command": "parse-captions", "captions": captions.len(), "triplets": total }));
    Ok(())
}
