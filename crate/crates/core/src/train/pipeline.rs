use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_training, Checkpoint, CheckpointMeta, Stage, StepLog, Teacher, TrainConfig, TrainError, TrainImage, TrainVocab};
use crate::concept::{embed_concepts, ConceptTable};
use crate::model::{decode_nodes, predict_scene_graph, FeatureCache, FeatureMap, ModelConfig, PredictionRecord, SceneGraphModel};
use crate::numerics::ParamStore;
use crate::types::{Dataset, Record, Vocabulary};
use crate::weak::{label_image, CaptionParser, Lexicon, ParserRules, CAPTION_PROVENANCE};

/// Feature maps for every record, resolved against `root`.
pub fn load_feature_maps(ds: &Dataset, root: &Path) -> Result<Vec<FeatureMap>, TrainError> {
    let mut cache = FeatureCache::new(root);
    ds.records
        .iter()
        .map(|r| Ok(cache.get(&r.features)?.clone()))
        .collect()
}

/// Training images restricted to `objects` and `relations`; nodes outside the object
/// list and edges outside the relation list are skipped.
pub fn train_images(ds: &Dataset, maps: &[FeatureMap], objects: &[String], relations: &[String]) -> Vec<TrainImage> {
    ds.records
        .iter()
        .zip(maps)
        .filter_map(|(r, fm)| {
            let mut graph = r.graph.clone();
            graph.retain_nodes(|n| objects.contains(&n.concept));
            let edges: Vec<(usize, usize, usize)> = graph
                .edges
                .iter()
                .filter_map(|e| Some((e.subject, e.object, relations.iter().position(|p| *p == e.predicate)?)))
                .collect();
            (!graph.nodes.is_empty()).then(|| TrainImage {
                image_id: r.image_id.clone(),
                features: fm.clone(),
                nodes: graph.nodes,
                edges,
            })
        })
        .collect()
}

fn dedup_names<'a>(names: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    names.into_iter().filter(|n| seen.insert(n.as_str())).cloned().collect()
}

fn meta(stage: Stage, model: &ModelConfig, cfg: &TrainConfig, concepts: &ConceptTable, vocab: &TrainVocab, steps: usize, logs: &[StepLog]) -> CheckpointMeta {
    CheckpointMeta {
        stage,
        model: model.clone(),
        embedding: cfg.embedding.clone(),
        concept_fingerprint: concepts.fingerprint(),
        object_names: vocab.objects.clone(),
        relation_names: vocab.relations.clone(),
        seed: cfg.seed,
        steps,
        lambda: cfg.loss.lambda,
        final_loss: logs.last().map(|l| l.loss.total),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub captions: usize,
    pub parsed_triplets: usize,
    pub kept_edges: usize,
    pub images_with_labels: usize,
    pub relations: Vec<String>,
}

/// Grounds every caption with a detector and returns the resulting pseudo-labelled dataset.
pub fn build_pseudo_dataset(
    ds: &Dataset,
    maps: &[FeatureMap],
    detector: &Checkpoint,
    concepts: &ConceptTable,
    cfg: &TrainConfig,
) -> Result<(Dataset, PseudoSummary), TrainError> {
    let objects = ds.vocabulary.object_names();
    let parser = CaptionParser::new(ParserRules::builtin(), Lexicon::from_vocabulary(&ds.vocabulary));
    let labelled = ds
        .records
        .par_iter()
        .zip(maps)
        .map(|(r, fm)| {
            let Some(caption) = &r.caption else {
                return Ok((r, None, 0));
            };
            let parsed = parser.parse(caption).len();
            let preds = decode_nodes(&detector.model, &detector.params, fm, concepts, objects)?;
            let label = label_image(&parser, &r.image_id, &[caption], &preds, concepts, cfg.pseudo_threshold, cfg.object_score)?;
            Ok((r, Some(label), parsed))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let mut summary = PseudoSummary::default();
    let mut records = Vec::new();
    let mut phrases = BTreeSet::new();
    let mut relations = BTreeSet::new();
    for (r, label, parsed) in labelled {
        summary.parsed_triplets += parsed;
        let Some(label) = label else { continue };
        summary.captions += 1;
        if label.is_empty() {
            continue;
        }
        summary.kept_edges += label.graph.edges.len();
        summary.images_with_labels += 1;
        phrases.extend(label.graph.nodes.iter().map(|n| n.concept.clone()));
        relations.extend(label.graph.edges.iter().map(|e| e.predicate.clone()));
        let mut graph = label.graph;
        graph.image_id = r.image_id.clone();
        records.push(Record {
            image_id: r.image_id.clone(),
            features: r.features.clone(),
            graph,
            caption: r.caption.clone(),
            provenance: Some(CAPTION_PROVENANCE.into()),
        });
    }
    if summary.kept_edges == 0 {
        return Err(TrainError::EmptyPseudoLabels);
    }
    let object_names = dedup_names(objects.iter().chain(&phrases));
    summary.relations = relations.into_iter().collect();
    let vocab = Vocabulary::all_base(object_names, summary.relations.clone())?;
    let mut out = Dataset::new(vocab, records)?;
    out.resolve();
    Ok((out, summary))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub detector: Checkpoint,
    pub teacher: Checkpoint,
    pub pseudo: Dataset,
    pub summary: PseudoSummary,
    pub logs: Vec<StepLog>,
}

/// Detector warm-up on annotated boxes, caption grounding, then relation training on
/// the pseudo-labels without distillation.
pub fn pretrain(
    ds: &Dataset,
    maps: &[FeatureMap],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&StepLog),
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    let model = SceneGraphModel::new(model_cfg.clone())?;
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let objects = ds.vocabulary.object_names().to_vec();
    let concepts = embed_concepts(&objects, &cfg.embedding)?;
    let det_vocab = TrainVocab::new(objects.clone(), Vec::new(), &concepts, false)?;
    let det_images = train_images(ds, maps, &objects, &[]);
    let mut logs = run_training("detector", &model, &mut params, &det_images, &det_vocab, &concepts, cfg, cfg.detector_steps, None, &mut on_log)?;
    let detector = Checkpoint::new(params.clone(), meta(Stage::Detector, model_cfg, cfg, &concepts, &det_vocab, cfg.detector_steps, &logs))?;

    let (pseudo, summary) = build_pseudo_dataset(ds, maps, &detector, &concepts, cfg)?;
    let pseudo_maps: Vec<FeatureMap> = pseudo
        .records
        .iter()
        .map(|r| {
            let i = ds.records.iter().position(|x| x.image_id == r.image_id).expect("pseudo record from dataset");
            maps[i].clone()
        })
        .collect();
    let objects = pseudo.vocabulary.object_names().to_vec();
    let relations = pseudo.vocabulary.relation_names().to_vec();
    let names: Vec<String> = dedup_names(objects.iter().chain(&relations));
    let concepts = embed_concepts(&names, &cfg.embedding)?;
    let vocab = TrainVocab::new(objects.clone(), relations.clone(), &concepts, true)?;
    let images = train_images(&pseudo, &pseudo_maps, &objects, &relations);
    let mut relation_cfg = cfg.clone();
    relation_cfg.loss.lambda = 0.0;
    let rel_logs = run_training("pretrain", &model, &mut params, &images, &vocab, &concepts, &relation_cfg, cfg.steps, None, &mut on_log)?;
    let teacher = Checkpoint::new(params, meta(Stage::Pretrain, model_cfg, &relation_cfg, &concepts, &vocab, cfg.steps, &rel_logs))?;
    logs.extend(rel_logs);
    Ok(PretrainOutcome {
        detector,
        teacher,
        pseudo,
        summary,
        logs,
    })
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub student: Checkpoint,
    pub logs: Vec<StepLog>,
}

/// Trains on the base names of `train`. The student starts from the teacher's weights;
/// with `lambda > 0` the frozen teacher anchors edge features of unlabelled pairs.
pub fn finetune(
    train: &Dataset,
    maps: &[FeatureMap],
    teacher: Option<&Checkpoint>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_log: impl FnMut(&StepLog),
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if cfg.loss.lambda > 0.0 && teacher.is_none() {
        return Err(TrainError::MissingTeacher(cfg.loss.lambda));
    }
    let (model, mut params): (SceneGraphModel, ParamStore) = match teacher {
        Some(t) => (t.model.clone(), t.params.clone()),
        None => {
            let model = SceneGraphModel::new(model_cfg.clone())?;
            let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            (model, params)
        }
    };
    let embedding = teacher.map_or(&cfg.embedding, |t| &t.meta.embedding);
    let objects = train.vocabulary.base_objects();
    let relations = train.vocabulary.base_relations();
    let names = dedup_names(objects.iter().chain(&relations));
    let concepts = embed_concepts(&names, embedding)?;
    let vocab = TrainVocab::new(objects.clone(), relations.clone(), &concepts, true)?;
    let images = train_images(train, maps, &objects, &relations);
    let frozen = teacher
        .filter(|_| cfg.loss.lambda > 0.0)
        .map(|t| Teacher::new(&t.model, &t.params, &images, &vocab.object_matrix))
        .transpose()?;
    let mut run_cfg = cfg.clone();
    run_cfg.embedding = embedding.clone();
    let logs = run_training("finetune", &model, &mut params, &images, &vocab, &concepts, &run_cfg, cfg.steps, frozen.as_ref(), on_log)?;
    let student = Checkpoint::new(params, meta(Stage::Finetune, model.config(), &run_cfg, &concepts, &vocab, cfg.steps, &logs))?;
    Ok(FinetuneOutcome { student, logs })
}

/// Ranked triplets for every record, scored against the full dataset vocabulary.
pub fn predict_dataset(
    ck: &Checkpoint,
    ds: &Dataset,
    maps: &[FeatureMap],
    concepts: &ConceptTable,
) -> Result<Vec<PredictionRecord>, TrainError> {
    ds.records
        .par_iter()
        .zip(maps)
        .map(|(r, fm)| {
            Ok(PredictionRecord {
                image_id: r.image_id.clone(),
                triplets: predict_scene_graph(&ck.model, &ck.params, fm, &ds.vocabulary, concepts)?,
            })
        })
        .collect()
}
