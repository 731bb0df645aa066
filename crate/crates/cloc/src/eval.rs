//! Zero-shot evaluation: region object recognition, region-text and
//! image-text retrieval, and text-prompted grounding accuracy. All metrics
//! are deterministic functions of (model, dataset, settings).

use crate::autodiff::{Real, Tape};
use crate::encoders::{patchify, text_embedding_batch, EncoderError};
use crate::geometry::{iou, BoundingBox};
use crate::model::{BatchInputs, ClocModel, RegionExtractor, RegionTarget};
use crate::synthdata::{DataError, DatasetRecord};
use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("region label {0:?} is not among the class names")]
    UnknownClass(String),
    #[error("dataset has no regions to evaluate")]
    NoRegions,
    #[error("dataset has no records")]
    EmptyDataset,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One metric measurement with enough provenance to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub split_size: usize,
    pub config_hash: String,
}

/// Fixed-width table of reports for terminal output.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let task_w = reports
        .iter()
        .map(|r| r.task.len())
        .chain(["task".len()])
        .max()
        .unwrap_or(4);
    let metric_w = reports
        .iter()
        .map(|r| r.metric.len())
        .chain(["metric".len()])
        .max()
        .unwrap_or(6);
    out.push_str(&format!(
        "{:<task_w$}  {:<metric_w$}  {:>8}  {:>6}  config\n",
        "task", "metric", "value", "n"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<task_w$}  {:<metric_w$}  {:>8.4}  {:>6}  {}\n",
            r.task, r.metric, r.value, r.split_size, r.config_hash
        ));
    }
    out
}

fn digest(parts: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn model_digest<F: Real>(model: &ClocModel<F>, extras: &[&str]) -> String {
    let cfg = serde_json::to_string(&model.cfg).expect("config serializes");
    let mut parts = vec![cfg.as_str()];
    parts.extend_from_slice(extras);
    digest(&parts)
}

/// Everything extracted from a dataset's regions in one pass: ground-truth
/// boxes and labels, region embeddings from the chosen extractor, caption
/// embeddings, and (prompter only) raw grounding predictions.
struct RegionPass<F> {
    boxes: Vec<BoundingBox>,
    labels: Vec<String>,
    region_embeddings: Array2<F>,
    text_embeddings: Array2<F>,
    predicted_boxes: Option<Array2<F>>,
    records: usize,
}

fn region_pass<F: Real>(
    model: &ClocModel<F>,
    records: &[DatasetRecord],
    extractor: RegionExtractor,
    limit_regions: Option<usize>,
) -> Result<RegionPass<F>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let d_e = model.cfg.d_e;
    let mut pass = RegionPass {
        boxes: Vec::new(),
        labels: Vec::new(),
        region_embeddings: Array2::zeros((0, d_e)),
        text_embeddings: Array2::zeros((0, d_e)),
        predicted_boxes: if extractor == RegionExtractor::Prompter {
            Some(Array2::zeros((0, 4)))
        } else {
            None
        },
        records: 0,
    };
    let mut region_rows: Vec<Array2<F>> = Vec::new();
    let mut text_rows: Vec<Array2<F>> = Vec::new();
    let mut pred_rows: Vec<Array2<F>> = Vec::new();
    let budget = limit_regions.unwrap_or(usize::MAX);

    'outer: for chunk in records.chunks(CHUNK) {
        let mut inputs = BatchInputs {
            patch_mats: Vec::new(),
            image_ids: Vec::new(),
            captions: Vec::new(),
            regions: Vec::new(),
            labeled_images: 0,
        };
        for rec in chunk {
            let Some(regions) = &rec.regions else { continue };
            if regions.is_empty() {
                continue;
            }
            let img = rec.image(model.cfg.image_size)?;
            let image_index = inputs.patch_mats.len();
            inputs.patch_mats.push(patchify(&img, &model.cfg)?);
            inputs.image_ids.push(rec.id);
            inputs.captions.push(model.tokenize(&rec.caption));
            inputs.labeled_images += 1;
            for r in regions {
                if pass.boxes.len() >= budget {
                    break;
                }
                inputs.regions.push(RegionTarget {
                    image_index,
                    box_: r.box_,
                    text: model.tokenize(&r.text),
                });
                pass.boxes.push(r.box_);
                pass.labels.push(r.text.clone());
            }
            pass.records += 1;
        }
        if inputs.regions.is_empty() {
            if pass.boxes.len() >= budget {
                break 'outer;
            }
            continue;
        }
        let tape = Tape::new();
        let pvars = model.params.bind(&tape);
        let batch = model.batch_embeddings(&tape, &pvars, &inputs, extractor)?;
        region_rows.push(tape.value(batch.region_embeddings.expect("regions")).as_ref().clone());
        text_rows.push(
            tape.value(batch.region_text_embeddings.expect("region texts"))
                .as_ref()
                .clone(),
        );
        if let Some(preds) = batch.predicted_boxes {
            pred_rows.push(tape.value(preds).as_ref().clone());
        }
        if pass.boxes.len() >= budget {
            break 'outer;
        }
    }
    if pass.boxes.is_empty() {
        return Err(EvalError::NoRegions);
    }
    pass.region_embeddings = vstack(&region_rows, d_e);
    pass.text_embeddings = vstack(&text_rows, d_e);
    if pass.predicted_boxes.is_some() {
        pass.predicted_boxes = Some(vstack(&pred_rows, 4));
    }
    Ok(pass)
}

fn vstack<F: Real>(rows: &[Array2<F>], cols: usize) -> Array2<F> {
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut out = Array2::zeros((total, cols));
    let mut at = 0;
    for r in rows {
        out.slice_mut(ndarray::s![at..at + r.nrows(), ..]).assign(r);
        at += r.nrows();
    }
    out
}

/// Zero-shot region object recognition: each region embedding is
/// classified by its nearest class-name embedding (bare names, no prompt
/// template); the score macro-averages per-class accuracy over the classes
/// that appear in the data.
pub fn region_classify<F: Real>(
    model: &ClocModel<F>,
    records: &[DatasetRecord],
    class_names: &[String],
    extractor: RegionExtractor,
) -> Result<EvalReport, EvalError> {
    let pass = region_pass(model, records, extractor, None)?;
    let class_index = |label: &str| -> Result<usize, EvalError> {
        class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| EvalError::UnknownClass(label.to_owned()))
    };

    let tape = Tape::new();
    let pvars = model.params.bind(&tape);
    let seqs: Vec<_> = class_names.iter().map(|c| model.tokenize(c)).collect();
    let refs: Vec<&_> = seqs.iter().collect();
    let class_var = text_embedding_batch(&tape, &pvars, &model.cfg, &refs)?;
    let class_embs = tape.value(class_var);

    let n_classes = class_names.len();
    let mut correct = vec![0usize; n_classes];
    let mut seen = vec![0usize; n_classes];
    for (row, label) in pass.labels.iter().enumerate() {
        let truth = class_index(label)?;
        let z = pass.region_embeddings.row(row);
        let mut best = 0usize;
        let mut best_score = F::neg_infinity();
        for (c, class_row) in class_embs.rows().into_iter().enumerate() {
            let score = z
                .iter()
                .zip(class_row.iter())
                .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        seen[truth] += 1;
        if best == truth {
            correct[truth] += 1;
        }
    }
    let mut acc_sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if seen[c] > 0 {
            acc_sum += correct[c] as f64 / seen[c] as f64;
            present += 1;
        }
    }
    Ok(EvalReport {
        task: format!("region-classify[{extractor}]"),
        metric: "mAcc".into(),
        value: acc_sum / present as f64,
        split_size: pass.labels.len(),
        config_hash: model_digest(model, &["region-classify", &extractor.to_string()]),
    })
}

/// Both directions of a retrieval measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalScores {
    pub forward: EvalReport,
    pub backward: EvalReport,
}

fn topk_hits<F: Real>(
    scores: &Array2<F>,
    k: usize,
    is_hit: impl Fn(usize, usize) -> bool,
) -> f64 {
    let n = scores.nrows();
    let mut hits = 0usize;
    for i in 0..n {
        let row = scores.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        if order.iter().take(k).any(|&j| is_hit(i, j)) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Region-to-text and text-to-region recall@k over every region-caption
/// pair in the dataset. With `duplicates_count` (the default elsewhere), a
/// retrieved caption identical in text to the query's own counts as a hit.
pub fn region_retrieve<F: Real>(
    model: &ClocModel<F>,
    records: &[DatasetRecord],
    k: usize,
    extractor: RegionExtractor,
    duplicates_count: bool,
    limit_regions: Option<usize>,
) -> Result<RetrievalScores, EvalError> {
    let pass = region_pass(model, records, extractor, limit_regions)?;
    let scores = pass.region_embeddings.dot(&pass.text_embeddings.t());
    let labels = &pass.labels;
    let hit = |i: usize, j: usize| {
        if duplicates_count {
            labels[i] == labels[j]
        } else {
            i == j
        }
    };
    let r2t = topk_hits(&scores, k, hit);
    let t2r = topk_hits(&scores.t().to_owned(), k, hit);
    let hash = model_digest(
        model,
        &[
            "region-retrieve",
            &extractor.to_string(),
            &k.to_string(),
            &duplicates_count.to_string(),
        ],
    );
    Ok(RetrievalScores {
        forward: EvalReport {
            task: format!("region-retrieve[{extractor}]"),
            metric: format!("recall@{k} r2t"),
            value: r2t,
            split_size: labels.len(),
            config_hash: hash.clone(),
        },
        backward: EvalReport {
            task: format!("region-retrieve[{extractor}]"),
            metric: format!("recall@{k} t2r"),
            value: t2r,
            split_size: labels.len(),
            config_hash: hash,
        },
    })
}

/// Image-to-caption and caption-to-image recall@k.
pub fn image_retrieve<F: Real>(
    model: &ClocModel<F>,
    records: &[DatasetRecord],
    k: usize,
    duplicates_count: bool,
) -> Result<RetrievalScores, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let d_e = model.cfg.d_e;
    let mut image_rows = Vec::new();
    let mut caption_rows = Vec::new();
    let mut captions: Vec<String> = Vec::new();
    for chunk in records.chunks(CHUNK) {
        let mut inputs = BatchInputs {
            patch_mats: Vec::new(),
            image_ids: Vec::new(),
            captions: Vec::new(),
            regions: Vec::new(),
            labeled_images: 0,
        };
        for rec in chunk {
            let img = rec.image(model.cfg.image_size)?;
            inputs.patch_mats.push(patchify(&img, &model.cfg)?);
            inputs.image_ids.push(rec.id);
            inputs.captions.push(model.tokenize(&rec.caption));
            captions.push(rec.caption.clone());
        }
        let tape = Tape::new();
        let pvars = model.params.bind(&tape);
        let batch = model.batch_embeddings(&tape, &pvars, &inputs, RegionExtractor::Prompter)?;
        image_rows.push(tape.value(batch.image_embeddings).as_ref().clone());
        caption_rows.push(tape.value(batch.caption_embeddings).as_ref().clone());
    }
    let images = vstack(&image_rows, d_e);
    let texts = vstack(&caption_rows, d_e);
    let scores = images.dot(&texts.t());
    let hit = |i: usize, j: usize| {
        if duplicates_count {
            captions[i] == captions[j]
        } else {
            i == j
        }
    };
    let i2t = topk_hits(&scores, k, hit);
    let t2i = topk_hits(&scores.t().to_owned(), k, hit);
    let hash = model_digest(model, &["image-retrieve", &k.to_string()]);
    Ok(RetrievalScores {
        forward: EvalReport {
            task: "image-retrieve".into(),
            metric: format!("recall@{k} i2t"),
            value: i2t,
            split_size: records.len(),
            config_hash: hash.clone(),
        },
        backward: EvalReport {
            task: "image-retrieve".into(),
            metric: format!("recall@{k} t2i"),
            value: t2i,
            split_size: records.len(),
            config_hash: hash,
        },
    })
}

/// Text-prompted grounding: the box head's prediction (clamped and
/// corner-ordered) must overlap the ground truth at IoU >= `threshold`.
pub fn grounding_eval<F: Real>(
    model: &ClocModel<F>,
    records: &[DatasetRecord],
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    let pass = region_pass(model, records, RegionExtractor::Prompter, None)?;
    let preds = pass.predicted_boxes.expect("prompter pass predicts boxes");
    let mut correct = 0usize;
    for (i, gt) in pass.boxes.iter().enumerate() {
        let raw = [
            preds[[i, 0]].to_f64(),
            preds[[i, 1]].to_f64(),
            preds[[i, 2]].to_f64(),
            preds[[i, 3]].to_f64(),
        ];
        let pred = BoundingBox::clamp_from_raw(raw);
        if iou(&pred, gt) >= threshold {
            correct += 1;
        }
    }
    Ok(EvalReport {
        task: "grounding".into(),
        metric: format!("acc@iou{threshold}"),
        value: correct as f64 / pass.boxes.len() as f64,
        split_size: pass.boxes.len(),
        config_hash: model_digest(model, &["grounding", &threshold.to_string()]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::encoders::ModelConfig;
    use crate::synthdata::{class_names, generate_corpus, CaptionMode};
    use crate::vesl::RegionAnnotation;

    fn tiny_model(seed: u64) -> ClocModel<f32> {
        ClocModel::new(ModelConfig::tiny(), seed).unwrap()
    }

    fn corpus(n: usize, seed: u64) -> Vec<DatasetRecord> {
        generate_corpus(n, seed, CaptionMode::Rich, None).unwrap()
    }

    #[test]
    fn untrained_model_classifies_at_chance() {
        let model = tiny_model(3);
        let records = corpus(300, 50);
        let names = class_names();
        let report =
            region_classify(&model, &records, &names, RegionExtractor::Prompter).unwrap();
        let chance = 1.0 / 48.0;
        // within a few binomial standard deviations of chance
        assert!(
            (report.value - chance).abs() < 0.02,
            "mAcc {} too far from chance {chance}",
            report.value
        );
        assert!(report.split_size > 500);
    }

    #[test]
    fn single_class_is_trivially_correct() {
        let model = tiny_model(4);
        let mut records = corpus(10, 51);
        // collapse every region label to one class
        for rec in &mut records {
            if let Some(regions) = &mut rec.regions {
                for r in regions {
                    r.text = "small red circle".into();
                }
            }
        }
        let names = vec!["small red circle".to_owned()];
        let report =
            region_classify(&model, &records, &names, RegionExtractor::Prompter).unwrap();
        assert_eq!(report.value, 1.0);
    }

    #[test]
    fn unknown_label_is_an_error() {
        let model = tiny_model(5);
        let records = corpus(5, 52);
        let names = vec!["something else".to_owned()];
        assert!(matches!(
            region_classify(&model, &records, &names, RegionExtractor::Prompter),
            Err(EvalError::UnknownClass(_))
        ));
    }

    #[test]
    fn classification_invariant_to_projection_rescale() {
        let mut a = ClocModel::<f64>::new(ModelConfig::tiny(), 6).unwrap();
        let records = corpus(30, 53);
        let names = class_names();
        let before = region_classify(&a, &records, &names, RegionExtractor::Prompter).unwrap();
        a.params.get_mut("prm/proj").mapv_inplace(|x| x * 7.5);
        let after = region_classify(&a, &records, &names, RegionExtractor::Prompter).unwrap();
        assert_eq!(before.value, after.value);
    }

    #[test]
    fn retrieval_recall_bounds_and_monotonicity() {
        let model = tiny_model(7);
        let records = corpus(24, 54);
        let total_regions: usize = records
            .iter()
            .map(|r| r.regions.as_ref().map_or(0, |v| v.len()))
            .sum();
        let exhaustive = region_retrieve(
            &model,
            &records,
            total_regions,
            RegionExtractor::Prompter,
            true,
            None,
        )
        .unwrap();
        assert_eq!(exhaustive.forward.value, 1.0);
        assert_eq!(exhaustive.backward.value, 1.0);
        let mut last = (0.0, 0.0);
        for k in [1usize, 5, 10] {
            let s = region_retrieve(&model, &records, k, RegionExtractor::Prompter, true, None)
                .unwrap();
            assert!(s.forward.value >= last.0 && s.backward.value >= last.1);
            last = (s.forward.value, s.backward.value);
        }
    }

    #[test]
    fn image_retrieval_order_invariance_and_bounds() {
        let model = tiny_model(8);
        let mut records = corpus(16, 55);
        let a = image_retrieve(&model, &records, 16, true).unwrap();
        assert_eq!(a.forward.value, 1.0);
        assert_eq!(a.backward.value, 1.0);
        let k1 = image_retrieve(&model, &records, 1, true).unwrap();
        let k5 = image_retrieve(&model, &records, 5, true).unwrap();
        assert!(k1.forward.value <= k5.forward.value);
        // shuffling the dataset leaves the metric unchanged
        records.reverse();
        let k5r = image_retrieve(&model, &records, 5, true).unwrap();
        assert_eq!(k5.forward.value, k5r.forward.value);
        assert_eq!(k5.backward.value, k5r.backward.value);
    }

    #[test]
    fn grounding_threshold_zero_accepts_everything() {
        let model = tiny_model(9);
        let records = corpus(12, 56);
        let report = grounding_eval(&model, &records, 0.0).unwrap();
        assert_eq!(report.value, 1.0);
    }

    #[test]
    fn grounding_untrained_small_boxes_near_zero() {
        let model = tiny_model(10);
        let mut records = corpus(40, 57);
        // keep only regions with area <= 0.1 so random overlap is unlikely
        for rec in &mut records {
            if let Some(regions) = &mut rec.regions {
                regions.retain(|r| r.box_.area() <= 0.1);
                if regions.is_empty() {
                    rec.regions = None;
                }
            }
        }
        let report = grounding_eval(&model, &records, 0.5).unwrap();
        assert!(report.value <= 0.1, "random model scored {}", report.value);
    }

    #[test]
    fn grounding_exact_head_scores_full_marks() {
        // zero weights make the head emit (0,0,0,0); a degenerate
        // ground-truth box at the origin is then an exact match
        let mut model = tiny_model(11);
        model.params.get_mut("head/fc1_w").fill(0.0);
        model.params.get_mut("head/fc2_w").fill(0.0);
        let mut records = corpus(3, 58);
        for rec in &mut records {
            rec.regions = Some(vec![RegionAnnotation {
                box_: crate::geometry::validate_box([0.0, 0.0, 0.0, 0.0]).unwrap(),
                text: "small red circle".into(),
                conf: 1.0,
            }]);
        }
        let report = grounding_eval(&model, &records, 0.5).unwrap();
        assert_eq!(report.value, 1.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let model = tiny_model(12);
        let records = corpus(20, 59);
        let names = class_names();
        let a = region_classify(&model, &records, &names, RegionExtractor::RoiAlign).unwrap();
        let b = region_classify(&model, &records, &names, RegionExtractor::RoiAlign).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_renders_all_rows() {
        let cfg = Config::default();
        let reports = vec![EvalReport {
            task: "grounding".into(),
            metric: "acc@iou0.5".into(),
            value: 0.625,
            split_size: 80,
            config_hash: cfg.digest(),
        }];
        let table = render_table(&reports);
        assert!(table.contains("grounding"));
        assert!(table.contains("0.6250"));
        assert_eq!(table.lines().count(), 2);
    }
}
