//! Training objectives: the symmetric image-text contrastive loss, the
//! region-text contrastive loss with similar-text negative filtering, the
//! box-regression grounding loss, and their weighted total.

use crate::autodiff::{Real, Tape, Var};
use crate::geometry::BoundingBox;
use ndarray::Array2;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("no image in the batch carries region labels")]
    NoRegions,
    #[error("non-finite value in loss component {0}")]
    NonFinite(&'static str),
}

/// Everything the objectives need from one mini-batch forward pass. All
/// embedding rows are unit-norm; `inv_tau` is a 1×1 node holding 1/τ with
/// τ strictly positive by construction (exp of the learned log).
pub struct BatchEmbeddings {
    pub image_embeddings: Var,
    pub caption_embeddings: Var,
    /// Region embeddings (R × d_e), present when any image has labels.
    pub region_embeddings: Option<Var>,
    /// Paired region-caption embeddings, same row order as the regions.
    pub region_text_embeddings: Option<Var>,
    /// Raw box-head predictions from text-prompted embeddings (R × 4).
    pub predicted_boxes: Option<Var>,
    /// Ground-truth boxes, same row order.
    pub region_boxes: Vec<BoundingBox>,
    /// How many of the `batch_size` images carry region labels.
    pub labeled_images: usize,
    pub batch_size: usize,
    pub inv_tau: Var,
}

/// Scalar values of every objective for reporting. The total satisfies
/// total = l_clip + lambda_effective * (l_cloc + l_grounding).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_cloc: f64,
    pub l_grounding: f64,
    pub lambda_effective: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        if !self.l_clip.is_finite() {
            Some("l_clip")
        } else if !self.l_cloc.is_finite() {
            Some("l_cloc")
        } else if !self.l_grounding.is_finite() {
            Some("l_grounding")
        } else if !self.total.is_finite() {
            Some("total")
        } else {
            None
        }
    }
}

fn all_true(n: usize) -> Rc<Array2<bool>> {
    Rc::new(Array2::from_elem((n, n), true))
}

/// Symmetric contrastive loss over matched image/caption rows: softmax
/// cross-entropy on cosine/τ logits, averaged over both directions.
pub fn clip_loss<F: Real>(
    tape: &Tape<F>,
    image_embeddings: Var,
    caption_embeddings: Var,
    inv_tau: Var,
) -> Result<Var, LossError> {
    let n = tape.shape(image_embeddings).0;
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let logits = tape.scale_by(
        tape.matmul(image_embeddings, tape.transpose(caption_embeddings)),
        inv_tau,
    );
    let mask = all_true(n);
    let i2t = tape.masked_diag_cross_entropy(logits, Rc::clone(&mask));
    let t2i = tape.masked_diag_cross_entropy(tape.transpose(logits), mask);
    Ok(tape.scale(tape.add(i2t, t2i), F::from_f64(0.5)))
}

/// Denominator mask for the region-text loss: `true` keeps a pair. Pair
/// (i, j) is dropped when the caption embeddings of regions i and j have
/// cosine above `threshold`; the positive diagonal is never dropped. The
/// mask is a plain boolean array computed from embedding values, so no
/// gradient flows through its construction.
pub fn build_negative_mask<F: Real>(
    region_texts: &Array2<F>,
    threshold: f64,
) -> Array2<bool> {
    let r = region_texts.nrows();
    let mut mask = Array2::from_elem((r, r), true);
    for i in 0..r {
        for j in 0..r {
            if i == j {
                continue;
            }
            let cos = region_texts
                .row(i)
                .iter()
                .zip(region_texts.row(j).iter())
                .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
            if cos.to_f64() > threshold {
                mask[[i, j]] = false;
            }
        }
    }
    mask
}

/// Symmetric region-text contrastive loss. Every region embedding scores
/// against every region caption in the batch; masked pairs drop out of the
/// denominators in both directions. Normalization is by the total number
/// of regions actually sampled, so images with fewer boxes are not
/// over-weighted.
pub fn cloc_loss<F: Real>(
    tape: &Tape<F>,
    region_embeddings: Var,
    region_text_embeddings: Var,
    inv_tau: Var,
    mask: &Array2<bool>,
) -> Result<Var, LossError> {
    let r = tape.shape(region_embeddings).0;
    if r == 0 {
        return Err(LossError::NoRegions);
    }
    assert_eq!(mask.dim(), (r, r), "mask shape");
    let logits = tape.scale_by(
        tape.matmul(region_embeddings, tape.transpose(region_text_embeddings)),
        inv_tau,
    );
    let r2t = tape.masked_diag_cross_entropy(logits, Rc::new(mask.clone()));
    let t2r = tape.masked_diag_cross_entropy(tape.transpose(logits), Rc::new(mask.t().to_owned()));
    Ok(tape.scale(tape.add(r2t, t2r), F::from_f64(0.5)))
}

/// Grounding regression: mean Euclidean distance between predicted and
/// ground-truth corner vectors, divided by the 4 coordinates.
pub fn grounding_loss<F: Real>(
    tape: &Tape<F>,
    predicted_boxes: Var,
    truth: &[BoundingBox],
) -> Result<Var, LossError> {
    let r = tape.shape(predicted_boxes).0;
    if r == 0 {
        return Err(LossError::NoRegions);
    }
    assert_eq!(r, truth.len(), "one target per prediction");
    let mut target = Array2::zeros((r, 4));
    for (i, b) in truth.iter().enumerate() {
        let a = b.as_array();
        for j in 0..4 {
            target[[i, j]] = F::from_f64(a[j]);
        }
    }
    let diff = tape.sub(predicted_boxes, tape.leaf(target));
    let norms = tape.row_norms(diff);
    Ok(tape.scale(tape.mean_all(norms), F::from_f64(0.25)))
}

/// Per-batch loss weight: the fraction of images carrying region labels.
pub fn lambda_effective(labeled_images: usize, batch_size: usize) -> f64 {
    labeled_images as f64 / batch_size as f64
}

/// Assemble the full objective. Images without region labels contribute
/// only to the contrastive image-text term; when nothing in the batch is
/// labeled the region terms vanish and the total reduces to pure CLIP.
pub fn total_loss<F: Real>(
    tape: &Tape<F>,
    batch: &BatchEmbeddings,
    filter_threshold: f64,
) -> Result<(Var, LossBreakdown), LossError> {
    if batch.batch_size == 0 {
        return Err(LossError::EmptyBatch);
    }
    let l_clip = clip_loss(
        tape,
        batch.image_embeddings,
        batch.caption_embeddings,
        batch.inv_tau,
    )?;
    let lambda = lambda_effective(batch.labeled_images, batch.batch_size);

    let (total, breakdown) = if lambda > 0.0 {
        let regions = batch.region_embeddings.expect("regions present");
        let region_texts = batch.region_text_embeddings.expect("region texts present");
        let mask = build_negative_mask(&tape.value(region_texts), filter_threshold);
        let l_cloc = cloc_loss(tape, regions, region_texts, batch.inv_tau, &mask)?;
        // the RoI-align ablation has no text-conditioned extractor and
        // therefore no grounding predictions
        let l_ground = match batch.predicted_boxes {
            Some(preds) => grounding_loss(tape, preds, &batch.region_boxes)?,
            None => tape.leaf(Array2::zeros((1, 1))),
        };
        let weighted = tape.scale(tape.add(l_cloc, l_ground), F::from_f64(lambda));
        let total = tape.add(l_clip, weighted);
        (
            total,
            LossBreakdown {
                l_clip: tape.scalar(l_clip).to_f64(),
                l_cloc: tape.scalar(l_cloc).to_f64(),
                l_grounding: tape.scalar(l_ground).to_f64(),
                lambda_effective: lambda,
                total: tape.scalar(total).to_f64(),
            },
        )
    } else {
        (
            l_clip,
            LossBreakdown {
                l_clip: tape.scalar(l_clip).to_f64(),
                l_cloc: 0.0,
                l_grounding: 0.0,
                lambda_effective: 0.0,
                total: tape.scalar(l_clip).to_f64(),
            },
        )
    };
    if let Some(name) = breakdown.non_finite_component() {
        return Err(LossError::NonFinite(name));
    }
    Ok((total, breakdown))
}
