//! Promptable region extraction.
//!
//! The prompter is a single-layer, single-head transformer encoder that
//! reads prompt tokens prepended to an image's token rows and emits a
//! pooled, projected, unit-norm region embedding. Prompts are either the
//! positional encoding of a box's corners or one adapted text embedding.
//! A two-layer GELU head regresses box coordinates from text-prompted
//! embeddings, and a bilinear RoI-align path serves as the ablation
//! baseline that bypasses the prompter entirely.

use crate::autodiff::{Real, Tape, Var};
use crate::encoders::{encoder_stack, ModelConfig, Segment};
use crate::geometry::{encode_box_prompt, BoundingBox};
use crate::params::ParamVars;
use ndarray::Array2;

/// The prompter is fixed at one layer and one head regardless of the
/// encoder depth.
pub const PROMPTER_LAYERS: usize = 1;
pub const PROMPTER_HEADS: usize = 1;

/// Where a region embedding came from.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptKind {
    Box(BoundingBox),
    Text(String),
}

/// A prompt against one image of the batch: which token grid to read and
/// what to condition on.
#[derive(Debug, Clone)]
pub struct BoxPrompt {
    pub grid_index: usize,
    pub box_: BoundingBox,
}

fn prompter_pooled<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    sequences: Vec<Var>,
    seq_len: usize,
) -> Var {
    let batch = sequences.len();
    let stack = tape.concat_rows(&sequences);
    let encoded = encoder_stack(
        tape,
        p,
        "prm",
        stack,
        &[Segment {
            batch,
            seq: seq_len,
        }],
        PROMPTER_HEADS,
        PROMPTER_LAYERS,
    );
    // global average pool over every output token (prompt + image)
    let mut pooled = Vec::with_capacity(batch);
    for i in 0..batch {
        let rows = tape.slice_rows(encoded, i * seq_len, seq_len);
        pooled.push(tape.mean_rows(rows));
    }
    tape.concat_rows(&pooled)
}

/// Region embeddings for a batch of box prompts. `grids` are per-image
/// token matrices (n_tokens × d_v) already on the tape; one grid may be
/// referenced by many prompts without re-encoding the image.
pub fn region_embed_by_boxes<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    cfg: &ModelConfig,
    grids: &[Var],
    prompts: &[BoxPrompt],
) -> Var {
    assert!(!prompts.is_empty(), "no box prompts");
    let mut sequences = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let enc = encode_box_prompt(&prompt.box_, cfg.d_v).expect("valid d_v");
        let tokens = tape.leaf(enc.tokens.mapv(F::from_f64));
        sequences.push(tape.concat_rows(&[tokens, grids[prompt.grid_index]]));
    }
    let pooled = prompter_pooled(tape, p, sequences, 2 + cfg.n_tokens());
    tape.normalize_rows(tape.matmul(pooled, p.get("prm/proj")))
}

/// Region embeddings conditioned on text. `text_embeddings` is an R × d_e
/// matrix of unit-norm prompts (one row per region); the adapter maps each
/// into a d_v prompt token before the shared prompter layer.
pub fn region_embed_by_texts<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    cfg: &ModelConfig,
    grids: &[Var],
    grid_indices: &[usize],
    text_embeddings: Var,
) -> Var {
    assert!(!grid_indices.is_empty(), "no text prompts");
    assert_eq!(tape.shape(text_embeddings).0, grid_indices.len());
    let prompt_tokens = tape.matmul(text_embeddings, p.get("prm/adapter"));
    let mut sequences = Vec::with_capacity(grid_indices.len());
    for (row, &gi) in grid_indices.iter().enumerate() {
        let tok = tape.slice_rows(prompt_tokens, row, 1);
        sequences.push(tape.concat_rows(&[tok, grids[gi]]));
    }
    let pooled = prompter_pooled(tape, p, sequences, 1 + cfg.n_tokens());
    tape.normalize_rows(tape.matmul(pooled, p.get("prm/proj")))
}

/// Box regression head: two linear layers with a GELU between, raw
/// (unclamped) 4-vector per row.
pub fn predict_boxes<F: Real>(tape: &Tape<F>, p: &ParamVars, z: Var) -> Var {
    let h = tape.gelu(tape.add_row(tape.matmul(z, p.get("head/fc1_w")), p.get("head/fc1_b")));
    tape.add_row(tape.matmul(h, p.get("head/fc2_w")), p.get("head/fc2_b"))
}

/// Sampling positions and bilinear weights for a 2×2 RoI-align over a
/// g×g lattice, one sample per bin. Returns a 4 × g² weight matrix whose
/// product with the patch rows yields the four interpolated features.
pub fn roi_bilinear_weights(b: &BoundingBox, lattice: usize) -> Array2<f64> {
    let g = lattice;
    let mut weights = Array2::zeros((4, g * g));
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let mut sample = 0;
    for by in 0..2 {
        for bx in 0..2 {
            let sx = b.x1 + (bx as f64 + 0.5) * w / 2.0;
            let sy = b.y1 + (by as f64 + 0.5) * h / 2.0;
            // continuous lattice coordinates; cell centers at k + 0.5
            let fx = (sx * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let fy = (sy * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let x0 = (fx.floor() as usize).min(g.saturating_sub(2));
            let y0 = (fy.floor() as usize).min(g.saturating_sub(2));
            let (x1, y1) = if g > 1 { (x0 + 1, y0 + 1) } else { (x0, y0) };
            let lx = fx - x0 as f64;
            let ly = fy - y0 as f64;
            weights[[sample, y0 * g + x0]] += (1.0 - ly) * (1.0 - lx);
            weights[[sample, y0 * g + x1]] += (1.0 - ly) * lx;
            weights[[sample, y1 * g + x0]] += ly * (1.0 - lx);
            weights[[sample, y1 * g + x1]] += ly * lx;
            sample += 1;
        }
    }
    weights
}

/// RoI-align region embeddings: bilinear 2×2 sampling over the patch
/// lattice, mean-pooled, projected, and normalized. The summary token is
/// not part of the lattice and is ignored.
pub fn region_embed_roi_align<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    cfg: &ModelConfig,
    grids: &[Var],
    prompts: &[BoxPrompt],
) -> Var {
    assert!(!prompts.is_empty(), "no roi prompts");
    let g = cfg.patches_per_side();
    let mut pooled = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let weights = roi_bilinear_weights(&prompt.box_, g).mapv(F::from_f64);
        let patch_rows = tape.slice_rows(grids[prompt.grid_index], 1, cfg.n_patches());
        let sampled = tape.matmul(tape.leaf(weights), patch_rows);
        pooled.push(tape.mean_rows(sampled));
    }
    let stacked = tape.concat_rows(&pooled);
    tape.normalize_rows(tape.matmul(stacked, p.get("roi/proj")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::validate_box;

    #[test]
    fn bilinear_weights_rows_sum_to_one() {
        let b = validate_box([0.1, 0.2, 0.8, 0.9]).unwrap();
        for g in [1usize, 2, 4, 7] {
            let w = roi_bilinear_weights(&b, g);
            for row in w.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-12, "g={g}: row sum {s}");
            }
        }
    }

    #[test]
    fn bilinear_weights_inside_single_cell_on_2x2_lattice() {
        // box entirely inside the top-left cell of a 2x2 lattice; cell
        // centers sit at lattice coords 0.5 and 1.5, i.e. fractions 0.25
        // and 0.75
        let b = validate_box([0.05, 0.05, 0.20, 0.20]).unwrap();
        let w = roi_bilinear_weights(&b, 2);
        // hand computation for the first sample point: sx = sy = 0.0875,
        // fx = fy = clamp(0.175 - 0.5) = 0 -> all weight on cell (0,0)
        assert!((w[[0, 0]] - 1.0).abs() < 1e-12);
        for sample in 0..4 {
            // every sample interpolates within the immediate neighborhood
            // of cell (0,0): cells 0, 1, 2, 3 only, dominated by cell 0
            let total: f64 = w.row(sample).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(w[[sample, 0]] >= 0.25);
        }
    }

    #[test]
    fn full_image_box_matches_direct_resample() {
        let b = validate_box([0.0, 0.0, 1.0, 1.0]).unwrap();
        let g = 4;
        let w = roi_bilinear_weights(&b, g);
        // directly recompute the four bin-center interpolations
        for (sample, (by, bx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            let sx = (*bx as f64 + 0.5) / 2.0;
            let sy = (*by as f64 + 0.5) / 2.0;
            let fx = (sx * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let fy = (sy * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let lx = fx - x0 as f64;
            let ly = fy - y0 as f64;
            assert!((w[[sample, y0 * g + x0]] - (1.0 - lx) * (1.0 - ly)).abs() < 1e-12);
            assert!((w[[sample, y0 * g + x0 + 1]] - lx * (1.0 - ly)).abs() < 1e-12);
        }
    }
}
