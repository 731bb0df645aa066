//! Dual-encoder building blocks: model configuration, image patching, and
//! the pre-norm transformer stacks shared by the image encoder, the text
//! encoder, and the region prompter.
//!
//! Forward passes are expressed on an autodiff [`Tape`], with sequences of
//! equal length packed into row-stacked matrices so the expensive
//! projections run as a few large matrix products.

use crate::autodiff::{Real, Tape, Var};
use crate::params::ParamVars;
use crate::tokenizer::TokenSequence;
use ndarray::{Array1, Array2};
use thiserror::Error;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("image is {got_h}x{got_w}, config expects {expect}x{expect}")]
    ShapeMismatch {
        got_h: usize,
        got_w: usize,
        expect: usize,
    },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
}

/// Architecture hyper-parameters for the full dual encoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_e: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub init_temperature: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; the reference hyper-parameter ratios are kept
    /// while sizes are shrunk to CPU scale.
    pub fn desk_default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            d_v: 128,
            n_layers: 2,
            n_heads: 4,
            d_e: 64,
            vocab_size: crate::tokenizer::Tokenizer::new().vocab_size(),
            max_text_len: 77,
            init_temperature: 0.07,
        }
    }

    /// Minimal config for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            d_v: 16,
            n_layers: 2,
            n_heads: 2,
            d_e: 8,
            vocab_size: crate::tokenizer::Tokenizer::new().vocab_size(),
            max_text_len: 16,
            init_temperature: 0.07,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_v % self.n_heads != 0 {
            return fail(format!(
                "d_v {} not divisible by n_heads {}",
                self.d_v, self.n_heads
            ));
        }
        if self.d_v % 2 != 0 || self.d_v < 4 {
            return fail(format!("d_v {} must be even and >= 4", self.d_v));
        }
        if self.max_text_len > 77 || self.max_text_len < 2 {
            return fail(format!("max_text_len {} outside 2..=77", self.max_text_len));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.d_e == 0 {
            return fail("d_e must be >= 1".into());
        }
        if self.vocab_size < 3 {
            return fail("vocab_size must cover the sentinel ids".into());
        }
        if !(self.init_temperature > 0.0) {
            return fail(format!(
                "init_temperature {} must be positive",
                self.init_temperature
            ));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Patch tokens plus the learned summary token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// RGB image with values in [0, 1], row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, rgb: Vec<f32>) -> Self {
        assert_eq!(rgb.len(), height * width * 3, "pixel buffer size");
        Image { height, width, rgb }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.rgb[(y * self.width + x) * 3 + c]
    }
}

/// Long-side resize to `target`, preserving aspect ratio, then center-pad
/// with zeros to a square. A square image already at `target` passes
/// through untouched.
pub fn resize_with_pad(img: &Image, target: usize) -> Image {
    if img.height == target && img.width == target {
        return img.clone();
    }
    let long = img.height.max(img.width) as f64;
    let scale = target as f64 / long;
    let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, target);
    let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, target);
    let mut resized = vec![0.0f32; new_h * new_w * 3];
    for y in 0..new_h {
        for x in 0..new_w {
            // bilinear sample at the source location of this pixel center
            let sy = ((y as f64 + 0.5) * img.height as f64 / new_h as f64 - 0.5)
                .clamp(0.0, (img.height - 1) as f64);
            let sx = ((x as f64 + 0.5) * img.width as f64 / new_w as f64 - 0.5)
                .clamp(0.0, (img.width - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(img.height - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let fy = (sy - y0 as f64) as f32;
            let fx = (sx - x0 as f64) as f32;
            for c in 0..3 {
                let v = img.at(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
                    + img.at(y0, x1, c) * (1.0 - fy) * fx
                    + img.at(y1, x0, c) * fy * (1.0 - fx)
                    + img.at(y1, x1, c) * fy * fx;
                resized[(y * new_w + x) * 3 + c] = v;
            }
        }
    }
    let mut out = vec![0.0f32; target * target * 3];
    let off_y = (target - new_h) / 2;
    let off_x = (target - new_w) / 2;
    for y in 0..new_h {
        for x in 0..new_w {
            for c in 0..3 {
                out[((y + off_y) * target + (x + off_x)) * 3 + c] = resized[(y * new_w + x) * 3 + c];
            }
        }
    }
    Image::new(target, target, out)
}

/// Flatten an image into its patch matrix: one row per patch (row-major
/// over the patch lattice), pixels row-major within a patch, channels
/// interleaved.
pub fn patchify<F: Real>(img: &Image, cfg: &ModelConfig) -> Result<Array2<F>, EncoderError> {
    if img.height != cfg.image_size || img.width != cfg.image_size {
        return Err(EncoderError::ShapeMismatch {
            got_h: img.height,
            got_w: img.width,
            expect: cfg.image_size,
        });
    }
    let g = cfg.patches_per_side();
    let ps = cfg.patch_size;
    let mut out = Array2::zeros((cfg.n_patches(), cfg.patch_dim()));
    for py in 0..g {
        for px in 0..g {
            let row = py * g + px;
            let mut col = 0;
            for dy in 0..ps {
                for dx in 0..ps {
                    for c in 0..3 {
                        out[[row, col]] = F::from_f64(img.at(py * ps + dy, px * ps + dx, c) as f64);
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Image token matrix before pooled projection: (n_patches + 1) rows of
/// width d_v, row 0 being the summary token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F> {
    pub image_id: u64,
    pub tokens: Array2<F>,
}

/// Unit-norm vector in the joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<F> {
    pub values: Array1<F>,
}

impl<F: Real> EmbeddingVector<F> {
    pub fn from_row(row: ndarray::ArrayView1<F>) -> Self {
        let v = EmbeddingVector {
            values: row.to_owned(),
        };
        debug_assert!((v.norm().to_f64() - 1.0).abs() < 1e-5, "non-unit embedding");
        v
    }

    pub fn norm(&self) -> F {
        self.values
            .fold(F::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn cosine(&self, other: &Self) -> F {
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A contiguous run of equal-length sequences inside a row stack.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub batch: usize,
    pub seq: usize,
}

/// One pre-norm transformer block (attention + MLP, residual around each)
/// applied to a stack of sequences described by `segments`.
pub fn transformer_block<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    segments: &[Segment],
    heads: usize,
) -> Var {
    let g = |suffix: &str| p.get(&format!("{prefix}/{suffix}"));
    let h = tape.layer_norm(x, g("ln1_g"), g("ln1_b"), F::from_f64(LN_EPS));
    let q = tape.add_row(tape.matmul(h, g("q_w")), g("q_b"));
    let k = tape.add_row(tape.matmul(h, g("k_w")), g("k_b"));
    let v = tape.add_row(tape.matmul(h, g("v_w")), g("v_b"));
    let attended = if segments.len() == 1 {
        tape.attention(q, k, v, segments[0].batch, segments[0].seq, heads)
    } else {
        let mut parts = Vec::with_capacity(segments.len());
        let mut at = 0;
        for seg in segments {
            let rows = seg.batch * seg.seq;
            let qs = tape.slice_rows(q, at, rows);
            let ks = tape.slice_rows(k, at, rows);
            let vs = tape.slice_rows(v, at, rows);
            parts.push(tape.attention(qs, ks, vs, seg.batch, seg.seq, heads));
            at += rows;
        }
        tape.concat_rows(&parts)
    };
    let attn_out = tape.add_row(tape.matmul(attended, g("o_w")), g("o_b"));
    let x = tape.add(x, attn_out);
    let h2 = tape.layer_norm(x, g("ln2_g"), g("ln2_b"), F::from_f64(LN_EPS));
    let m = tape.gelu(tape.add_row(tape.matmul(h2, g("fc1_w")), g("fc1_b")));
    let m = tape.add_row(tape.matmul(m, g("fc2_w")), g("fc2_b"));
    tape.add(x, m)
}

/// Run `n_layers` blocks then the final layer norm.
pub fn encoder_stack<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    prefix: &str,
    mut x: Var,
    segments: &[Segment],
    heads: usize,
    n_layers: usize,
) -> Var {
    for layer in 0..n_layers {
        x = transformer_block(tape, p, &format!("{prefix}/l{layer}"), x, segments, heads);
    }
    tape.layer_norm(
        x,
        p.get(&format!("{prefix}/ln_post_g")),
        p.get(&format!("{prefix}/ln_post_b")),
        F::from_f64(LN_EPS),
    )
}

/// Single-query attention pooling of one sequence: softmax(tokens · q / √d)
/// weights a convex combination of the tokens.
pub fn attention_pool<F: Real>(tape: &Tape<F>, tokens: Var, query: Var) -> Var {
    let d = tape.shape(tokens).1;
    let scores = tape.matmul(tokens, tape.transpose(query));
    let scores = tape.scale(scores, F::from_f64(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax_rows(tape.transpose(scores));
    tape.matmul(weights, tokens)
}

/// Embed the full image batch up to (but not including) pooling: patch
/// embedding, summary token, learned positions, transformer stack, final
/// norm. Returns the (batch · n_tokens) × d_v stack.
pub fn image_token_stack<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    cfg: &ModelConfig,
    patch_mats: Vec<Array2<F>>,
) -> Var {
    let batch = patch_mats.len();
    assert!(batch > 0, "empty image batch");
    let mut per_image = Vec::with_capacity(batch);
    let cls = p.get("img/cls");
    let pos = p.get("img/pos");
    for patches in patch_mats {
        let embedded = tape.add_row(
            tape.matmul(tape.leaf(patches), p.get("img/patch_w")),
            p.get("img/patch_b"),
        );
        let with_cls = tape.concat_rows(&[cls, embedded]);
        per_image.push(tape.add(with_cls, pos));
    }
    let stack = tape.concat_rows(&per_image);
    encoder_stack(
        tape,
        p,
        "img",
        stack,
        &[Segment {
            batch,
            seq: cfg.n_tokens(),
        }],
        cfg.n_heads,
        cfg.n_layers,
    )
}

/// Pool and project one image's token rows into the joint space.
pub fn pool_project_image<F: Real>(tape: &Tape<F>, p: &ParamVars, tokens: Var) -> Var {
    let pooled = attention_pool(tape, tokens, p.get("img/pool_q"));
    tape.normalize_rows(tape.matmul(pooled, p.get("img/proj")))
}

/// Encode a batch of token sequences into unit-norm embeddings, one row
/// per input sequence, in input order. Sequences are grouped by length so
/// attention runs on rectangular packs; duplicates are NOT deduplicated
/// here — callers dedupe when profitable.
pub fn text_embedding_batch<F: Real>(
    tape: &Tape<F>,
    p: &ParamVars,
    cfg: &ModelConfig,
    seqs: &[&TokenSequence],
) -> Result<Var, EncoderError> {
    assert!(!seqs.is_empty(), "empty text batch");
    for s in seqs {
        for &id in &s.ids {
            if id as usize >= cfg.vocab_size {
                return Err(EncoderError::TokenOutOfRange {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
        }
        assert!(s.len() <= cfg.max_text_len, "sequence exceeds max_text_len");
        assert!(!s.is_empty(), "empty token sequence");
    }
    // stable sort by length keeps grouping deterministic
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| (seqs[i].len(), i));

    let mut flat_ids = Vec::new();
    let mut flat_pos = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    for &i in &order {
        let len = seqs[i].len();
        match segments.last_mut() {
            Some(seg) if seg.seq == len => seg.batch += 1,
            _ => segments.push(Segment { batch: 1, seq: len }),
        }
        flat_ids.extend(seqs[i].ids.iter().map(|&t| t as usize));
        flat_pos.extend(0..len);
    }
    let embedded = tape.add(
        tape.gather_rows(p.get("txt/embed"), &flat_ids),
        tape.gather_rows(p.get("txt/pos"), &flat_pos),
    );
    let encoded = encoder_stack(tape, p, "txt", embedded, &segments, cfg.n_heads, cfg.n_layers);

    let mut pooled = Vec::with_capacity(order.len());
    let mut at = 0;
    for &i in &order {
        let len = seqs[i].len();
        let rows = tape.slice_rows(encoded, at, len);
        pooled.push(attention_pool(tape, rows, p.get("txt/pool_q")));
        at += len;
    }
    let pooled = tape.concat_rows(&pooled);
    let projected = tape.normalize_rows(tape.matmul(pooled, p.get("txt/proj")));
    // undo the length sort
    let mut inverse = vec![0usize; order.len()];
    for (sorted_pos, &orig) in order.iter().enumerate() {
        inverse[orig] = sorted_pos;
    }
    Ok(tape.gather_rows(projected, &inverse))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk_default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut bad = ModelConfig::desk_default();
        bad.patch_size = 7;
        assert!(matches!(bad.validate(), Err(EncoderError::InvalidConfig(_))));
        let mut bad = ModelConfig::desk_default();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk_default();
        bad.max_text_len = 99;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn token_row_count_follows_config() {
        let cfg = ModelConfig::desk_default();
        assert_eq!(cfg.n_tokens(), 17); // (32/8)^2 + 1
    }

    #[test]
    fn patchify_rejects_wrong_shape() {
        let cfg = ModelConfig::desk_default();
        let img = Image::new(16, 16, vec![0.0; 16 * 16 * 3]);
        assert!(matches!(
            patchify::<f32>(&img, &cfg),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn patchify_layout_places_pixels() {
        let cfg = ModelConfig::tiny(); // 16 px, patch 8 -> 2x2 lattice
        let mut rgb = vec![0.0f32; 16 * 16 * 3];
        // pixel at (y=9, x=2), green channel -> patch row 2 (py=1, px=0)
        rgb[(9 * 16 + 2) * 3 + 1] = 0.7;
        let img = Image::new(16, 16, rgb);
        let m: Array2<f64> = patchify(&img, &cfg).unwrap();
        let col = ((9 - 8) * 8 + 2) * 3 + 1;
        assert!((m[[2, col]] - 0.7).abs() < 1e-6);
        assert_eq!(m.sum(), m[[2, col]]);
    }

    #[test]
    fn resize_with_pad_identity_on_square_target() {
        let img = Image::new(32, 32, vec![0.5; 32 * 32 * 3]);
        assert_eq!(resize_with_pad(&img, 32), img);
    }

    #[test]
    fn resize_with_pad_pads_short_side_with_zeros() {
        let img = Image::new(2, 4, vec![1.0; 2 * 4 * 3]);
        let out = resize_with_pad(&img, 4);
        assert_eq!(out.height, 4);
        assert_eq!(out.width, 4);
        // long side scaled to 4, short side to 2, centered: rows 1..3 filled
        assert_eq!(out.at(0, 0, 0), 0.0);
        assert_eq!(out.at(1, 1, 0), 1.0);
        assert_eq!(out.at(2, 3, 2), 1.0);
        assert_eq!(out.at(3, 0, 0), 0.0);
    }
}
