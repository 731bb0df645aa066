//! The assembled model: parameter initialization for the dual encoder,
//! prompter, box head, and RoI projection, plus the forward passes used by
//! training and evaluation.

use crate::autodiff::{Real, Tape, Var};
use crate::encoders::{
    attention_pool, image_token_stack, patchify, text_embedding_batch, EmbeddingVector,
    EncoderError, Image, ModelConfig, TokenGrid,
};
use crate::geometry::BoundingBox;
use crate::losses::BatchEmbeddings;
use crate::params::{ones, trunc_normal, zeros, ParamStore, ParamVars};
use crate::prompter::{
    predict_boxes, region_embed_by_boxes, region_embed_by_texts, region_embed_roi_align,
    BoxPrompt, PromptKind,
};
use crate::tokenizer::{TokenSequence, Tokenizer};
use ndarray::{arr2, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Which module turns boxes into region embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionExtractor {
    Prompter,
    RoiAlign,
}

impl std::str::FromStr for RegionExtractor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompter" => Ok(RegionExtractor::Prompter),
            "roi_align" => Ok(RegionExtractor::RoiAlign),
            other => Err(format!("unknown region extractor {other:?}")),
        }
    }
}

impl std::fmt::Display for RegionExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionExtractor::Prompter => write!(f, "prompter"),
            RegionExtractor::RoiAlign => write!(f, "roi_align"),
        }
    }
}

fn init_block<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    let hidden = 4 * d;
    store.insert(&format!("{prefix}/ln1_g"), ones(1, d));
    store.insert(&format!("{prefix}/ln1_b"), zeros(1, d));
    for name in ["q", "k", "v"] {
        store.insert(&format!("{prefix}/{name}_w"), trunc_normal(rng, d, d));
        store.insert(&format!("{prefix}/{name}_b"), zeros(1, d));
    }
    store.insert(&format!("{prefix}/o_w"), trunc_normal(rng, d, d));
    store.insert(&format!("{prefix}/o_b"), zeros(1, d));
    store.insert(&format!("{prefix}/ln2_g"), ones(1, d));
    store.insert(&format!("{prefix}/ln2_b"), zeros(1, d));
    store.insert(&format!("{prefix}/fc1_w"), trunc_normal(rng, d, hidden));
    store.insert(&format!("{prefix}/fc1_b"), zeros(1, hidden));
    store.insert(&format!("{prefix}/fc2_w"), trunc_normal(rng, hidden, d));
    store.insert(&format!("{prefix}/fc2_b"), zeros(1, d));
}

/// Build every learnable tensor from scratch. Weights are truncated normal
/// (std 0.02), norms start at identity, and the temperature is stored as
/// log τ so it stays positive under unconstrained updates.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_v;

    store.insert("img/patch_w", trunc_normal(&mut rng, cfg.patch_dim(), d));
    store.insert("img/patch_b", zeros(1, d));
    store.insert("img/cls", trunc_normal(&mut rng, 1, d));
    store.insert("img/pos", trunc_normal(&mut rng, cfg.n_tokens(), d));
    for layer in 0..cfg.n_layers {
        init_block(&mut store, &mut rng, &format!("img/l{layer}"), d);
    }
    store.insert("img/ln_post_g", ones(1, d));
    store.insert("img/ln_post_b", zeros(1, d));
    store.insert("img/pool_q", trunc_normal(&mut rng, 1, d));
    store.insert("img/proj", trunc_normal(&mut rng, d, cfg.d_e));

    store.insert("txt/embed", trunc_normal(&mut rng, cfg.vocab_size, d));
    store.insert("txt/pos", trunc_normal(&mut rng, cfg.max_text_len, d));
    for layer in 0..cfg.n_layers {
        init_block(&mut store, &mut rng, &format!("txt/l{layer}"), d);
    }
    store.insert("txt/ln_post_g", ones(1, d));
    store.insert("txt/ln_post_b", zeros(1, d));
    store.insert("txt/pool_q", trunc_normal(&mut rng, 1, d));
    store.insert("txt/proj", trunc_normal(&mut rng, d, cfg.d_e));

    init_block(&mut store, &mut rng, "prm/l0", d);
    store.insert("prm/ln_post_g", ones(1, d));
    store.insert("prm/ln_post_b", zeros(1, d));
    store.insert("prm/proj", trunc_normal(&mut rng, d, cfg.d_e));
    store.insert("prm/adapter", trunc_normal(&mut rng, cfg.d_e, d));

    store.insert("head/fc1_w", trunc_normal(&mut rng, cfg.d_e, cfg.d_e));
    store.insert("head/fc1_b", zeros(1, cfg.d_e));
    store.insert("head/fc2_w", trunc_normal(&mut rng, cfg.d_e, 4));
    store.insert("head/fc2_b", zeros(1, 4));

    store.insert("roi/proj", trunc_normal(&mut rng, d, cfg.d_e));

    store.insert(
        "temp/log_tau",
        arr2(&[[F::from_f64(cfg.init_temperature.ln())]]),
    );
    store
}

/// One ground-truth region participating in a training step.
#[derive(Debug, Clone)]
pub struct RegionTarget {
    pub image_index: usize,
    pub box_: BoundingBox,
    pub text: TokenSequence,
}

/// Assembled inputs for one batch forward pass.
pub struct BatchInputs<F> {
    pub patch_mats: Vec<Array2<F>>,
    pub image_ids: Vec<u64>,
    pub captions: Vec<TokenSequence>,
    pub regions: Vec<RegionTarget>,
    pub labeled_images: usize,
}

/// A region embedding together with where it came from.
#[derive(Debug, Clone)]
pub struct RegionEmbedding<F> {
    pub embedding: EmbeddingVector<F>,
    pub image_id: u64,
    pub kind: PromptKind,
}

pub struct ClocModel<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub tokenizer: Tokenizer,
    image_encode_calls: AtomicU64,
}

impl<F: Real> ClocModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Self::from_parts(cfg, params))
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore<F>) -> Self {
        ClocModel {
            cfg,
            params,
            tokenizer: Tokenizer::new(),
            image_encode_calls: AtomicU64::new(0),
        }
    }

    /// How many image-encoder forward passes have run. One image encoded
    /// once serves any number of prompts.
    pub fn image_encode_calls(&self) -> u64 {
        self.image_encode_calls.load(Ordering::Relaxed)
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.tokenizer.tokenize(text, self.cfg.max_text_len)
    }

    /// Run the image encoder up to (not including) pooling.
    pub fn encode_image_tokens(&self, image: &Image, image_id: u64) -> Result<TokenGrid<F>, EncoderError> {
        let patches = patchify(image, &self.cfg)?;
        self.image_encode_calls.fetch_add(1, Ordering::Relaxed);
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let stack = image_token_stack(&tape, &p, &self.cfg, vec![patches]);
        Ok(TokenGrid {
            image_id,
            tokens: tape.value(stack).as_ref().clone(),
        })
    }

    /// Pool and project a token grid into the joint space.
    pub fn pool_project_image(&self, grid: &TokenGrid<F>) -> EmbeddingVector<F> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let tokens = tape.leaf(grid.tokens.clone());
        let emb = crate::encoders::pool_project_image(&tape, &p, tokens);
        EmbeddingVector::from_row(tape.value(emb).row(0))
    }

    pub fn encode_text(&self, seq: &TokenSequence) -> Result<EmbeddingVector<F>, EncoderError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let emb = text_embedding_batch(&tape, &p, &self.cfg, &[seq])?;
        Ok(EmbeddingVector::from_row(tape.value(emb).row(0)))
    }

    pub fn extract_region_by_box(
        &self,
        box_: &BoundingBox,
        grid: &TokenGrid<F>,
    ) -> RegionEmbedding<F> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let tokens = tape.leaf(grid.tokens.clone());
        let emb = region_embed_by_boxes(
            &tape,
            &p,
            &self.cfg,
            &[tokens],
            &[BoxPrompt {
                grid_index: 0,
                box_: *box_,
            }],
        );
        RegionEmbedding {
            embedding: EmbeddingVector::from_row(tape.value(emb).row(0)),
            image_id: grid.image_id,
            kind: PromptKind::Box(*box_),
        }
    }

    pub fn extract_region_by_text(
        &self,
        text_embedding: &EmbeddingVector<F>,
        label: &str,
        grid: &TokenGrid<F>,
    ) -> RegionEmbedding<F> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let tokens = tape.leaf(grid.tokens.clone());
        let t = tape.leaf(
            text_embedding
                .values
                .clone()
                .into_shape_with_order((1, text_embedding.dim()))
                .expect("row vector"),
        );
        let emb = region_embed_by_texts(&tape, &p, &self.cfg, &[tokens], &[0], t);
        RegionEmbedding {
            embedding: EmbeddingVector::from_row(tape.value(emb).row(0)),
            image_id: grid.image_id,
            kind: PromptKind::Text(label.to_owned()),
        }
    }

    /// Raw box-head output for a text-prompted region embedding.
    pub fn predict_box(&self, z: &RegionEmbedding<F>) -> [f64; 4] {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let zv = tape.leaf(
            z.embedding
                .values
                .clone()
                .into_shape_with_order((1, z.embedding.dim()))
                .expect("row vector"),
        );
        let out = predict_boxes(&tape, &p, zv);
        let v = tape.value(out);
        [
            v[[0, 0]].to_f64(),
            v[[0, 1]].to_f64(),
            v[[0, 2]].to_f64(),
            v[[0, 3]].to_f64(),
        ]
    }

    pub fn extract_region_roi_align(
        &self,
        box_: &BoundingBox,
        grid: &TokenGrid<F>,
    ) -> RegionEmbedding<F> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let tokens = tape.leaf(grid.tokens.clone());
        let emb = region_embed_roi_align(
            &tape,
            &p,
            &self.cfg,
            &[tokens],
            &[BoxPrompt {
                grid_index: 0,
                box_: *box_,
            }],
        );
        RegionEmbedding {
            embedding: EmbeddingVector::from_row(tape.value(emb).row(0)),
            image_id: grid.image_id,
            kind: PromptKind::Box(*box_),
        }
    }

    /// Full differentiable batch forward: encodes every image once,
    /// reuses its token grid for all prompts, and returns the embeddings
    /// the objectives consume. Region captions and image captions are
    /// deduplicated before text encoding.
    pub fn batch_embeddings(
        &self,
        tape: &Tape<F>,
        p: &ParamVars,
        inputs: &BatchInputs<F>,
        extractor: RegionExtractor,
    ) -> Result<BatchEmbeddings, EncoderError> {
        let n = inputs.patch_mats.len();
        assert!(n > 0, "empty batch");
        assert_eq!(inputs.captions.len(), n);
        self.image_encode_calls.fetch_add(n as u64, Ordering::Relaxed);

        let stack = image_token_stack(tape, p, &self.cfg, inputs.patch_mats.clone());
        let seq = self.cfg.n_tokens();
        let grids: Vec<Var> = (0..n).map(|i| tape.slice_rows(stack, i * seq, seq)).collect();

        let mut pooled = Vec::with_capacity(n);
        for &g in &grids {
            pooled.push(attention_pool(tape, g, p.get("img/pool_q")));
        }
        let image_embeddings =
            tape.normalize_rows(tape.matmul(tape.concat_rows(&pooled), p.get("img/proj")));

        let caption_embeddings = self.deduped_text_batch(tape, p, &inputs.captions)?;

        let inv_tau = tape.exp(tape.neg(p.get("temp/log_tau")));

        let mut batch = BatchEmbeddings {
            image_embeddings,
            caption_embeddings,
            region_embeddings: None,
            region_text_embeddings: None,
            predicted_boxes: None,
            region_boxes: Vec::new(),
            labeled_images: inputs.labeled_images,
            batch_size: n,
            inv_tau,
        };

        if !inputs.regions.is_empty() {
            let texts: Vec<TokenSequence> =
                inputs.regions.iter().map(|r| r.text.clone()).collect();
            let region_texts = self.deduped_text_batch(tape, p, &texts)?;
            let prompts: Vec<BoxPrompt> = inputs
                .regions
                .iter()
                .map(|r| BoxPrompt {
                    grid_index: r.image_index,
                    box_: r.box_,
                })
                .collect();
            let region_embeddings = match extractor {
                RegionExtractor::Prompter => {
                    region_embed_by_boxes(tape, p, &self.cfg, &grids, &prompts)
                }
                RegionExtractor::RoiAlign => {
                    region_embed_roi_align(tape, p, &self.cfg, &grids, &prompts)
                }
            };
            // The grounding path needs a text-conditioned extractor, which
            // only the prompter provides; the RoI ablation trains without it.
            if extractor == RegionExtractor::Prompter {
                let grid_indices: Vec<usize> =
                    inputs.regions.iter().map(|r| r.image_index).collect();
                let z_text = region_embed_by_texts(
                    tape,
                    p,
                    &self.cfg,
                    &grids,
                    &grid_indices,
                    region_texts,
                );
                batch.predicted_boxes = Some(predict_boxes(tape, p, z_text));
            }
            batch.region_embeddings = Some(region_embeddings);
            batch.region_text_embeddings = Some(region_texts);
            batch.region_boxes = inputs.regions.iter().map(|r| r.box_).collect();
        }
        Ok(batch)
    }

    /// Encode a list of sequences, computing each distinct sequence once.
    fn deduped_text_batch(
        &self,
        tape: &Tape<F>,
        p: &ParamVars,
        seqs: &[TokenSequence],
    ) -> Result<Var, EncoderError> {
        let mut unique: Vec<&TokenSequence> = Vec::new();
        let mut index_of: HashMap<&[u32], usize> = HashMap::new();
        let mut gather = Vec::with_capacity(seqs.len());
        for s in seqs {
            let idx = *index_of.entry(s.ids.as_slice()).or_insert_with(|| {
                unique.push(s);
                unique.len() - 1
            });
            gather.push(idx);
        }
        let embeddings = text_embedding_batch(tape, p, &self.cfg, &unique)?;
        if gather.len() == unique.len() && gather.iter().enumerate().all(|(i, &g)| i == g) {
            return Ok(embeddings);
        }
        Ok(tape.gather_rows(embeddings, &gather))
    }
}
