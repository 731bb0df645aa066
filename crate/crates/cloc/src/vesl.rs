//! Region-caption candidate pipeline: noun-phrase extraction from captions
//! via a rule-based POS tagger and chunk grammar, an n-gram candidate mode
//! for ablations, a ground-truth-backed oracle detector that assigns
//! candidates to boxes, and corpus statistics.

use crate::geometry::BoundingBox;
use crate::synthdata::{DatasetRecord, DataError, SceneSpec};
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VeslError {
    #[error("dataset contains no images")]
    ZeroImages,
    #[error("record {id} stores pixels only; annotation needs the scene seed")]
    MissingSeed { id: u64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// English stopwords used to reject degenerate phrase candidates.
pub const STOPWORDS_EN: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "did", "do", "does", "doing", "don", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "s", "same", "she",
    "should", "so", "some", "such", "t", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "you", "your", "yours", "yourself",
    "yourselves",
];

/// Generic web-caption filler stripped from captions before tagging.
pub const COMMON_GENERIC_WORDS: &[&str] = &[
    "alibaba", "aliexpress", "amazon", "available", "background", "blog", "buy", "co", "com",
    "description", "diy", "download", "facebook", "free", "gif", "hd", "ideas", "illustration",
    "illustrations", "image", "images", "img", "instagram", "jpg", "online", "org", "original",
    "page", "pdf", "photo", "photography", "photos", "picclick", "picture", "pictures", "png",
    "porn", "premium", "resolution", "royalty", "sale", "sex", "shutterstock", "stock", "svg",
    "thumbnail", "tumblr", "tumgir", "twitter", "uk", "uploaded", "vector", "vectors", "video",
    "videos", "wallpaper", "wallpapers", "wholesale", "www", "xxx", "youtube",
];

/// Part-of-speech tags the chunker distinguishes. Only the determiner,
/// adjective, and noun classes drive the grammar; everything else just
/// breaks chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Dt,
    Jj,
    Nn,
    Nns,
    In,
    Vb,
    Vbg,
    Vbd,
    Cc,
    Rb,
    Prp,
    Cd,
}

impl PosTag {
    pub fn is_noun(self) -> bool {
        matches!(self, PosTag::Nn | PosTag::Nns)
    }

    pub fn is_adjective(self) -> bool {
        matches!(self, PosTag::Jj)
    }

    pub fn is_determiner(self) -> bool {
        matches!(self, PosTag::Dt)
    }
}

/// Deterministic word → tag table with suffix fallbacks. Unknown words
/// default to NN, which keeps the chunk grammar permissive the way a
/// statistical tagger tends to be on caption text.
pub struct PosLexicon {
    entries: HashMap<&'static str, PosTag>,
}

impl Default for PosLexicon {
    fn default() -> Self {
        Self::new()
    }
}

impl PosLexicon {
    pub fn new() -> Self {
        use PosTag::*;
        let mut entries = HashMap::new();
        let mut add = |words: &[&'static str], tag: PosTag| {
            for &w in words {
                entries.insert(w, tag);
            }
        };
        add(&["a", "an", "the", "this", "that", "these", "those"], Dt);
        add(&["and", "or", "but", "nor"], Cc);
        add(
            &[
                "of", "in", "on", "at", "with", "from", "by", "for", "to", "into", "under",
                "over", "during", "through", "against", "between", "below", "above", "after",
                "before", "about", "as", "off", "up", "down", "out",
            ],
            In,
        );
        add(
            &[
                "is", "are", "was", "were", "be", "been", "being", "am", "have", "has", "had",
                "do", "does", "did", "will", "would", "should", "can", "could", "may", "might",
                "must", "don",
            ],
            Vb,
        );
        add(
            &[
                "very", "too", "so", "now", "then", "here", "there", "again", "further", "once",
                "only", "just", "not", "no", "how", "when", "where", "why",
            ],
            Rb,
        );
        add(
            &[
                "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them",
                "my", "your", "his", "its", "our", "their", "who", "whom", "which", "what",
            ],
            Prp,
        );
        // adjectives common in caption text, including the stopword-listed
        // quantifiers a statistical tagger marks JJ
        add(
            &[
                "small", "big", "red", "green", "blue", "yellow", "purple", "pink", "brown",
                "gray", "large", "tiny", "little", "bright", "dark", "same", "own", "other",
                "such", "both", "each", "few", "more", "most", "some", "all", "any",
            ],
            Jj,
        );
        // the synthetic corpus nouns, spelled out so every vocabulary word
        // has an explicit entry
        add(
            &["picture", "photo", "circle", "square", "triangle"],
            Nn,
        );
        PosLexicon { entries }
    }

    pub fn tag(&self, word: &str) -> PosTag {
        if let Some(&t) = self.entries.get(word) {
            return t;
        }
        if word.chars().all(|c| c.is_ascii_digit()) {
            return PosTag::Cd;
        }
        let n = word.len();
        if n > 3 && word.ends_with('s') && !word.ends_with("ss") {
            return PosTag::Nns;
        }
        if n > 4 && word.ends_with("ing") {
            return PosTag::Vbg;
        }
        if n > 3 && word.ends_with("ed") {
            return PosTag::Vbd;
        }
        if n > 3 && word.ends_with("ly") {
            return PosTag::Rb;
        }
        PosTag::Nn
    }

    /// Whether the synthetic-corpus vocabulary word has a hand-written
    /// entry (suffix rules never decide for these).
    pub fn has_explicit_entry(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }
}

/// A noun-phrase candidate: its surface text and the token span it covers
/// in the original caption (end exclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseCandidate {
    pub text: String,
    pub span: (usize, usize),
}

/// How candidate phrases are produced from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    /// Chunk-grammar noun phrases (DT? JJ* NN+).
    Ner,
    /// All word n-grams with n <= 3, same filters; the weaker baseline.
    Ngram,
}

impl std::str::FromStr for CandidateMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ner" => Ok(CandidateMode::Ner),
            "ngram" => Ok(CandidateMode::Ngram),
            other => Err(format!("unknown candidate mode {other:?}")),
        }
    }
}

pub const DEFAULT_MAX_QUERIES: usize = 20;

fn is_all_stopwords(words: &[&str]) -> bool {
    words.iter().all(|w| STOPWORDS_EN.contains(w))
}

/// Lowercase, tokenize, and drop generic words, keeping each surviving
/// word's index in the original token sequence.
fn filtered_words(caption: &str) -> Vec<(String, usize)> {
    Tokenizer::words(caption)
        .into_iter()
        .enumerate()
        .filter(|(_, w)| !COMMON_GENERIC_WORDS.contains(&w.as_str()))
        .map(|(i, w)| (w, i))
        .collect()
}

/// Noun-phrase candidates from a caption: greedy left-to-right longest
/// match of DT? JJ* NN+ over the tagged, generic-filtered tokens, with
/// all-stopword chunks rejected and the output capped at `max_queries`.
pub fn extract_phrases(
    caption: &str,
    max_queries: usize,
    lexicon: &PosLexicon,
) -> Vec<PhraseCandidate> {
    let words = filtered_words(caption);
    let tags: Vec<PosTag> = words.iter().map(|(w, _)| lexicon.tag(w)).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() && out.len() < max_queries {
        let mut j = i;
        if tags[j].is_determiner() {
            j += 1;
        }
        while j < words.len() && tags[j].is_adjective() {
            j += 1;
        }
        let noun_start = j;
        while j < words.len() && tags[j].is_noun() {
            j += 1;
        }
        if j == noun_start {
            // no noun head here; restart one past the failed position
            i += 1;
            continue;
        }
        let chunk: Vec<&str> = words[i..j].iter().map(|(w, _)| w.as_str()).collect();
        if !is_all_stopwords(&chunk) {
            out.push(PhraseCandidate {
                text: chunk.join(" "),
                span: (words[i].1, words[j - 1].1 + 1),
            });
        }
        i = j;
    }
    out
}

/// All n-grams (n <= 3) over the generic-filtered tokens, in caption
/// order, all-stopword n-grams dropped, capped at `max_queries`.
pub fn ngram_candidates(caption: &str, max_queries: usize) -> Vec<PhraseCandidate> {
    let words = filtered_words(caption);
    let mut out = Vec::new();
    for start in 0..words.len() {
        for n in 1..=3usize {
            if start + n > words.len() || out.len() >= max_queries {
                break;
            }
            let gram: Vec<&str> = words[start..start + n]
                .iter()
                .map(|(w, _)| w.as_str())
                .collect();
            if is_all_stopwords(&gram) {
                continue;
            }
            out.push(PhraseCandidate {
                text: gram.join(" "),
                span: (words[start].1, words[start + n - 1].1 + 1),
            });
        }
        if out.len() >= max_queries {
            break;
        }
    }
    out
}

pub fn candidates(
    caption: &str,
    mode: CandidateMode,
    max_queries: usize,
    lexicon: &PosLexicon,
) -> Vec<PhraseCandidate> {
    match mode {
        CandidateMode::Ner => extract_phrases(caption, max_queries, lexicon),
        CandidateMode::Ngram => ngram_candidates(caption, max_queries),
    }
}

/// A box with its assigned caption and the match confidence that kept it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    #[serde(rename = "box")]
    pub box_: BoundingBox,
    pub text: String,
    pub conf: f64,
}

/// Set-based token F1 between two phrases.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = Tokenizer::words(a).into_iter().collect();
    let sb: HashSet<String> = Tokenizer::words(b).into_iter().collect();
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let p = inter / sa.len() as f64;
    let r = inter / sb.len() as f64;
    2.0 * p * r / (p + r)
}

pub const DETECTION_CONFIDENCE_THRESHOLD: f64 = 0.1;

/// Stand-in for an open-vocabulary detector: every ground-truth region of
/// the scene picks the candidate with the best lexical overlap as its
/// caption; regions whose best score does not clear the confidence
/// threshold are dropped, mimicking detector misses. One candidate may
/// label several boxes.
pub fn oracle_detect(scene: &SceneSpec, candidates: &[PhraseCandidate]) -> Vec<RegionAnnotation> {
    let mut out = Vec::new();
    for (bb, truth) in &scene.regions {
        let mut best: Option<(f64, &PhraseCandidate)> = None;
        for cand in candidates {
            let score = token_f1(&cand.text, truth);
            let better = match best {
                None => score > 0.0,
                Some((s, _)) => score > s,
            };
            if better {
                best = Some((score, cand));
            }
        }
        if let Some((conf, cand)) = best {
            if conf > DETECTION_CONFIDENCE_THRESHOLD {
                out.push(RegionAnnotation {
                    box_: *bb,
                    text: cand.text.clone(),
                    conf,
                });
            }
        }
    }
    out
}

/// Counts reported after an annotation pass.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct AnnotateSummary {
    pub records: usize,
    pub ground_truth_regions: usize,
    pub annotated_regions: usize,
    pub candidates_emitted: usize,
}

impl AnnotateSummary {
    pub fn recovery(&self) -> f64 {
        if self.ground_truth_regions == 0 {
            return 0.0;
        }
        self.annotated_regions as f64 / self.ground_truth_regions as f64
    }
}

/// Re-annotate every record from its caption: candidate extraction plus
/// oracle matching against the regenerated scene. Existing regions are
/// replaced wholesale, so the pass is idempotent.
pub fn annotate_dataset(
    records: &[DatasetRecord],
    mode: CandidateMode,
    max_queries: usize,
) -> Result<(Vec<DatasetRecord>, AnnotateSummary), VeslError> {
    let lexicon = PosLexicon::new();
    let mut summary = AnnotateSummary::default();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let seed = rec.seed.ok_or(VeslError::MissingSeed { id: rec.id })?;
        let scene = crate::synthdata::generate_scene(seed)?;
        let cands = candidates(&rec.caption, mode, max_queries, &lexicon);
        summary.candidates_emitted += cands.len();
        let annotations = oracle_detect(&scene, &cands);
        summary.records += 1;
        summary.ground_truth_regions += scene.regions.len();
        summary.annotated_regions += annotations.len();
        let mut rec = rec.clone();
        rec.regions = if annotations.is_empty() {
            None
        } else {
            Some(annotations)
        };
        out.push(rec);
    }
    Ok((out, summary))
}

/// Corpus-level statistics in the style of region-text dataset tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub image_count: usize,
    pub mean_regions_per_image: f64,
    pub mean_image_caption_tokens: f64,
    pub mean_region_caption_tokens: f64,
}

pub fn dataset_stats(records: &[DatasetRecord]) -> Result<DatasetStats, VeslError> {
    if records.is_empty() {
        return Err(VeslError::ZeroImages);
    }
    let tk = Tokenizer::new();
    let mut region_count = 0usize;
    let mut caption_tokens = 0usize;
    let mut region_tokens = 0usize;
    for rec in records {
        caption_tokens += tk.content_len(&rec.caption);
        if let Some(regions) = &rec.regions {
            region_count += regions.len();
            for r in regions {
                region_tokens += tk.content_len(&r.text);
            }
        }
    }
    let n = records.len() as f64;
    Ok(DatasetStats {
        image_count: records.len(),
        mean_regions_per_image: region_count as f64 / n,
        mean_image_caption_tokens: caption_tokens as f64 / n,
        mean_region_caption_tokens: if region_count == 0 {
            0.0
        } else {
            region_tokens as f64 / region_count as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, generate_scene, CaptionMode};
    use crate::tokenizer::Tokenizer;

    fn phrases(caption: &str) -> Vec<String> {
        let lex = PosLexicon::new();
        extract_phrases(caption, DEFAULT_MAX_QUERIES, &lex)
            .into_iter()
            .map(|c| c.text)
            .collect()
    }

    #[test]
    fn grammar_walkthrough_example() {
        // "photo" is generic and vanishes before tagging; "a" cannot head
        // a chunk without a following noun
        assert_eq!(
            phrases("a photo of the red apples and green vases"),
            vec!["the red apples".to_owned(), "green vases".to_owned()]
        );
    }

    #[test]
    fn lone_determiner_yields_nothing() {
        assert_eq!(phrases("the"), Vec::<String>::new());
    }

    #[test]
    fn all_stopword_chunk_is_rejected() {
        // "s" is a stopword that the suffix rules would otherwise tag NN
        assert_eq!(phrases("the s"), Vec::<String>::new());
    }

    #[test]
    fn empty_caption_yields_nothing() {
        assert_eq!(phrases(""), Vec::<String>::new());
    }

    #[test]
    fn candidate_cap_is_enforced() {
        let many = (0..30)
            .map(|i| format!("wall{i}"))
            .collect::<Vec<_>>()
            .join(" and ");
        let lex = PosLexicon::new();
        let got = extract_phrases(&many, 20, &lex);
        assert_eq!(got.len(), 20);
    }

    #[test]
    fn spans_are_ordered_and_disjoint_in_caption_order() {
        let lex = PosLexicon::new();
        let caption = "a big red circle and a photo of small green vases on the table";
        let cands = extract_phrases(caption, 20, &lex);
        assert!(!cands.is_empty());
        let mut last_end = 0;
        for c in &cands {
            assert!(c.span.0 >= last_end, "overlap at {:?}", c);
            assert!(c.span.1 > c.span.0);
            last_end = c.span.1;
        }
        // spans index the original token sequence
        let words = Tokenizer::words(caption);
        let first = &cands[0];
        assert_eq!(
            words[first.span.0..first.span.1].join(" "),
            first.text
        );
    }

    #[test]
    fn generic_words_never_increase_candidates() {
        let lex = PosLexicon::new();
        let base = "a big red circle and small green vases";
        let baseline = extract_phrases(base, 20, &lex).len();
        let words: Vec<&str> = base.split(' ').collect();
        for pos in 0..=words.len() {
            let mut w = words.clone();
            w.insert(pos, "photo");
            let caption = w.join(" ");
            let n = extract_phrases(&caption, 20, &lex).len();
            assert!(n <= baseline, "{caption:?} grew to {n}");
        }
    }

    #[test]
    fn synthetic_vocabulary_is_explicitly_tagged() {
        let lex = PosLexicon::new();
        for word in [
            "a", "an", "the", "and", "with", "of", "in", "on", "picture", "photo", "small",
            "big", "red", "green", "blue", "yellow", "purple", "pink", "brown", "gray",
            "circle", "square", "triangle",
        ] {
            assert!(lex.has_explicit_entry(word), "{word} relies on fallback");
        }
    }

    #[test]
    fn suffix_rules_fill_lexicon_gaps() {
        let lex = PosLexicon::new();
        assert_eq!(lex.tag("vases"), PosTag::Nns);
        assert_eq!(lex.tag("running"), PosTag::Vbg);
        assert_eq!(lex.tag("painted"), PosTag::Vbd);
        assert_eq!(lex.tag("quickly"), PosTag::Rb);
        assert_eq!(lex.tag("glass"), PosTag::Nn);
        assert_eq!(lex.tag("zebra"), PosTag::Nn);
        assert_eq!(lex.tag("42"), PosTag::Cd);
    }

    #[test]
    fn ngram_mode_enumerates_in_order_with_filters() {
        let got = ngram_candidates("a photo of red apples", 20);
        let texts: Vec<&str> = got.iter().map(|c| c.text.as_str()).collect();
        // "photo" removed; all-stopword grams ("a", "of", "a of") dropped
        assert_eq!(
            texts,
            vec![
                "a of red",
                "of red",
                "of red apples",
                "red",
                "red apples",
                "apples",
            ]
        );
    }

    #[test]
    fn ngram_mode_yields_at_least_as_many_candidates() {
        let lex = PosLexicon::new();
        for seed in 0..50 {
            let scene = generate_scene(seed).unwrap();
            let ner = extract_phrases(&scene.caption, 20, &lex).len();
            let ngram = ngram_candidates(&scene.caption, 20).len();
            assert!(ngram >= ner, "seed {seed}: {ngram} < {ner}");
        }
    }

    #[test]
    fn token_f1_hand_values() {
        assert_eq!(token_f1("big red circle", "big red circle"), 1.0);
        assert_eq!(token_f1("blue square", "red circle"), 0.0);
        let f1 = token_f1("red circle", "big red circle");
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn oracle_exact_match_scores_full_confidence() {
        let scene = generate_scene(3).unwrap();
        let cands: Vec<PhraseCandidate> = scene
            .regions
            .iter()
            .map(|(_, p)| PhraseCandidate {
                text: p.clone(),
                span: (0, 1),
            })
            .collect();
        let anns = oracle_detect(&scene, &cands);
        assert_eq!(anns.len(), scene.regions.len());
        for a in &anns {
            assert_eq!(a.conf, 1.0);
        }
    }

    #[test]
    fn oracle_drops_zero_overlap_regions() {
        let scene = generate_scene(3).unwrap();
        let cands = vec![PhraseCandidate {
            text: "unrelated words entirely".into(),
            span: (0, 3),
        }];
        assert!(oracle_detect(&scene, &cands).is_empty());
    }

    #[test]
    fn oracle_partial_overlap_keeps_above_threshold() {
        let mut scene = generate_scene(5).unwrap();
        scene.regions = vec![(scene.regions[0].0, "big red circle".into())];
        let cands = vec![PhraseCandidate {
            text: "red circle".into(),
            span: (0, 2),
        }];
        let anns = oracle_detect(&scene, &cands);
        assert_eq!(anns.len(), 1);
        assert!((anns[0].conf - 0.8).abs() < 1e-12);
        assert_eq!(anns[0].text, "red circle");
    }

    #[test]
    fn rich_ner_pipeline_recovers_nearly_all_regions() {
        let records = generate_corpus(200, 21, CaptionMode::Rich, None).unwrap();
        let (_, summary) = annotate_dataset(&records, CandidateMode::Ner, 20).unwrap();
        assert!(
            summary.recovery() >= 0.95,
            "recovery {} below 0.95",
            summary.recovery()
        );
        // annotations respect the confidence floor and box validity
        let (annotated, _) = annotate_dataset(&records, CandidateMode::Ner, 20).unwrap();
        for rec in &annotated {
            if let Some(regions) = &rec.regions {
                for r in regions {
                    assert!(r.conf > DETECTION_CONFIDENCE_THRESHOLD);
                    assert!(crate::geometry::validate_box(r.box_.as_array()).is_ok());
                }
            }
        }
    }

    #[test]
    fn annotation_is_idempotent() {
        let records = generate_corpus(30, 22, CaptionMode::Rich, None).unwrap();
        let (once, s1) = annotate_dataset(&records, CandidateMode::Ner, 20).unwrap();
        let (twice, s2) = annotate_dataset(&once, CandidateMode::Ner, 20).unwrap();
        assert_eq!(once, twice);
        assert_eq!(s1.annotated_regions, s2.annotated_regions);
    }

    #[test]
    fn impoverished_ngram_recovers_fewer_regions_than_rich_ner() {
        let rich = generate_corpus(150, 23, CaptionMode::Rich, None).unwrap();
        let poor = generate_corpus(150, 23, CaptionMode::Impoverished, None).unwrap();
        let (_, ner_summary) = annotate_dataset(&rich, CandidateMode::Ner, 20).unwrap();
        let (_, ngram_summary) = annotate_dataset(&poor, CandidateMode::Ngram, 20).unwrap();
        assert!(ngram_summary.recovery() <= ner_summary.recovery());
    }

    #[test]
    fn stats_mean_regions() {
        let mut records = generate_corpus(2, 24, CaptionMode::Rich, None).unwrap();
        // force 3 and 5 regions
        let r0 = records[0].regions.as_ref().unwrap()[0].clone();
        records[0].regions = Some(vec![r0.clone(); 3]);
        records[1].regions = Some(vec![r0; 5]);
        let stats = dataset_stats(&records).unwrap();
        assert_eq!(stats.image_count, 2);
        assert!((stats.mean_regions_per_image - 4.0).abs() < 1e-12);
    }

    #[test]
    fn stats_reject_empty_dataset() {
        assert!(matches!(dataset_stats(&[]), Err(VeslError::ZeroImages)));
    }

    #[test]
    fn stats_reproducible_across_regeneration() {
        let a = generate_corpus(100, 25, CaptionMode::Rich, None).unwrap();
        let b = generate_corpus(100, 25, CaptionMode::Rich, None).unwrap();
        assert_eq!(dataset_stats(&a).unwrap(), dataset_stats(&b).unwrap());
    }
}
