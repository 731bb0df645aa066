//! Command-line entry point: corpus generation, caption annotation,
//! training, evaluation, embedding export, and dataset statistics.
//!
//! Exit codes: 0 success, 2 usage or configuration errors, 3 I/O or data
//! corruption. Logs go to stderr; data goes to files or stdout.

use clap::{Parser, Subcommand};
use cloc::config::{Config, ConfigError};
use cloc::eval::{self, render_table, EvalError, EvalReport};
use cloc::geometry::validate_box;
use cloc::synthdata::{
    generate_corpus, read_dataset, write_dataset, CaptionMode, DataError,
};
use cloc::trainer::{load_model, PreparedCorpus, TrainError, TrainState};
use cloc::vesl::{annotate_dataset, dataset_stats, CandidateMode, VeslError};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cloc",
    about = "Contrastive localized language-image pre-training at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic region-text corpus.
    GenData {
        /// Number of records to generate.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// rich: every region phrase in the caption; impoverished: one.
        #[arg(long, default_value = "rich")]
        caption_mode: String,
        /// Store raw rasters at this resolution instead of seeds.
        #[arg(long)]
        raster_size: Option<usize>,
    },
    /// Re-annotate a corpus from its captions (candidates + oracle match).
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ner (chunk grammar) or ngram (n <= 3 grams).
        #[arg(long, default_value = "ner")]
        candidates: String,
        #[arg(long, default_value_t = cloc::vesl::DEFAULT_MAX_QUERIES)]
        max_queries: usize,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written when the run finishes.
        #[arg(long)]
        out: PathBuf,
        /// Steps to run now (default: up to the configured total).
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Append per-step loss lines to this file instead of stdout.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        extractor: Option<String>,
        /// Extra `key=value` config overrides (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// region-classify | region-retrieve | image-retrieve | grounding | all
        #[arg(long, default_value = "all")]
        task: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        /// Region extractor (defaults to the checkpoint's setting).
        #[arg(long)]
        extractor: Option<String>,
        /// Evaluate at most this many regions.
        #[arg(long)]
        limit_regions: Option<usize>,
        /// Count only the exact paired caption as a retrieval hit.
        #[arg(long)]
        no_duplicate_hits: bool,
    },
    /// Dump image/region/text embeddings as JSON lines.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        /// Also emit a region embedding for this box on every image.
        #[arg(long = "box")]
        box_: Option<String>,
        /// Also emit this text's embedding.
        #[arg(long)]
        text: Option<String>,
    },
    /// Print dataset statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vesl(#[from] VeslError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Vesl(e) => match e {
                VeslError::Data(_) | VeslError::MissingSeed { .. } => 3,
                VeslError::ZeroImages => 1,
            },
            CliError::Train(e) => match e {
                TrainError::Data(_) | TrainError::Checkpoint(_) => 3,
                TrainError::Config(_) => 2,
                _ => 1,
            },
            CliError::Eval(e) => match e {
                EvalError::Data(_) => 3,
                _ => 1,
            },
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn parse_mode<T: std::str::FromStr<Err = String>>(value: &str) -> Result<T, CliError> {
    value.parse().map_err(CliError::Usage)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            count,
            seed,
            out,
            caption_mode,
            raster_size,
        } => {
            let mode: CaptionMode = parse_mode(&caption_mode)?;
            let records = generate_corpus(count as usize, seed, mode, raster_size)?;
            write_dataset(&records, &out)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }

        Command::Annotate {
            input,
            out,
            candidates,
            max_queries,
        } => {
            let mode: CandidateMode = parse_mode(&candidates)?;
            let records = read_dataset(&input)?;
            let (annotated, summary) = annotate_dataset(&records, mode, max_queries)?;
            write_dataset(&annotated, &out)?;
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
            eprintln!(
                "annotated {} records: {}/{} regions recovered ({:.1}%)",
                summary.records,
                summary.annotated_regions,
                summary.ground_truth_regions,
                100.0 * summary.recovery()
            );
            Ok(())
        }

        Command::Train {
            config,
            data,
            out,
            steps,
            resume,
            loss_log,
            seed,
            batch_size,
            extractor,
            set,
        } => {
            let mut state = if let Some(ckpt) = &resume {
                TrainState::load_checkpoint(ckpt)?
            } else {
                let mut cfg = match &config {
                    Some(path) => {
                        let text =
                            std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                        Config::from_text(&text)?
                    }
                    None => Config::default(),
                };
                // explicit flags and --set overrides beat the file
                if let Some(seed) = seed {
                    cfg.set("seed", &seed.to_string())?;
                }
                if let Some(batch) = batch_size {
                    cfg.set("batch_size", &batch.to_string())?;
                }
                if let Some(ex) = &extractor {
                    cfg.set("region_extractor", ex)?;
                }
                for kv in &set {
                    let (k, v) = kv.split_once('=').ok_or_else(|| {
                        CliError::Usage(format!("--set expects key=value, got {kv:?}"))
                    })?;
                    cfg.set(k.trim(), v.trim())?;
                }
                cfg.validate()?;
                TrainState::new(cfg)?
            };

            let records = read_dataset(&data)?;
            let corpus = PreparedCorpus::prepare(&records, &state.model)?;
            let remaining = state.config.train.total_steps.saturating_sub(state.step);
            let steps = steps.unwrap_or(remaining);

            let mut log: Box<dyn Write> = match &loss_log {
                Some(path) => Box::new(
                    std::fs::File::create(path).map_err(|e| io_err(path, e))?,
                ),
                None => Box::new(std::io::stdout()),
            };
            state.train(&corpus, steps, |step, lr, b| {
                writeln!(
                    log,
                    "step={} lr={:.6e} l_clip={:.6} l_cloc={:.6} l_grounding={:.6} lambda={:.4} total={:.6}",
                    step, lr, b.l_clip, b.l_cloc, b.l_grounding, b.lambda_effective, b.total
                )
                .expect("loss log writable");
            })?;
            state.save_checkpoint(&out)?;
            eprintln!(
                "trained {} steps (now at {}), checkpoint at {}",
                steps,
                state.step,
                out.display()
            );
            Ok(())
        }

        Command::Eval {
            checkpoint,
            data,
            task,
            k,
            iou_threshold,
            extractor,
            limit_regions,
            no_duplicate_hits,
        } => {
            let (model, config) = load_model(&checkpoint)?;
            let records = read_dataset(&data)?;
            let extractor = match &extractor {
                Some(e) => parse_mode(e)?,
                None => config.train.region_extractor,
            };
            let duplicates = !no_duplicate_hits;
            let mut reports: Vec<EvalReport> = Vec::new();
            let wants = |t: &str| task == t || task == "all";
            if wants("region-classify") {
                reports.push(eval::region_classify(
                    &model,
                    &records,
                    &cloc::synthdata::class_names(),
                    extractor,
                )?);
            }
            if wants("region-retrieve") {
                let s =
                    eval::region_retrieve(&model, &records, k, extractor, duplicates, limit_regions)?;
                reports.push(s.forward);
                reports.push(s.backward);
            }
            if wants("image-retrieve") {
                let s = eval::image_retrieve(&model, &records, k, duplicates)?;
                reports.push(s.forward);
                reports.push(s.backward);
            }
            if wants("grounding") {
                reports.push(eval::grounding_eval(&model, &records, iou_threshold)?);
            }
            if reports.is_empty() {
                return Err(CliError::Usage(format!("unknown eval task {task:?}")));
            }
            for r in &reports {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
            }
            eprint!("{}", render_table(&reports));
            Ok(())
        }

        Command::Embed {
            checkpoint,
            data,
            limit,
            box_,
            text,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            if let Some(text) = &text {
                let emb = model.encode_text(&model.tokenize(text)).map_err(TrainError::from)?;
                writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "kind": "text",
                        "text": text,
                        "vector": emb.values.to_vec(),
                    })
                )
                .map_err(|e| io_err(Path::new("stdout"), e))?;
            }
            let box_ = box_
                .as_deref()
                .map(|s| -> Result<_, CliError> {
                    let parts: Vec<f64> = s
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| CliError::Usage(format!("--box: {e}")))?;
                    if parts.len() != 4 {
                        return Err(CliError::Usage(
                            "--box expects x1,y1,x2,y2".to_owned(),
                        ));
                    }
                    validate_box([parts[0], parts[1], parts[2], parts[3]])
                        .map_err(|e| CliError::Usage(e.to_string()))
                })
                .transpose()?;
            if let Some(data) = &data {
                let records = read_dataset(data)?;
                let take = limit.unwrap_or(records.len());
                for rec in records.iter().take(take) {
                    let image = rec.image(model.cfg.image_size)?;
                    let grid = model
                        .encode_image_tokens(&image, rec.id)
                        .map_err(TrainError::from)?;
                    let img_emb = model.pool_project_image(&grid);
                    writeln!(
                        out,
                        "{}",
                        serde_json::json!({
                            "kind": "image",
                            "id": rec.id,
                            "vector": img_emb.values.to_vec(),
                        })
                    )
                    .map_err(|e| io_err(Path::new("stdout"), e))?;
                    if let Some(b) = &box_ {
                        let region = model.extract_region_by_box(b, &grid);
                        writeln!(
                            out,
                            "{}",
                            serde_json::json!({
                                "kind": "region",
                                "id": rec.id,
                                "box": b.as_array(),
                                "vector": region.embedding.values.to_vec(),
                            })
                        )
                        .map_err(|e| io_err(Path::new("stdout"), e))?;
                    }
                }
            } else if box_.is_some() {
                return Err(CliError::Usage(
                    "--box needs --data for the images to prompt".to_owned(),
                ));
            }
            Ok(())
        }

        Command::Stats { data } => {
            let records = read_dataset(&data)?;
            let stats = dataset_stats(&records)?;
            println!(
                "{}",
                serde_json::to_string(&stats).expect("stats serialize")
            );
            eprintln!(
                "images: {}  regions/image: {:.3}  caption tokens: {:.3}  region tokens: {:.3}",
                stats.image_count,
                stats.mean_regions_per_image,
                stats.mean_image_caption_tokens,
                stats.mean_region_caption_tokens
            );
            Ok(())
        }
    }
}
