//! Commands behind the `densemath` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use densemath::checkpoint::Checkpoint;
use densemath::data::image::load_raster;
use densemath::data::synth::{generate, write_corpus, Tier};
use densemath::data::{preprocess, read_manifest, DatasetDir, Vocabulary};
use densemath::inference::{beam_search, check_ensemble, BeamConfig, Hypothesis};
use densemath::metrics::{exprate_report, EvalReport};
use densemath::model::Model;
use densemath::train::{log_text, train, LogRecord, LOG_HEADER};
use rayon::prelude::*;

pub mod config;
pub mod heatmap;

pub use config::{Branch, ConfigError, Preset, RunConfig};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const REPORT_TSV: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] densemath::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingPath(_) | CliError::Usage(_) => 2,
            CliError::Core(densemath::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingPath(path.to_path_buf()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io(path))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_wer: f64,
    pub best_step: usize,
    pub steps: usize,
    pub log: Vec<LogRecord>,
}

/// Trains from `cfg`, writing `best.ckpt`, `last.ckpt` and `train.log` into the
/// output directory. `progress` receives each log line as it is produced.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<TrainSummary> {
    require(&cfg.train_dir)?;
    require(&cfg.valid_dir)?;
    let train_dir = DatasetDir::new(&cfg.train_dir);
    require(&train_dir.manifest_path())?;
    require(&train_dir.vocab_path())?;
    let vocab = Vocabulary::load(train_dir.vocab_path())?;
    let train_set = train_dir.load(&vocab, cfg.size_cap)?;
    let valid_set = DatasetDir::new(&cfg.valid_dir).load(&vocab, cfg.size_cap)?;
    let model_cfg = cfg.model_config();
    let mut model = Model::new(model_cfg, vocab, cfg.train.seed)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(io(&cfg.output_dir))?;
    progress(LOG_HEADER);
    let outcome = train(&mut model, &train_set, &valid_set, &cfg.train, |r| progress(&r.tsv()))?;
    let meta = |step: usize, wer: f64| {
        BTreeMap::from([
            ("step".to_string(), step.to_string()),
            ("best_wer".to_string(), wer.to_string()),
            ("seed".to_string(), cfg.train.seed.to_string()),
        ])
    };
    Checkpoint::from_model(&outcome.best, meta(outcome.best_step, outcome.best_wer))
        .save(cfg.output_dir.join(BEST_CHECKPOINT))?;
    Checkpoint::from_model(&model, meta(outcome.steps, outcome.best_wer)).save(cfg.output_dir.join(LAST_CHECKPOINT))?;
    write(&cfg.output_dir.join(TRAIN_LOG), log_text(&outcome.log))?;
    Ok(TrainSummary {
        best_wer: outcome.best_wer,
        best_step: outcome.best_step,
        steps: outcome.steps,
        log: outcome.log,
    })
}

#[derive(Debug, Clone)]
pub struct RecognizeArgs {
    pub checkpoints: Vec<PathBuf>,
    /// A text file listing one image path per line, relative to the file itself.
    pub image_list: PathBuf,
    pub output: PathBuf,
    pub beam: BeamConfig,
    pub size_cap: Option<usize>,
    pub attention_dir: Option<PathBuf>,
}

/// Reads an image list, skipping blank lines.
pub fn read_image_list(path: &Path) -> Result<Vec<PathBuf>> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

/// Decodes every listed image with the ensemble of `checkpoints` and writes one
/// prediction per line, in list order. Returns the predictions.
pub fn cmd_recognize(args: &RecognizeArgs) -> Result<Vec<String>> {
    if args.checkpoints.is_empty() {
        return Err(CliError::Usage("at least one checkpoint is required".into()));
    }
    let mut models = Vec::with_capacity(args.checkpoints.len());
    for path in &args.checkpoints {
        require(path)?;
        models.push(Checkpoint::load(path)?.to_model()?);
    }
    let members: Vec<&Model> = models.iter().collect();
    check_ensemble(&members)?;
    let images = read_image_list(&args.image_list)?;
    for p in &images {
        require(p)?;
    }
    let mut beam = args.beam.clone();
    beam.capture_attention = args.attention_dir.is_some();
    let results: Vec<(PathBuf, densemath::data::PreparedImage, Hypothesis)> = images
        .par_iter()
        .map(|path| -> Result<_> {
            let image = preprocess(&load_raster(path)?, args.size_cap)?;
            let hyp = beam_search(&members, &image, &beam)?;
            Ok((path.clone(), image, hyp))
        })
        .collect::<Result<_>>()?;
    let vocab = models[0].vocab();
    let predictions: Vec<String> = results.iter().map(|(_, _, h)| vocab.decode(&h.tokens)).collect();
    let mut out = String::new();
    for p in &predictions {
        let _ = writeln!(out, "{p}");
    }
    write(&args.output, out)?;
    if let Some(dir) = &args.attention_dir {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (i, (path, image, hyp)) in results.iter().enumerate() {
            write_heatmaps(dir, i, path, image, hyp)?;
        }
    }
    Ok(predictions)
}

/// One PNG per emitted symbol and resolution, named
/// `{index}_{stem}_t{step}_{low|high}.png`.
fn write_heatmaps(
    dir: &Path,
    index: usize,
    source: &Path,
    image: &densemath::data::PreparedImage,
    hyp: &Hypothesis,
) -> Result<usize> {
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut written = 0;
    for (t, step) in hyp.attention.iter().take(hyp.tokens.len()).enumerate() {
        let maps = [("low", Some(&step.low)), ("high", step.high.as_ref())];
        for (tag, alpha) in maps {
            let Some(alpha) = alpha else { continue };
            let path = dir.join(format!("{index:04}_{stem}_t{t:03}_{tag}.png"));
            heatmap::overlay(image, alpha)
                .save(&path)
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Scores a predictions file against a manifest, writing `report.tsv` and
/// `summary.txt` into `output_dir`.
pub fn cmd_evaluate(predictions: &Path, references: &Path, output_dir: &Path) -> Result<EvalReport> {
    require(predictions)?;
    require(references)?;
    let text = std::fs::read_to_string(predictions).map_err(io(predictions))?;
    let predicted: Vec<&str> = text.lines().collect();
    let refs = read_manifest(references)?;
    if predicted.len() != refs.len() {
        return Err(CliError::Failed(format!(
            "{} predictions but {} references",
            predicted.len(),
            refs.len()
        )));
    }
    let pairs: Vec<(String, String)> = refs
        .iter()
        .zip(&predicted)
        .map(|(r, p)| (r.tokens.join(" "), p.to_string()))
        .collect();
    let report = exprate_report(&pairs)?;
    std::fs::create_dir_all(output_dir).map_err(io(output_dir))?;
    write(&output_dir.join(REPORT_TSV), report.to_tsv())?;
    write(&output_dir.join(SUMMARY_FILE), report.to_key_values())?;
    Ok(report)
}

/// Writes a rendered synthetic corpus.
pub fn cmd_synth(dir: &Path, count: usize, seed: u64, tier: Tier) -> Result<()> {
    let rendered = generate(count, seed, tier)?;
    write_corpus(dir, &rendered)?;
    Ok(())
}

/// Runs the primitive suite and a whole-model check on the toy architecture.
/// Returns one report line per check and whether all passed.
pub fn cmd_gradcheck(seed: u64, coordinates: usize) -> Result<(Vec<String>, bool)> {
    use densemath::data::synth::{builtin_vocabulary, synth_corpus};
    use densemath::data::Batch;
    use densemath::gradcheck::{model_check, primitive_suite, MODEL_STEPS};
    use densemath::model::ModelConfig;

    let mut reports = primitive_suite(seed).map_err(densemath::Error::from)?;
    let samples = synth_corpus(2, seed, Tier::Structured)?;
    let batch = Batch::new(&samples.iter().collect::<Vec<_>>())?;
    let model = Model::new(ModelConfig::toy(), builtin_vocabulary(), seed)?;
    reports.push(model_check(&model, &batch, coordinates, &MODEL_STEPS, seed)?);
    let ok = reports.iter().all(|r| r.passed());
    Ok((reports.iter().map(ToString::to_string).collect(), ok))
}
