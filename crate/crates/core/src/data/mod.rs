//! Datasets, batching and the synthetic expression corpus.

pub mod image;
pub mod synth;
pub mod vocab;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::image::{preprocess, PreparedImage, DEFAULT_SIZE_CAP, PAD_MULTIPLE};
pub use self::vocab::{TokenSequence, Vocabulary, EOS, PAD, SOS};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Batches are drawn from windows of this many batches sorted by image area.
const BUCKET_SPAN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: PreparedImage,
    pub label: TokenSequence,
}

/// A padded mini-batch.
///
/// `inputs` and `targets` are `[N][T_max + 1]` id matrices: inputs start with the
/// begin sentinel, every target row ends with the end sentinel, and both are
/// padded with [`PAD`]. `lengths[i]` counts target positions including the end
/// sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub names: Vec<String>,
    pub images: Tensor,
    pub mask: Tensor,
    pub labels: Vec<TokenSequence>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let n = samples.len();
        let h = samples.iter().map(|s| s.image.height()).max().unwrap_or(0);
        let w = samples.iter().map(|s| s.image.width()).max().unwrap_or(0);
        let mut images = vec![0.0; n * h * w];
        let mut mask = vec![0.0; n * h * w];
        for (i, s) in samples.iter().enumerate() {
            let (sw, (ch, cw)) = (s.image.width(), s.image.content);
            let src = s.image.pixels.data();
            for y in 0..ch {
                for x in 0..cw {
                    let at = i * h * w + y * w + x;
                    images[at] = src[y * sw + x];
                    mask[at] = 1.0;
                }
            }
        }
        let t_max = samples.iter().map(|s| s.label.len()).max().unwrap_or(0) + 1;
        let pad_row = |mut row: Vec<usize>| {
            row.resize(t_max, PAD);
            row
        };
        Ok(Batch {
            names: samples.iter().map(|s| s.name.clone()).collect(),
            images: Tensor::new([n, 1, h, w], images)?,
            mask: Tensor::new([n, h, w], mask)?,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            inputs: samples.iter().map(|s| pad_row(s.label.inputs())).collect(),
            targets: samples.iter().map(|s| pad_row(s.label.targets())).collect(),
            lengths: samples.iter().map(|s| s.label.len() + 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Decoder steps needed for the longest row.
    pub fn steps(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

/// Sample indices per batch for one epoch: a seeded shuffle, then windows of
/// similar-area samples, then a shuffle of the batch order.
pub fn batch_plan(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let area = |i: &usize| samples[*i].image.height() * samples[*i].image.width();
    let mut plan = Vec::new();
    for window in order.chunks_mut(batch_size * BUCKET_SPAN) {
        window.sort_by_key(area);
        plan.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    plan.shuffle(&mut rng);
    Ok(plan)
}

pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    batch_plan(samples, batch_size, seed)?
        .iter()
        .map(|idx| Batch::new(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

/// One manifest line: image file name and its label tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub tokens: Vec<String>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: missing tab separator", i + 1)))?;
        if file.is_empty() {
            return Err(Error::format(path, format!("line {}: empty file name", i + 1)));
        }
        entries.push(ManifestEntry {
            file: file.to_string(),
            tokens: label.split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\n", e.file, e.tokens.join(" ")))
        .collect()
}

/// A dataset directory: `manifest.tsv`, the images it names, and optionally `vocab.txt`.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetDir { root: root.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join(VOCAB_FILE)
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>> {
        read_manifest(self.manifest_path())
    }

    pub fn load(&self, vocab: &Vocabulary, cap: Option<usize>) -> Result<Vec<Sample>> {
        self.entries()?
            .into_iter()
            .map(|e| {
                let path = self.root.join(&e.file);
                let label = vocab
                    .encode(&e.tokens)
                    .map_err(|err| Error::format(self.manifest_path(), format!("{}: {err}", e.file)))?;
                let image = preprocess(&self::image::load_raster(&path)?, cap)
                    .map_err(|err| Error::format(&path, err.to_string()))?;
                Ok(Sample {
                    name: e.file,
                    image,
                    label,
                })
            })
            .collect()
    }
}
