//! Self-describing model files.
//!
//! A checkpoint is a UTF-8 header followed by a little-endian binary parameter
//! section:
//!
//! ```text
//! densemath-checkpoint
//! format_version = 1
//! [architecture]
//! encoder.initial_channels = 16
//! ...
//! [vocabulary]
//! count = 18
//! 0
//! ...
//! [metadata]
//! step = 1200
//! [parameters]
//! count = 212
//! end_header
//! <blob>*
//! ```
//!
//! Each blob is `u32` name length, name bytes, `u8` trainable flag, `u32` rank,
//! `u64` extents, `f64` values, then a `u32` CRC32 of everything before it in
//! the blob.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Vocabulary;
use crate::decoder::DecoderConfig;
use crate::encoder::{DenseBlockConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "densemath-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Free-form training metadata such as `step` and `best_wer`.
    pub metadata: BTreeMap<String, String>,
    pub blobs: Vec<Blob>,
}

fn architecture_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    let mut out = vec![
        ("encoder.initial_channels".into(), e.initial_channels.to_string()),
        ("encoder.compression".into(), e.compression.to_string()),
        ("encoder.multi_scale".into(), e.multi_scale.to_string()),
    ];
    let blocks = e.blocks.iter().enumerate().map(|(i, b)| (format!("block{}", i + 1), b));
    for (name, b) in blocks.chain([("branch".to_string(), &e.branch)]) {
        out.push((format!("encoder.{name}.growth_rate"), b.growth_rate.to_string()));
        out.push((format!("encoder.{name}.depth"), b.depth.to_string()));
        out.push((format!("encoder.{name}.bottleneck"), b.bottleneck.to_string()));
    }
    for (k, v) in [
        ("hidden", d.hidden.to_string()),
        ("embedding", d.embedding.to_string()),
        ("attention", d.attention.to_string()),
        ("coverage_filters", d.coverage_filters.to_string()),
        ("kernel_low", d.kernel_low.to_string()),
        ("kernel_high", d.kernel_high.to_string()),
        ("shared_state_projection", d.shared_state_projection.to_string()),
    ] {
        out.push((format!("decoder.{k}"), v));
    }
    out
}

struct Fields<'a> {
    map: BTreeMap<&'a str, &'a str>,
}

impl Fields<'_> {
    fn get<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<T, String> {
        let raw = self.map.get(key).ok_or_else(|| format!("missing architecture field `{key}`"))?;
        raw.parse().map_err(|_| format!("bad value `{raw}` for `{key}`"))
    }

    fn block(&self, name: &str) -> std::result::Result<DenseBlockConfig, String> {
        Ok(DenseBlockConfig {
            growth_rate: self.get(&format!("encoder.{name}.growth_rate"))?,
            depth: self.get(&format!("encoder.{name}.depth"))?,
            bottleneck: self.get(&format!("encoder.{name}.bottleneck"))?,
        })
    }

    fn config(&self) -> std::result::Result<ModelConfig, String> {
        Ok(ModelConfig {
            encoder: EncoderConfig {
                initial_channels: self.get("encoder.initial_channels")?,
                blocks: [self.block("block1")?, self.block("block2")?, self.block("block3")?],
                compression: self.get("encoder.compression")?,
                branch: self.block("branch")?,
                multi_scale: self.get("encoder.multi_scale")?,
            },
            decoder: DecoderConfig {
                hidden: self.get("decoder.hidden")?,
                embedding: self.get("decoder.embedding")?,
                attention: self.get("decoder.attention")?,
                coverage_filters: self.get("decoder.coverage_filters")?,
                kernel_low: self.get("decoder.kernel_low")?,
                kernel_high: self.get("decoder.kernel_high")?,
                shared_state_projection: self.get("decoder.shared_state_projection")?,
            },
        })
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            config: model.config().clone(),
            vocab: model.vocab().clone(),
            metadata,
            blobs: model
                .params
                .iter()
                .map(|(_, p)| Blob {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let values = self.blobs.iter().map(|b| (b.name.clone(), b.value.clone())).collect();
        Model::from_values(self.config.clone(), self.vocab.clone(), values)
    }

    pub fn header(&self) -> String {
        let mut h = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n[architecture]\n");
        for (k, v) in architecture_entries(&self.config) {
            let _ = writeln!(h, "{k} = {v}");
        }
        let symbols: Vec<&str> = self.vocab.symbols().collect();
        let _ = writeln!(h, "[vocabulary]\ncount = {}", symbols.len());
        for s in symbols {
            let _ = writeln!(h, "{s}");
        }
        h.push_str("[metadata]\n");
        for (k, v) in &self.metadata {
            let _ = writeln!(h, "{k} = {v}");
        }
        let _ = writeln!(h, "[parameters]\ncount = {}", self.blobs.len());
        h.push_str(END_HEADER);
        h
    }

    /// The binary parameter section alone.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.blobs {
            let start = out.len();
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(u8::from(b.trainable));
            out.extend_from_slice(&(b.value.rank() as u32).to_le_bytes());
            for &d in b.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in b.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.extend(self.parameter_bytes());
        out
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let bad = |msg: String| Error::format(origin, msg);
        let split = find(bytes, END_HEADER.as_bytes())
            .ok_or_else(|| bad("header is incomplete (no end_header line)".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file (bad magic line)".into()));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("format_version = "))
            .ok_or_else(|| bad("missing format_version".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!(
                "format version `{version}` is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut current = None;
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name);
                sections.entry(name).or_default();
            } else {
                let name = current.ok_or_else(|| bad(format!("line `{line}` outside any section")))?;
                sections.entry(name).or_default().push(line);
            }
        }
        let section = |name: &str| sections.get(name).cloned().ok_or_else(|| bad(format!("missing [{name}] section")));
        let pairs = |lines: &[&str]| -> Result<BTreeMap<String, String>> {
            lines
                .iter()
                .map(|l| {
                    l.split_once(" = ")
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| bad(format!("malformed header line `{l}`")))
                })
                .collect()
        };
        let arch_lines = section("architecture")?;
        let arch = pairs(&arch_lines)?;
        let fields = Fields {
            map: arch.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
        };
        let config = fields.config().map_err(bad)?;
        let vocab_lines = section("vocabulary")?;
        let (count_line, symbols) = vocab_lines.split_first().ok_or_else(|| bad("empty [vocabulary] section".into()))?;
        let count: usize = count_line
            .strip_prefix("count = ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("vocabulary count missing".into()))?;
        if count != symbols.len() {
            return Err(bad(format!("vocabulary lists {} symbols but declares {count}", symbols.len())));
        }
        let vocab = Vocabulary::new(symbols.iter().copied()).map_err(|e| bad(e.to_string()))?;
        let metadata = pairs(&section("metadata")?)?;
        let params = pairs(&section("parameters")?)?;
        let blob_count: usize = params
            .get("count")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("parameter count missing".into()))?;
        let mut reader = Reader {
            bytes: &bytes[split + END_HEADER.len()..],
            pos: 0,
        };
        let mut blobs = Vec::with_capacity(blob_count);
        for i in 0..blob_count {
            blobs.push(reader.blob().map_err(|msg| bad(format!("parameter blob {}: {msg}", i + 1)))?);
        }
        if reader.pos != reader.bytes.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last parameter blob",
                reader.bytes.len() - reader.pos
            )));
        }
        Ok(Checkpoint {
            config,
            vocab,
            metadata,
            blobs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(model: &Model, metadata: BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, metadata).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Offset of the parameter section within serialized checkpoint bytes.
pub fn parameter_offset(bytes: &[u8]) -> Option<usize> {
    find(bytes, END_HEADER.as_bytes()).map(|i| i + END_HEADER.len())
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!(
                "truncated: needed {n} bytes at offset {} but only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> std::result::Result<Blob, String> {
        let start = self.pos;
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())?;
        let trainable = match self.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(format!("`{name}`: bad trainable flag {b}")),
        };
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| format!("`{name}`: extent overflows"))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format!("`{name}`: shape {shape:?} is too large"))?;
        let data: Vec<f64> = self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected = crc32fast::hash(&self.bytes[start..self.pos]);
        let stored = self.u32()?;
        if stored != expected {
            return Err(format!("`{name}`: checksum mismatch (stored {stored:08x}, computed {expected:08x})"));
        }
        let value = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        Ok(Blob { name, trainable, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::builtin_vocabulary;

    fn checkpoint() -> Checkpoint {
        let model = Model::new(ModelConfig::toy(), builtin_vocabulary(), 9).unwrap();
        let meta = BTreeMap::from([("step".to_string(), "12".to_string()), ("best_wer".to_string(), "0.25".to_string())]);
        Checkpoint::from_model(&model, meta)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = checkpoint();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let model = back.to_model().unwrap();
        assert_eq!(Checkpoint::from_model(&model, c.metadata.clone()), c);
    }

    #[test]
    fn full_architecture_round_trips() {
        let cfg = ModelConfig::full();
        let entries = architecture_entries(&cfg);
        let fields = Fields {
            map: entries.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
        };
        assert_eq!(fields.config().unwrap(), cfg);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = checkpoint().to_bytes();
        let at = find(&bytes, b"format_version = 1").unwrap() + "format_version = ".len();
        bytes[at] = b'2';
        let err = Checkpoint::from_bytes(&bytes, Path::new("x.ckpt")).unwrap_err().to_string();
        assert!(err.contains("format version"), "{err}");
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut flipped = bytes.clone();
        let at = parameter_offset(&bytes).unwrap() + 40;
        flipped[at] ^= 0x10;
        let err = Checkpoint::from_bytes(&flipped, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("checksum") || err.contains("blob"), "{err}");
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("x")).is_err());
    }

    #[test]
    fn header_is_readable_text() {
        let h = checkpoint().header();
        assert!(h.starts_with("densemath-checkpoint\nformat_version = 1\n"));
        assert!(h.contains("decoder.kernel_low = 11\n"));
        assert!(h.contains("\\frac\n"));
        assert!(h.contains("step = 12\n"));
    }
}
