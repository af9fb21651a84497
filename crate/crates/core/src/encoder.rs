//! Densely connected convolutional encoder with a high-resolution branch.
//!
//! Main path: 7x7/2 stem, 2x2 max pool, then three dense blocks separated by
//! compressing transitions (1x1 conv, 2x2 average pool). The branch leaves the
//! main path after the second transition's convolution, before its pooling, and
//! runs its own dense block at twice the final resolution.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvUnit, Forward};
use crate::param::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Total downsampling of the low-resolution annotations.
pub const STRIDE_LOW: usize = 16;
/// Total downsampling of the high-resolution annotations.
pub const STRIDE_HIGH: usize = 8;
const STEM_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub growth_rate: usize,
    /// Number of convolution layers; with a bottleneck each growth step uses two.
    pub depth: usize,
    pub bottleneck: bool,
}

impl DenseBlockConfig {
    pub fn steps(&self) -> usize {
        if self.bottleneck {
            self.depth / 2
        } else {
            self.depth
        }
    }

    pub fn out_channels(&self, input: usize) -> usize {
        input + self.steps() * self.growth_rate
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.growth_rate == 0 {
            return Err(Error::Config(format!("{what}: growth rate must be positive")));
        }
        if self.bottleneck && !self.depth.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{what}: depth {} must be even with bottleneck layers",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub initial_channels: usize,
    pub blocks: [DenseBlockConfig; 3],
    pub compression: f64,
    pub branch: DenseBlockConfig,
    /// When false only the low-resolution annotations are produced.
    pub multi_scale: bool,
}

/// Channel count of every stage of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    pub stem: usize,
    pub block1: usize,
    pub transition1: usize,
    pub block2: usize,
    pub transition2: usize,
    /// Low-resolution annotation channels `C`.
    pub low: usize,
    /// High-resolution annotation channels `C'`.
    pub high: usize,
}

impl EncoderConfig {
    /// Growth rate 24, depth 32 bottleneck blocks, compression 0.5, branch depth 16.
    pub fn full() -> Self {
        let block = DenseBlockConfig {
            growth_rate: 24,
            depth: 32,
            bottleneck: true,
        };
        EncoderConfig {
            initial_channels: 48,
            blocks: [block; 3],
            compression: 0.5,
            branch: DenseBlockConfig { depth: 16, ..block },
            multi_scale: true,
        }
    }

    /// Width-reduced variant for desk-scale runs: growth 4, depth 4, branch depth 2.
    pub fn toy() -> Self {
        let block = DenseBlockConfig {
            growth_rate: 4,
            depth: 4,
            bottleneck: true,
        };
        EncoderConfig {
            initial_channels: 16,
            blocks: [block; 3],
            compression: 0.5,
            branch: DenseBlockConfig { depth: 2, ..block },
            multi_scale: true,
        }
    }

    pub fn with_branch_depth(mut self, depth: usize) -> Self {
        self.branch.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_channels == 0 {
            return Err(Error::Config("initial channels must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression {} outside (0, 1]",
                self.compression
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(&format!("block {}", i + 1))?;
        }
        self.branch.validate("branch")?;
        if !self.branch.depth.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "branch depth {} must be even",
                self.branch.depth
            )));
        }
        let plan = self.channel_plan();
        if plan.transition1 == 0 || plan.transition2 == 0 {
            return Err(Error::Config("compression leaves a transition with no channels".into()));
        }
        Ok(())
    }

    pub fn compress(&self, channels: usize) -> usize {
        (self.compression * channels as f64 + 1e-9).floor() as usize
    }

    pub fn channel_plan(&self) -> ChannelPlan {
        let stem = self.initial_channels;
        let block1 = self.blocks[0].out_channels(stem);
        let transition1 = self.compress(block1);
        let block2 = self.blocks[1].out_channels(transition1);
        let transition2 = self.compress(block2);
        ChannelPlan {
            stem,
            block1,
            transition1,
            block2,
            transition2,
            low: self.blocks[2].out_channels(transition2),
            high: self.branch.out_channels(transition2),
        }
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bottleneck: Option<ConvUnit>,
    conv: ConvUnit,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DenseBlockConfig,
        input: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<DenseBlock> {
        let k = cfg.growth_rate;
        let mut layers = Vec::with_capacity(cfg.steps());
        for i in 0..cfg.steps() {
            let cin = input + i * k;
            let layer = if cfg.bottleneck {
                let b = ConvUnit::new(store, &format!("{name}.l{i:02}.a"), cin, 4 * k, 1, 1, rng)?;
                let c = ConvUnit::new(store, &format!("{name}.l{i:02}.b"), 4 * k, k, 3, 1, rng)?;
                DenseLayer {
                    bottleneck: Some(b),
                    conv: c,
                }
            } else {
                DenseLayer {
                    bottleneck: None,
                    conv: ConvUnit::new(store, &format!("{name}.l{i:02}"), cin, k, 3, 1, rng)?,
                }
            };
            layers.push(layer);
        }
        Ok(DenseBlock { layers })
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        let mut stack = x;
        for layer in &self.layers {
            let mut h = stack;
            if let Some(b) = &layer.bottleneck {
                h = b.forward(f, h)?;
            }
            features.push(layer.conv.forward(f, h)?);
            stack = f.tape.concat(&features, 1)?;
        }
        Ok(stack)
    }
}

/// Annotation grids on a tape. `high` and `mask_high` are absent for single-scale encoders.
#[derive(Debug, Clone)]
pub struct Annotations {
    pub low: Var,
    pub high: Option<Var>,
    pub mask_low: Tensor,
    pub mask_high: Option<Tensor>,
}

/// Detached annotation tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationGrid {
    pub a: Tensor,
    pub b: Option<Tensor>,
    pub mask_a: Tensor,
    pub mask_b: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stem: ConvUnit,
    blocks: [DenseBlock; 3],
    transitions: [ConvUnit; 2],
    branch: Option<DenseBlock>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        config.validate()?;
        let plan = config.channel_plan();
        let stem = ConvUnit::new(store, "enc.stem", 1, plan.stem, STEM_KERNEL, 2, rng)?;
        let b1 = DenseBlock::new(store, "enc.block1", &config.blocks[0], plan.stem, rng)?;
        let t1 = ConvUnit::new(store, "enc.trans1", plan.block1, plan.transition1, 1, 1, rng)?;
        let b2 = DenseBlock::new(store, "enc.block2", &config.blocks[1], plan.transition1, rng)?;
        let t2 = ConvUnit::new(store, "enc.trans2", plan.block2, plan.transition2, 1, 1, rng)?;
        let b3 = DenseBlock::new(store, "enc.block3", &config.blocks[2], plan.transition2, rng)?;
        let branch = if config.multi_scale {
            Some(DenseBlock::new(store, "enc.branch", &config.branch, plan.transition2, rng)?)
        } else {
            None
        };
        Ok(Encoder {
            config: config.clone(),
            stem,
            blocks: [b1, b2, b3],
            transitions: [t1, t2],
            branch,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes `images[N,1,H,W]` with validity `mask[N,H,W]`.
    pub fn forward(&self, f: &mut Forward<'_>, images: Var, mask: &Tensor) -> Result<Annotations> {
        let shape = f.tape.shape(images).to_vec();
        let [n, 1, h, w] = shape[..] else {
            return Err(Error::Input(format!("expected images [N, 1, H, W], got {shape:?}")));
        };
        if h % STRIDE_LOW != 0 || w % STRIDE_LOW != 0 {
            return Err(Error::Input(format!(
                "image extents {h}x{w} are not multiples of {STRIDE_LOW}; pad the input first"
            )));
        }
        if mask.shape() != [n, h, w] {
            return Err(Error::Input(format!(
                "mask shape {:?} does not match images {shape:?}",
                mask.shape()
            )));
        }
        let x = self.stem.forward(f, images)?;
        let x = f.tape.max_pool2d(x, (2, 2), (2, 2))?;
        let x = self.blocks[0].forward(f, x)?;
        let x = self.transitions[0].forward(f, x)?;
        let x = f.tape.avg_pool2d(x, (2, 2), (2, 2))?;
        let x = self.blocks[1].forward(f, x)?;
        let split = self.transitions[1].forward(f, x)?;
        let high = match &self.branch {
            Some(branch) => Some(branch.forward(f, split)?),
            None => None,
        };
        let x = f.tape.avg_pool2d(split, (2, 2), (2, 2))?;
        let low = self.blocks[2].forward(f, x)?;
        Ok(Annotations {
            low,
            high,
            mask_low: downsample_mask(mask, STRIDE_LOW),
            mask_high: high.map(|_| downsample_mask(mask, STRIDE_HIGH)),
        })
    }

    pub fn encode(&self, f: &mut Forward<'_>, images: &Tensor, mask: &Tensor) -> Result<AnnotationGrid> {
        let x = f.tape.constant(images.clone());
        let ann = self.forward(f, x, mask)?;
        Ok(AnnotationGrid {
            a: f.tape.value(ann.low).clone(),
            b: ann.high.map(|v| f.tape.value(v).clone()),
            mask_a: ann.mask_low,
            mask_b: ann.mask_high,
        })
    }
}

/// A cell of the coarse grid is valid when any pixel in its `factor x factor` block is.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Tensor {
    let (n, h, w) = (mask.dim(0), mask.dim(1), mask.dim(2));
    let (oh, ow) = (h / factor, w / factor);
    let src = mask.data();
    let mut out = vec![0.0; n * oh * ow];
    for i in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let any = (y * factor..(y + 1) * factor).any(|yy| {
                    (x * factor..(x + 1) * factor).any(|xx| src[(i * h + yy) * w + xx] > 0.0)
                });
                out[(i * oh + y) * ow + x] = if any { 1.0 } else { 0.0 };
            }
        }
    }
    Tensor::new([n, oh, ow], out).expect("shape and length agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::uniform;
    use crate::tape::{Mode, Tape};
    use rand::SeedableRng;

    fn run(config: &EncoderConfig, images: &Tensor, mask: &Tensor, mode: Mode) -> AnnotationGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::new(config, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward {
            tape: &mut tape,
            store: &store,
            mode,
            dropout: 0.0,
            rng: &mut rng,
        };
        enc.encode(&mut f, images, mask).unwrap()
    }

    #[test]
    fn empty_block_is_identity_in_channels() {
        let cfg = DenseBlockConfig {
            growth_rate: 24,
            depth: 0,
            bottleneck: true,
        };
        assert_eq!(cfg.out_channels(48), 48);
        let cfg = DenseBlockConfig { depth: 32, ..cfg };
        assert_eq!(cfg.out_channels(48), 432);
    }

    #[test]
    fn compression_examples() {
        let cfg = EncoderConfig::full();
        assert_eq!(cfg.compress(432), 216);
        assert_eq!(cfg.compress(600), 300);
        let full = EncoderConfig {
            compression: 1.0,
            ..cfg
        };
        assert_eq!(full.compress(433), 433);
    }

    #[test]
    fn toy_channel_plan() {
        let p = EncoderConfig::toy().channel_plan();
        assert_eq!(
            (p.block1, p.transition1, p.block2, p.transition2, p.low, p.high),
            (24, 12, 20, 10, 18, 14)
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = EncoderConfig::toy();
        c.compression = 0.0;
        assert!(c.validate().is_err());
        let c = EncoderConfig::toy().with_branch_depth(3);
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.blocks[1].growth_rate = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn extents_must_be_aligned() {
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward {
            tape: &mut tape,
            store: &store,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut rng,
        };
        let err = enc
            .encode(&mut f, &Tensor::zeros([1, 1, 24, 32]), &Tensor::ones([1, 24, 32]))
            .unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn toy_shapes_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images = uniform(&[2, 1, 32, 64], 1.0, &mut rng);
        let mut mask = Tensor::ones([2, 32, 64]);
        for y in 0..32 {
            for x in 24..64 {
                mask.data_mut()[32 * 64 + y * 64 + x] = 0.0;
            }
        }
        let g = run(&EncoderConfig::toy(), &images, &mask, Mode::Train);
        assert_eq!(g.a.shape(), &[2, 18, 2, 4]);
        assert_eq!(g.b.as_ref().unwrap().shape(), &[2, 14, 4, 8]);
        assert_eq!(g.mask_a.data(), &[1., 1., 1., 1., 1., 1., 1., 1., 1., 1., 0., 0., 1., 1., 0., 0.]);
        let mb = g.mask_b.unwrap();
        assert_eq!(mb.data()[32..40], [1., 1., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn single_scale_has_no_branch() {
        let mut cfg = EncoderConfig::toy();
        cfg.multi_scale = false;
        let g = run(&cfg, &Tensor::zeros([1, 1, 16, 16]), &Tensor::ones([1, 16, 16]), Mode::Infer);
        assert!(g.b.is_none() && g.mask_b.is_none());
        assert_eq!(g.a.shape(), &[1, 18, 1, 1]);
    }

    #[test]
    fn padding_outside_receptive_field_is_inert() {
        // In infer mode each unit is local; a perturbation far to the right of the
        // first low-resolution column cannot reach it.
        let cfg = EncoderConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut images = uniform(&[1, 1, 32, 256], 1.0, &mut rng);
        let mask = Tensor::ones([1, 32, 256]);
        let before = run(&cfg, &images, &mask, Mode::Infer);
        for y in 0..32 {
            for x in 224..256 {
                images.data_mut()[y * 256 + x] = 7.0;
            }
        }
        let after = run(&cfg, &images, &mask, Mode::Infer);
        let (c, h, w) = (18, 2, 16);
        for ch in 0..c {
            for y in 0..h {
                assert_eq!(before.a.data()[(ch * h + y) * w], after.a.data()[(ch * h + y) * w]);
            }
        }
        assert_ne!(before.a, after.a);
    }
}
