//! The embedding network: a stack of conv blocks ending in `embed_dim`
//! filter maps, reduced to an embedding by global average pooling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{rejected, Error, Result};
use crate::kv::KvFile;
use crate::ops;
use crate::params::ParamSet;
use crate::tape::{NodeId, ParamNodes, Tape};
use crate::tensor::Tensor;

pub const GROUP_FEATURES: &str = "features";
pub const GROUP_HEAD: &str = "head";

/// One conv block: conv, ReLU, then an optional 2x2/2 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: bool,
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}:{}",
            self.filters,
            self.kernel,
            self.stride,
            self.pad,
            if self.pool { "pool" } else { "none" }
        )
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("conv spec {s:?}: expected filters:kernel:stride:pad:pool|none"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [f, k, st, p, pool] = parts[..] else { return Err(bad()) };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        Ok(Self {
            filters: num(f)?,
            kernel: num(k)?,
            stride: num(st)?,
            pad: num(p)?,
            pool: match pool {
                "pool" => true,
                "none" => false,
                _ => return Err(bad()),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub channels_in: usize,
    pub conv_specs: Vec<ConvSpec>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 64x64 RGB input, 8 -> 16 -> 64 filters, 8x8 final maps.
    fn default() -> Self {
        Self::desk(64)
    }
}

impl ModelConfig {
    pub fn desk(embed_dim: usize) -> Self {
        let block = |filters, stride, pool| ConvSpec { filters, kernel: 3, stride, pad: 1, pool };
        Self {
            input_size: 64,
            channels_in: 3,
            conv_specs: vec![block(8, 2, true), block(16, 1, true), block(embed_dim, 1, false)],
            embed_dim,
            seed: 0x5eed,
        }
    }

    /// Spatial side length after each block, validating the whole stack.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        if self.channels_in != 1 && self.channels_in != 3 {
            return Err(Error::Config(format!("channels_in must be 1 or 3, got {}", self.channels_in)));
        }
        let last = self.conv_specs.last().ok_or_else(|| Error::Config("no conv layers".into()))?;
        if last.filters != self.embed_dim {
            return Err(Error::Config(format!(
                "final conv has {} filters but embed_dim is {}",
                last.filters, self.embed_dim
            )));
        }
        let mut n = self.input_size;
        let mut sizes = Vec::with_capacity(self.conv_specs.len());
        for (i, s) in self.conv_specs.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("layer {i}: zero filters, kernel or stride")));
            }
            if n + 2 * s.pad < s.kernel {
                return Err(Error::Config(format!("layer {i}: kernel larger than padded input")));
            }
            n = (n + 2 * s.pad - s.kernel) / s.stride + 1;
            if s.pool {
                if n < 2 {
                    return Err(Error::Config(format!("layer {i}: nothing left to pool")));
                }
                n = (n - 2) / 2 + 1;
            }
            sizes.push(n);
        }
        if n < 2 {
            return Err(Error::Config(format!("final activation maps are {n}x{n}; need at least 2x2")));
        }
        Ok(sizes)
    }

    /// Side length `n` of the final `n x n` filter maps.
    pub fn map_size(&self) -> Result<usize> {
        Ok(*self.spatial_sizes()?.last().expect("validated non-empty"))
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels_in, self.input_size, self.input_size]
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("input_size", self.input_size);
        kv.set("channels_in", self.channels_in);
        kv.set("conv_specs", self.conv_specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        kv.set("embed_dim", self.embed_dim);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&["input_size", "channels_in", "conv_specs", "embed_dim", "seed"])?;
        let d = Self::default();
        let embed_dim = kv.get_or("embed_dim", d.embed_dim)?;
        let conv_specs = match kv.raw("conv_specs") {
            Some(s) => s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?,
            None => Self::desk(embed_dim).conv_specs,
        };
        let cfg = Self {
            input_size: kv.get_or("input_size", d.input_size)?,
            channels_in: kv.get_or("channels_in", d.channels_in)?,
            conv_specs,
            embed_dim,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.spatial_sizes()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kv().to_text())?;
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.spatial_sizes()?;
        let mut c_in = self.channels_in;
        let mut out = Vec::new();
        for (i, s) in self.conv_specs.iter().enumerate() {
            out.push((weight_name(i), vec![s.filters, c_in, s.kernel, s.kernel]));
            out.push((bias_name(i), vec![s.filters]));
            c_in = s.filters;
        }
        Ok(out)
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.param_shapes()?;
        if expected.len() != params.len() {
            return Err(rejected(format!("expected {} parameter tensors, found {}", expected.len(), params.len())));
        }
        for (name, shape) in expected {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(rejected(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    fn layer_group(&self, i: usize) -> &'static str {
        if i + 1 == self.conv_specs.len() {
            GROUP_HEAD
        } else {
            GROUP_FEATURES
        }
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("conv{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("conv{layer}.bias")
}

/// Fan-in scaled uniform weights (variance `1/fan_in`) and zero biases.
pub fn init_model(config: &ModelConfig) -> Result<ParamSet> {
    config.spatial_sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    let mut c_in = config.channels_in;
    for (i, s) in config.conv_specs.iter().enumerate() {
        let fan_in = c_in * s.kernel * s.kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = s.filters * fan_in;
        let w =
            Tensor::new(vec![s.filters, c_in, s.kernel, s.kernel], (0..n).map(|_| dist.sample(&mut rng)).collect())?;
        params.insert(&weight_name(i), config.layer_group(i), w)?;
        params.insert(&bias_name(i), config.layer_group(i), Tensor::zeros(&[s.filters]))?;
        c_in = s.filters;
    }
    Ok(params)
}

/// Embedding plus the pre-pooling filter maps it was averaged from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingOutput {
    pub sample_id: String,
    /// `[d]`
    pub embedding: Tensor,
    /// `[d, n, n]`
    pub filter_maps: Tensor,
}

fn check_image(config: &ModelConfig, image: &Tensor) -> Result<()> {
    if image.shape() != config.image_shape() {
        return Err(rejected(format!(
            "image shape {:?} does not match model input {:?}",
            image.shape(),
            config.image_shape()
        )));
    }
    Ok(())
}

/// Subtracts each channel's spatial mean, so the network sees lesion-to-skin
/// contrast rather than absolute brightness.
pub fn center_channels(image: &Tensor) -> Tensor {
    let mut out = image.clone();
    let plane = image.shape()[1..].iter().product::<usize>();
    for ch in out.data_mut().chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        ch.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Runs the network without recording a tape.
pub fn embed(config: &ModelConfig, params: &ParamSet, sample_id: &str, image: &Tensor) -> Result<EmbeddingOutput> {
    check_image(config, image)?;
    let mut x = center_channels(image);
    for (i, s) in config.conv_specs.iter().enumerate() {
        let w = params.require(&weight_name(i))?;
        let b = params.require(&bias_name(i))?;
        x = ops::relu_forward(&ops::conv2d_forward(&x, w, b, s.stride, s.pad)?);
        if s.pool {
            x = ops::maxpool2d_forward(&x, 2, 2)?.output;
        }
    }
    let embedding = ops::gap_forward(&x)?;
    Ok(EmbeddingOutput { sample_id: sample_id.to_owned(), embedding, filter_maps: x })
}

/// Nodes produced by a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapedEmbedding {
    pub image: NodeId,
    pub filter_maps: NodeId,
    pub embedding: NodeId,
}

/// Records one forward pass on `tape`, reusing the shared parameter nodes.
pub fn embed_on_tape(
    config: &ModelConfig,
    tape: &mut Tape,
    params: &ParamNodes,
    image: Tensor,
) -> Result<TapedEmbedding> {
    check_image(config, &image)?;
    let lookup = |name: String| params.get(&name).copied().ok_or_else(|| rejected(format!("missing parameter {name}")));
    let input = tape.leaf(center_channels(&image));
    let mut x = input;
    for (i, s) in config.conv_specs.iter().enumerate() {
        let c = tape.conv2d(x, lookup(weight_name(i))?, lookup(bias_name(i))?, s.stride, s.pad)?;
        x = tape.relu(c);
        if s.pool {
            x = tape.maxpool(x, 2, 2)?;
        }
    }
    let embedding = tape.gap(x)?;
    Ok(TapedEmbedding { image: input, filter_maps: x, embedding })
}
