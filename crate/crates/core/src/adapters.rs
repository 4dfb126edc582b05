//! Embedder and generator abstractions plus the desk-scale toy implementations.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, Loss, Network, OptimizerKind, OptimizerSpec, TrainSpec};
use crate::tensor::{Descriptor, ImageTensor, LatentCode, RangeTag, CROP_SIZE};
use crate::toy_face::{self, ToyFaceParams, PARAM_DIM};

/// Maps a face crop to an identity descriptor.
///
/// Implementations must be deterministic and safe to call concurrently.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn input_range(&self) -> RangeTag;

    fn embed(&self, image: &ImageTensor) -> Result<Descriptor>;

    /// Descriptor together with `d (cotangent · descriptor) / d pixels`.
    fn embed_vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<(Descriptor, Vec<f64>)>;
}

/// Maps a latent code to a face crop.
pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn latent_dim(&self) -> usize;

    fn generate(&self, z: &LatentCode) -> Result<ImageTensor>;

    /// `d (cotangent · image) / d z`.
    fn generate_vjp(&self, z: &LatentCode, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// Draw from the latent prior. Defaults to a standard normal.
    fn sample_latent(&self, seed: u64) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentCode {
            values: (0..self.latent_dim())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        }
    }
}

pub fn embed(image: &ImageTensor, e: &dyn Embedder) -> Result<Descriptor> {
    e.embed(image)
}

pub fn generate(z: &LatentCode, g: &dyn Generator) -> Result<ImageTensor> {
    g.generate(z)
}

pub fn sample_latent(g: &dyn Generator, seed: u64) -> LatentCode {
    g.sample_latent(seed)
}

/// The procedural face renderer behind a latent interface. Latent
/// coordinate `i` maps to parameter `i` via sigmoid squashing into its bounds.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyGenerator;

impl ToyGenerator {
    pub fn params(&self, z: &LatentCode) -> Result<ToyFaceParams> {
        self.check(z)?;
        ToyFaceParams::from_latent(&z.values)
    }

    fn check(&self, z: &LatentCode) -> Result<()> {
        if z.dim() != PARAM_DIM {
            return Err(Error::Input(format!(
                "toy generator expects a latent of length {PARAM_DIM}, got {}",
                z.dim()
            )));
        }
        if z.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent code contains non-finite values".into()));
        }
        Ok(())
    }
}

impl Generator for ToyGenerator {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_dim(&self) -> usize {
        PARAM_DIM
    }

    fn generate(&self, z: &LatentCode) -> Result<ImageTensor> {
        Ok(toy_face::render_unchecked(&self.params(z)?))
    }

    fn generate_vjp(&self, z: &LatentCode, cotangent: &[f64]) -> Result<Vec<f64>> {
        let p = self.params(z)?;
        let gp = toy_face::render_vjp(&p, cotangent)?;
        Ok(gp
            .iter()
            .zip(toy_face::latent_jacobian_diag(&z.values))
            .map(|(g, j)| g * j)
            .collect())
    }
}

/// Embedder backed by a [`Network`] taking flattened HWC crops.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkEmbedder {
    name: String,
    range: RangeTag,
    net: Network,
}

impl NetworkEmbedder {
    pub fn new(name: impl Into<String>, range: RangeTag, net: Network) -> Result<Self> {
        if net.input_dim() != CROP_SIZE * CROP_SIZE * 3 {
            return Err(Error::Config(format!(
                "embedder network input {} does not match a {CROP_SIZE}x{CROP_SIZE}x3 crop",
                net.input_dim()
            )));
        }
        Ok(Self {
            name: name.into(),
            range,
            net,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn prepare<'a>(&self, image: &'a ImageTensor) -> Result<std::borrow::Cow<'a, ImageTensor>> {
        image.check_crop()?;
        if image.range() == self.range {
            Ok(std::borrow::Cow::Borrowed(image))
        } else {
            Err(Error::Input(format!(
                "embedder {} expects {:?} range input, got {:?}",
                self.name,
                self.range,
                image.range()
            )))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.save(dir, "embedder")
    }

    pub fn load(name: impl Into<String>, range: RangeTag, dir: &Path) -> Result<Self> {
        Self::new(name, range, Network::load(dir, "embedder")?)
    }
}

impl Embedder for NetworkEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn input_range(&self) -> RangeTag {
        self.range
    }

    fn embed(&self, image: &ImageTensor) -> Result<Descriptor> {
        let image = self.prepare(image)?;
        Descriptor::new(self.net.predict_one(image.pixels()), self.name.clone())
    }

    fn embed_vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<(Descriptor, Vec<f64>)> {
        let image = self.prepare(image)?;
        if cotangent.len() != self.dim() {
            return Err(Error::Input(format!(
                "descriptor cotangent must have length {}, got {}",
                self.dim(),
                cotangent.len()
            )));
        }
        let (out, grad) = self.net.vjp_one(image.pixels(), cotangent);
        Ok((Descriptor::new(out, self.name.clone())?, grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEmbedderConfig {
    pub descriptor_dim: usize,
    pub hidden: usize,
    pub pool: usize,
    /// Logit temperature between the normalized descriptor and the identity head.
    pub scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 128,
            hidden: 256,
            pool: 8,
            scale: 10.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
        }
    }
}

pub const MIN_TOY_IDENTITIES: usize = 50;
pub const MIN_TOY_RENDERS: usize = 10;

/// Result of training: the embedder (without its identity head) and the
/// per-epoch classification loss.
pub struct TrainedEmbedder {
    pub embedder: NetworkEmbedder,
    pub training_log: Vec<f64>,
}

fn embedder_trunk(cfg: &ToyEmbedderConfig) -> Vec<LayerSpec> {
    let side = CROP_SIZE / cfg.pool;
    vec![
        LayerSpec::AvgPool {
            height: CROP_SIZE,
            width: CROP_SIZE,
            channels: 3,
            factor: cfg.pool,
        },
        LayerSpec::Dense {
            input: side * side * 3,
            output: cfg.hidden,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            input: cfg.hidden,
            output: cfg.descriptor_dim,
        },
        LayerSpec::L2Normalize,
    ]
}

/// Trains a pooled-MLP embedder as an identity classifier on unit-range
/// crops labelled by identity index.
pub fn train_toy_embedder(
    images: &[ImageTensor],
    identities: &[usize],
    cfg: &ToyEmbedderConfig,
    seed: u64,
) -> Result<TrainedEmbedder> {
    if images.len() != identities.len() {
        return Err(Error::Input(format!(
            "{} images but {} identity labels",
            images.len(),
            identities.len()
        )));
    }
    let n_ids = identities.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_ids];
    for &i in identities {
        counts[i] += 1;
    }
    let populated = counts.iter().filter(|&&c| c > 0).count();
    if populated < MIN_TOY_IDENTITIES {
        return Err(Error::Config(format!(
            "toy embedder needs at least {MIN_TOY_IDENTITIES} identities, got {populated}"
        )));
    }
    if counts.iter().any(|&c| c > 0 && c < MIN_TOY_RENDERS) {
        return Err(Error::Config(format!(
            "toy embedder needs at least {MIN_TOY_RENDERS} renders per identity"
        )));
    }
    if cfg.pool == 0 || CROP_SIZE % cfg.pool != 0 {
        return Err(Error::Config(format!("pool factor {} must divide {CROP_SIZE}", cfg.pool)));
    }
    let mut specs = embedder_trunk(cfg);
    let trunk_len = specs.len();
    specs.push(LayerSpec::Scale { factor: cfg.scale });
    specs.push(LayerSpec::Dense {
        input: cfg.descriptor_dim,
        output: n_ids,
    });
    let full = Network::new(CROP_SIZE * CROP_SIZE * 3, specs, seed, false)?;

    // the pooling prefix is parameter-free: apply it once
    let prefix = full.truncated(full.frozen_prefix_len());
    let mut rest = full.suffix(full.frozen_prefix_len());
    let pooled: Vec<Vec<f64>> = images
        .iter()
        .map(|img| {
            img.check_crop()?;
            Ok(prefix.predict_one(img.to_range(RangeTag::Unit).pixels()))
        })
        .collect::<Result<_>>()?;
    let x = nn::stack_rows(&pooled)?;
    let mut y = Array2::zeros((identities.len(), n_ids));
    for (r, &i) in identities.iter().enumerate() {
        y[[r, i]] = 1.0;
    }
    let spec = TrainSpec {
        loss: Loss::SoftmaxCrossEntropy,
        optimizer: OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: cfg.learning_rate,
        },
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
    };
    let training_log = nn::train(&mut rest, &x, &y, &spec, seed ^ 0x5eed)?;

    let mut trunk = full.truncated(trunk_len);
    let trained_tail = rest.truncated(trunk_len - prefix.specs().len());
    for (dst, src) in trunk.params_mut()[prefix.specs().len()..]
        .iter_mut()
        .zip(trained_tail.params())
    {
        dst.clone_from(src);
    }
    Ok(TrainedEmbedder {
        embedder: NetworkEmbedder::new("toy", RangeTag::Unit, trunk)?,
        training_log,
    })
}

/// Untrained embedder with the toy architecture.
pub fn init_toy_embedder(cfg: &ToyEmbedderConfig, seed: u64) -> Result<NetworkEmbedder> {
    let net = Network::new(CROP_SIZE * CROP_SIZE * 3, embedder_trunk(cfg), seed, false)?;
    NetworkEmbedder::new("toy", RangeTag::Unit, net)
}

/// Adapter entry of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// `"toy"` or the name of an externally supplied model.
    pub name: String,
    /// Directory holding the weights (network spec + blob).
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_range")]
    pub input_range: RangeTag,
    #[serde(default)]
    pub descriptor_dim: Option<usize>,
    #[serde(default)]
    pub latent_dim: Option<usize>,
}

fn default_range() -> RangeTag {
    RangeTag::Unit
}

impl AdapterConfig {
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            weights: None,
            input_range: RangeTag::Unit,
            descriptor_dim: None,
            latent_dim: None,
        }
    }
}

/// Builds a generator from config. Only the toy renderer ships in-tree; other
/// names are a dependency error until an adapter is linked in.
pub fn load_generator(cfg: &AdapterConfig) -> Result<Box<dyn Generator>> {
    match cfg.name.as_str() {
        "toy" => {
            if let Some(l) = cfg.latent_dim {
                if l != PARAM_DIM {
                    return Err(Error::Config(format!(
                        "toy generator latent dimension is {PARAM_DIM}, config says {l}"
                    )));
                }
            }
            Ok(Box::new(ToyGenerator))
        }
        other => Err(Error::Dependency(format!(
            "generator adapter '{other}' is not available in this build"
        ))),
    }
}

/// Loads a network-backed embedder from `cfg.weights`.
pub fn load_embedder(cfg: &AdapterConfig) -> Result<NetworkEmbedder> {
    let dir = cfg.weights.as_ref().ok_or_else(|| {
        Error::Config(format!("embedder adapter '{}' needs a weights path", cfg.name))
    })?;
    if !dir.join("embedder.json").exists() {
        return Err(Error::Dependency(format!(
            "embedder weights not found in {}",
            dir.display()
        )));
    }
    let e = NetworkEmbedder::load(cfg.name.clone(), cfg.input_range, dir)?;
    if let Some(d) = cfg.descriptor_dim {
        if d != e.dim() {
            return Err(Error::Config(format!(
                "embedder produces {}-d descriptors, config says {d}",
                e.dim()
            )));
        }
    }
    Ok(e)
}
