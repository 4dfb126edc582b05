//! Run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use idleak::adapters::{AdapterConfig, ToyEmbedderConfig};
use idleak::data_ingest::ToyDatasetConfig;
use idleak::inversion::{InitRegressorConfig, InversionConfig, MIN_INIT_SAMPLES};
use idleak::probes::{ProbeKind, ProbeSpec};
use idleak::soft_histogram::HistogramSpec;
use idleak::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub adapters: AdaptersSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub embedder_training: ToyEmbedderConfig,
    #[serde(default)]
    pub histogram: HistogramSpec,
    #[serde(default)]
    pub probes: ProbesSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub inversion: InversionSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptersSection {
    pub embedder: AdapterConfig,
    pub generator: AdapterConfig,
    /// Landmark detector for real images without annotations.
    #[serde(default)]
    pub detector: Option<String>,
}

impl Default for AdaptersSection {
    fn default() -> Self {
        Self {
            embedder: AdapterConfig::toy(),
            generator: AdapterConfig::toy(),
            detector: None,
        }
    }
}

/// Either an existing manifest or parameters for `gen-toy-data`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub toy: Option<ToyDatasetConfig>,
}

/// Where landmark and histogram probes get their training pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    /// Train/test split of the dataset manifest.
    #[default]
    Manifest,
    /// Fresh renders from the generator prior.
    GeneratorPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub n_train: usize,
    /// Renders kept as images for the image probe (at most `n_train`).
    pub n_images: usize,
    pub n_test: usize,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_images: 2000,
            n_test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbesSection {
    /// Attribute column used by the binary probe.
    pub attribute: String,
    pub source: ProbeSource,
    pub prior: PriorSection,
    pub binary: Option<ProbeSpec>,
    pub landmarks_from_id: Option<ProbeSpec>,
    pub histogram_from_id: Option<ProbeSpec>,
    pub landmarks_from_image: Option<ProbeSpec>,
}

impl Default for ProbesSection {
    fn default() -> Self {
        Self {
            attribute: "Smiling".into(),
            source: ProbeSource::Manifest,
            prior: PriorSection::default(),
            binary: None,
            landmarks_from_id: None,
            histogram_from_id: None,
            landmarks_from_image: None,
        }
    }
}

impl ProbesSection {
    /// The configured recipe for `kind`, or its default.
    pub fn spec(&self, kind: ProbeKind, histogram: &HistogramSpec) -> ProbeSpec {
        let configured = match kind {
            ProbeKind::Binary => &self.binary,
            ProbeKind::LandmarksFromId => &self.landmarks_from_id,
            ProbeKind::HistogramFromId => &self.histogram_from_id,
            ProbeKind::LandmarksFromImage => &self.landmarks_from_image,
        };
        configured.clone().unwrap_or_else(|| ProbeSpec {
            histogram: *histogram,
            ..ProbeSpec::default_for(kind)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub n_samples: usize,
    pub regressor: InitRegressorConfig,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            n_samples: MIN_INIT_SAMPLES,
            regressor: InitRegressorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub settings: InversionConfig,
    /// Generator-prior targets used when no descriptor or image is given.
    pub toy_targets: usize,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            settings: InversionConfig::default(),
            toy_targets: 20,
        }
    }
}

/// A validated configuration plus the raw text it was read from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: String,
}

impl RunConfig {
    /// Reads, parses, resolves relative paths against the file's directory
    /// and validates.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let raw = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(LoadedConfig { config, raw })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let Some(m) = &mut self.dataset.manifest {
            join(m);
        }
        for adapter in [&mut self.adapters.embedder, &mut self.adapters.generator] {
            if let Some(w) = &mut adapter.weights {
                join(w);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.manifest.is_some() && self.dataset.toy.is_some() {
            return Err(Error::Config(
                "dataset takes either a manifest path or toy parameters, not both".into(),
            ));
        }
        if let Some(toy) = &self.dataset.toy {
            toy.validate()?;
        }
        self.histogram.validate()?;
        for kind in KINDS {
            let spec = self.probes.spec(kind, &self.histogram);
            if spec.kind != kind {
                return Err(Error::Config(format!(
                    "probe recipe under {} declares kind {:?}",
                    kind_name(kind),
                    spec.kind
                )));
            }
            spec.validate()?;
        }
        let prior = &self.probes.prior;
        if prior.n_train == 0 || prior.n_test == 0 || prior.n_images == 0 {
            return Err(Error::Config("generator-prior probe data sizes must be positive".into()));
        }
        if self.init.n_samples < MIN_INIT_SAMPLES {
            return Err(Error::Config(format!(
                "init.n_samples must be at least {MIN_INIT_SAMPLES}"
            )));
        }
        self.inversion.settings.validate()?;
        if self.inversion.toy_targets == 0 {
            return Err(Error::Config("inversion.toy_targets must be positive".into()));
        }
        Ok(())
    }
}

pub const KINDS: [ProbeKind; 4] = [
    ProbeKind::Binary,
    ProbeKind::LandmarksFromId,
    ProbeKind::HistogramFromId,
    ProbeKind::LandmarksFromImage,
];

pub fn kind_name(kind: ProbeKind) -> &'static str {
    match kind {
        ProbeKind::Binary => "binary",
        ProbeKind::LandmarksFromId => "landmarks_from_id",
        ProbeKind::HistogramFromId => "histogram_from_id",
        ProbeKind::LandmarksFromImage => "landmarks_from_image",
    }
}
