//! Output layout and loading of the artifacts subcommands share.

use std::fs;
use std::path::{Path, PathBuf};

use idleak::adapters::{
    load_embedder, load_generator, train_toy_embedder, Embedder, Generator, NetworkEmbedder,
};
use idleak::data_ingest::{DatasetManifest, MANIFEST_FILE};
use idleak::inversion::InitRegressor;
use idleak::probes::{ProbeKind, ProbeModel};
use idleak::tensor::{Descriptor, ImageTensor, RangeTag};
use idleak::{Error, Result};
use rayon::prelude::*;

use crate::config::{kind_name, LoadedConfig, RunConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

pub struct Workspace {
    pub config: RunConfig,
    raw_config: String,
    pub root: PathBuf,
}

pub fn progress(msg: impl AsRef<str>) {
    eprintln!("[idleak] {}", msg.as_ref());
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Workspace {
    pub fn new(loaded: LoadedConfig, out_override: Option<PathBuf>, seed_override: Option<u64>) -> Self {
        let mut config = loaded.config;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        let root = out_override.unwrap_or_else(|| config.output_dir.clone());
        Self {
            config,
            raw_config: loaded.raw,
            root,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn embedder_dir(&self) -> PathBuf {
        self.root.join("embedder")
    }

    pub fn probe_dir(&self, kind: ProbeKind) -> PathBuf {
        self.root.join("probes").join(kind_name(kind))
    }

    pub fn init_dir(&self) -> PathBuf {
        self.root.join("init")
    }

    pub fn inversions_dir(&self) -> PathBuf {
        self.root.join("inversions")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Creates `dir` and copies the run configuration into it verbatim.
    pub fn prepare_output(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_file(&dir.join(RUN_CONFIG_FILE), &self.raw_config)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.config
            .dataset
            .manifest
            .clone()
            .unwrap_or_else(|| self.data_dir().join(MANIFEST_FILE))
    }

    /// The dataset manifest and the directory its image paths are relative to.
    pub fn manifest(&self) -> Result<(DatasetManifest, PathBuf)> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "dataset manifest not found at {} (run gen-toy-data or set dataset.manifest)",
                path.display()
            )));
        }
        let m = DatasetManifest::load(&path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((m, dir))
    }

    pub fn generator(&self) -> Result<Box<dyn Generator>> {
        load_generator(&self.config.adapters.generator)
    }

    /// The configured embedder. The weightless toy embedder is trained on the
    /// manifest's identity-labelled renders on first use and cached.
    pub fn embedder(&self) -> Result<NetworkEmbedder> {
        let cfg = &self.config.adapters.embedder;
        if cfg.name != "toy" || cfg.weights.is_some() {
            return load_embedder(cfg);
        }
        let dir = self.embedder_dir();
        if dir.join("embedder.json").exists() {
            return NetworkEmbedder::load("toy", RangeTag::Unit, &dir);
        }
        let (manifest, data_dir) = self.manifest()?;
        let rows: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].identity.is_some())
            .collect();
        if rows.is_empty() {
            return Err(Error::Dependency(
                "toy embedder has no weights and the manifest has no identity labels to train on".into(),
            ));
        }
        progress(format!("training toy embedder on {} renders", rows.len()));
        let images: Vec<ImageTensor> = rows
            .par_iter()
            .map(|&i| manifest.load_image(&data_dir, i))
            .collect::<Result<_>>()?;
        let identities: Vec<usize> = rows
            .iter()
            .map(|&i| manifest.records[i].identity.expect("filtered") as usize)
            .collect();
        let trained = train_toy_embedder(&images, &identities, &self.config.embedder_training, self.seed())?;
        self.prepare_output(&dir)?;
        trained.embedder.save(&dir)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in trained.training_log.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        write_file(&dir.join("training_log.csv"), csv)?;
        Ok(trained.embedder)
    }

    /// Descriptors of the given manifest records, embedded in parallel.
    pub fn embed_records(
        &self,
        embedder: &dyn Embedder,
        manifest: &DatasetManifest,
        data_dir: &Path,
        rows: &[usize],
    ) -> Result<Vec<Descriptor>> {
        rows.par_iter()
            .map(|&i| {
                let img = manifest.load_image(data_dir, i)?;
                embedder.embed(&img.to_range(embedder.input_range()))
            })
            .collect()
    }

    pub fn probe(&self, kind: ProbeKind) -> Result<ProbeModel> {
        let dir = self.probe_dir(kind);
        if !dir.join("spec.json").exists() {
            return Err(Error::Dependency(format!(
                "probe not found: {} (run train-probe --kind {})",
                dir.display(),
                kind_name(kind)
            )));
        }
        ProbeModel::load(&dir)
    }

    pub fn init_regressor(&self) -> Result<InitRegressor> {
        let dir = self.init_dir();
        if !dir.join("init_regressor.json").exists() {
            return Err(Error::Dependency(format!(
                "init regressor not found: {} (run train-init)",
                dir.display()
            )));
        }
        InitRegressor::load(&dir)
    }
}
