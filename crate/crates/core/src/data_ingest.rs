//! Dataset ingestion: CelebA attribute files, manifests, splits, landmarks and
//! toy dataset generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Embedder, Generator, ToyGenerator};
use crate::error::{Error, Result};
use crate::probes::ProbeData;
use crate::soft_histogram::{soft_image_histogram, HistogramSpec};
use crate::tensor::{ImageTensor, LandmarkSet};
use crate::toy_face::{self, ToyFaceParams, HAT, HAT_THRESHOLD, ID_DIM, PARAM_DIM, SMILE};

/// Parsed CelebA-style attribute annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<bool>)>,
}

impl AttributeTable {
    pub fn get(&self, row: usize, name: &str) -> Option<bool> {
        let col = self.names.iter().position(|n| n == name)?;
        self.rows.get(row).map(|(_, v)| v[col])
    }

    pub fn row_map(&self, row: usize) -> BTreeMap<String, bool> {
        self.names
            .iter()
            .cloned()
            .zip(self.rows[row].1.iter().copied())
            .collect()
    }

    /// Serializes back to the count / header / `±1` row layout.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{}\n", self.rows.len(), self.names.join(" "));
        for (file, values) in &self.rows {
            out.push_str(file);
            for v in values {
                out.push_str(if *v { "  1" } else { " -1" });
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_attribute_file(path: &Path) -> Result<AttributeTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_attributes(&text)
}

/// Parses the layout: record count line, header of attribute names, then one
/// `filename v1 ... vK` row per image with each `v` in `{-1, 1}`.
pub fn parse_attributes(text: &str) -> Result<AttributeTable> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, count_line) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty attribute file".into(),
    })?;
    let count: usize = count_line.trim().parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("expected a record count, got '{}'", count_line.trim()),
    })?;
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 2,
        msg: "missing attribute header".into(),
    })?;
    let names: Vec<String> = header.split_whitespace().map(str::to_owned).collect();
    if names.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "attribute header is empty".into(),
        });
    }
    let mut rows = Vec::with_capacity(count);
    let mut last_line = 2;
    for (line, raw) in lines {
        last_line = line;
        let mut fields = raw.split_whitespace();
        let Some(file) = fields.next() else { continue };
        let values = fields
            .map(|f| match f {
                "1" => Ok(true),
                "-1" => Ok(false),
                other => Err(Error::Parse {
                    line,
                    msg: format!("attribute value must be 1 or -1, got '{other}'"),
                }),
            })
            .collect::<Result<Vec<bool>>>()?;
        if values.len() != names.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} attribute values, got {}", names.len(), values.len()),
            });
        }
        rows.push((file.to_owned(), values));
    }
    if rows.len() != count {
        return Err(Error::Parse {
            line: last_line,
            msg: format!("header declares {count} records, found {}", rows.len()),
        });
    }
    Ok(AttributeTable { names, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Image path relative to the manifest directory.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u32>,
    #[serde(default)]
    pub attributes: BTreeMap<String, bool>,
    /// Flat 136-vector of landmark coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub detection_failed: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: String,
    pub records: Vec<Record>,
    pub fingerprint: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn new(provenance: impl Into<String>, records: Vec<Record>) -> Self {
        let mut m = Self {
            provenance: provenance.into(),
            records,
            fingerprint: String::new(),
        };
        m.refresh_fingerprint();
        m
    }

    /// SHA-256 over the canonical JSON encoding of the records.
    pub fn compute_fingerprint(records: &[Record]) -> String {
        let bytes = serde_json::to_vec(records).expect("records serialize");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn refresh_fingerprint(&mut self) {
        self.fingerprint = Self::compute_fingerprint(&self.records);
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes `manifest.json` into `dir` atomically (temp file + rename).
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest, verifying its fingerprint and that every image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        let expected = Self::compute_fingerprint(&m.records);
        if expected != m.fingerprint {
            return Err(Error::Input(format!(
                "manifest {} fingerprint mismatch: stored {}, computed {expected}",
                path.display(),
                m.fingerprint
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(r) = m.records.iter().find(|r| !dir.join(&r.image).exists()) {
            return Err(Error::Input(format!("manifest image {} does not exist", r.image)));
        }
        Ok(m)
    }

    pub fn load_image(&self, dir: &Path, index: usize) -> Result<ImageTensor> {
        ImageTensor::load(&dir.join(&self.records[index].image))
    }
}

/// Builds a manifest from an attribute table, one record per row.
pub fn manifest_from_attributes(table: &AttributeTable, image_prefix: &str, provenance: &str) -> DatasetManifest {
    let records = (0..table.rows.len())
        .map(|i| Record {
            image: format!("{image_prefix}{}", table.rows[i].0),
            identity: None,
            attributes: table.row_map(i),
            landmarks: None,
            detection_failed: false,
            split: Split::Unassigned,
        })
        .collect();
    DatasetManifest::new(provenance, records)
}

/// Seeded train/test partition: `test_count` records go to test, the rest to train.
pub fn build_split(manifest: &DatasetManifest, test_count: usize, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.records.len();
    if test_count >= n {
        return Err(Error::Config(format!(
            "test_count {test_count} must be smaller than the {n} available records"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Split::Train;
    }
    for &i in &order[..test_count] {
        out.records[i].split = Split::Test;
    }
    out.refresh_fingerprint();
    Ok(out)
}

/// 68-point landmark detector for real images.
pub trait LandmarkDetector: Send + Sync {
    /// `None` when no face is found.
    fn detect(&self, image: &ImageTensor) -> Result<Option<LandmarkSet>>;
}

/// Fills in landmarks for every record that lacks them. Records that already
/// carry landmarks (toy renders) are kept as-is; failed detections are flagged.
pub fn generate_pseudo_landmarks(
    manifest: &DatasetManifest,
    dir: &Path,
    detector: Option<&dyn LandmarkDetector>,
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        if r.landmarks.is_some() {
            continue;
        }
        let det = detector.ok_or_else(|| {
            Error::Dependency(format!(
                "record {} has no landmarks and no landmark detector is configured",
                r.image
            ))
        })?;
        let img = manifest.load_image(dir, i)?;
        match det.detect(&img)? {
            Some(lm) => {
                r.landmarks = Some(lm.to_flat());
                r.detection_failed = false;
            }
            None => r.detection_failed = true,
        }
    }
    out.refresh_fingerprint();
    Ok(out)
}

/// Records usable for landmark training: landmarks present, detection ok.
pub fn landmark_records(manifest: &DatasetManifest, split: Split) -> Vec<usize> {
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split && !r.detection_failed && r.landmarks.is_some())
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub n_identities: usize,
    pub renders_per_identity: usize,
    /// Marginal probability of a smiling render.
    pub smile_prior: f64,
    pub hat_prior: f64,
    /// In `[0, 1]`. At 0 smiling is independent of identity; at 1 every
    /// render of an identity shares that identity's smiling label.
    pub smile_identity_coupling: f64,
    /// Number of records assigned to the test split (0 leaves all unassigned).
    pub test_count: usize,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            n_identities: 50,
            renders_per_identity: 10,
            smile_prior: 0.5,
            hat_prior: 0.3,
            smile_identity_coupling: 0.0,
            test_count: 0,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config("toy dataset needs at least 2 identities".into()));
        }
        if self.renders_per_identity == 0 {
            return Err(Error::Config("renders_per_identity must be positive".into()));
        }
        for (name, p) in [
            ("smile_prior", self.smile_prior),
            ("hat_prior", self.hat_prior),
            ("smile_identity_coupling", self.smile_identity_coupling),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// One sampled toy render before rasterization.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub identity: u32,
    pub params: ToyFaceParams,
}

fn squash(z: f64, i: usize) -> f64 {
    let (_, lo, hi) = toy_face::PARAM_BOUNDS[i];
    lo + (hi - lo) * crate::nn::sigmoid(z)
}

/// Samples identities and per-render non-identity parameters.
///
/// Identity factors and continuous non-identity factors follow the toy
/// generator's prior; smile and hat are drawn to match the configured label
/// priors.
pub fn sample_toy_dataset(cfg: &ToyDatasetConfig, seed: u64) -> Result<Vec<ToySample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_identities * cfg.renders_per_identity);
    for id in 0..cfg.n_identities {
        let mut id_part = [0.0; ID_DIM];
        for (i, v) in id_part.iter_mut().enumerate() {
            *v = squash(StandardNormal.sample(&mut rng), i);
        }
        let smiler = rng.random_bool(cfg.smile_prior);
        let p_smile = cfg.smile_identity_coupling * if smiler { 1.0 } else { 0.0 }
            + (1.0 - cfg.smile_identity_coupling) * cfg.smile_prior;
        for _ in 0..cfg.renders_per_identity {
            let mut params = ToyFaceParams {
                id_part,
                nonid_part: [0.0; PARAM_DIM - ID_DIM],
            };
            for i in ID_DIM..PARAM_DIM {
                params.set(i, squash(StandardNormal.sample(&mut rng), i));
            }
            let smiling = rng.random_bool(p_smile);
            let mag: f64 = rng.random_range(0.05..1.0);
            params.set(SMILE, if smiling { mag } else { -mag });
            let hat = if rng.random_bool(cfg.hat_prior) {
                rng.random_range(HAT_THRESHOLD + 0.05..1.0)
            } else {
                rng.random_range(0.0..HAT_THRESHOLD - 0.05)
            };
            params.set(HAT, hat);
            out.push(ToySample {
                identity: id as u32,
                params,
            });
        }
    }
    Ok(out)
}

/// Manifest record for a toy sample (landmarks and labels exact).
pub fn toy_record(sample: &ToySample, image: String) -> Result<Record> {
    let labels = sample.params.labels();
    let lm = toy_face::landmarks_of(&sample.params)?;
    let mut attributes = BTreeMap::new();
    attributes.insert("Smiling".to_owned(), labels.smiling);
    attributes.insert("Wearing_Hat".to_owned(), labels.wearing_hat);
    Ok(Record {
        image,
        identity: Some(sample.identity),
        attributes,
        landmarks: Some(lm.to_flat()),
        detection_failed: false,
        split: Split::Unassigned,
    })
}

/// Renders a toy dataset into `dir` (PNG images under `images/` plus
/// `manifest.json`). Images are written first and the manifest last, so a
/// failed run never leaves a manifest behind.
pub fn gen_toy_dataset(dir: &Path, cfg: &ToyDatasetConfig, seed: u64) -> Result<DatasetManifest> {
    let samples = sample_toy_dataset(cfg, seed)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (img, _, _) = toy_face::render_toy_face(&s.params)?;
        let mut name = String::new();
        write!(name, "images/{:05}_id{:03}.png", i, s.identity).expect("string write");
        img.save_png(&dir.join(&name))?;
        records.push(toy_record(s, name)?);
    }
    let provenance = format!(
        "toy renderer: {} identities x {} renders, seed {seed}",
        cfg.n_identities, cfg.renders_per_identity
    );
    let mut manifest = DatasetManifest::new(provenance, records);
    if cfg.test_count > 0 {
        manifest = build_split(&manifest, cfg.test_count, seed ^ 0x5917)?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Probe training data drawn from the toy generator prior: descriptors
/// paired with exact landmarks and soft histograms for `n` samples, and the
/// first `n_images` of them as pooled images paired with landmarks. Images
/// are streamed, never held all at once.
pub struct ToyPriorData {
    pub landmarks_from_id: ProbeData,
    pub histogram_from_id: ProbeData,
    pub landmarks_from_image: ProbeData,
}

pub fn toy_prior_probe_data(
    embedder: &dyn Embedder,
    n: usize,
    n_images: usize,
    input_pool: usize,
    histogram: &HistogramSpec,
    seed: u64,
) -> Result<ToyPriorData> {
    if n_images == 0 || n_images > n {
        return Err(Error::Config(format!("image count {n_images} must lie in 1..={n}")));
    }
    let g = ToyGenerator;
    let mut descriptors = Vec::with_capacity(n);
    let mut landmarks = Vec::with_capacity(n);
    let mut histograms = Vec::with_capacity(n);
    let mut render = |i: usize| -> Result<(ImageTensor, LandmarkSet)> {
        let z = g.sample_latent(seed.wrapping_mul(0x2545_f491).wrapping_add(i as u64));
        let (image, lm, _) = toy_face::render_toy_face(&g.params(&z)?)?;
        descriptors.push(embedder.embed(&image.to_range(embedder.input_range()))?);
        histograms.push(soft_image_histogram(&image, histogram)?);
        landmarks.push(lm.clone());
        Ok((image, lm))
    };
    let landmarks_from_image = ProbeData::images(input_pool, (0..n_images).map(&mut render))?;
    for i in n_images..n {
        render(i)?;
    }
    Ok(ToyPriorData {
        landmarks_from_id: ProbeData::landmarks(&descriptors, &landmarks)?,
        histogram_from_id: ProbeData::histograms(&descriptors, &histograms)?,
        landmarks_from_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "3\nSmiling Wearing_Hat Eyeglasses\n000001.jpg -1  1 -1\n000002.jpg  1 -1 -1\n000003.jpg  1  1  1\n";

    #[test]
    fn parses_celeba_rows() {
        let t = parse_attributes(SAMPLE).unwrap();
        assert_eq!(t.names, ["Smiling", "Wearing_Hat", "Eyeglasses"]);
        assert_eq!(t.rows[0], ("000001.jpg".to_owned(), vec![false, true, false]));
        assert_eq!(t.get(2, "Eyeglasses"), Some(true));
    }

    #[test]
    fn short_row_is_a_parse_error_at_its_line() {
        let bad = "2\nA B C\nx.jpg 1 1 1\ny.jpg 1 -1\n";
        match parse_attributes(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_and_count_mismatch_are_parse_errors() {
        assert!(matches!(parse_attributes("1\nA\nx.jpg 0\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_attributes("5\nA\nx.jpg 1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_attributes("abc\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_partitions_records() {
        let t = parse_attributes(SAMPLE).unwrap();
        let m = manifest_from_attributes(&t, "img/", "test");
        let s = build_split(&m, 1, 7).unwrap();
        assert_eq!(s.indices(Split::Test).len(), 1);
        assert_eq!(s.indices(Split::Train).len(), 2);
        assert_eq!(s, build_split(&m, 1, 7).unwrap());
        assert!(matches!(build_split(&m, 3, 7), Err(Error::Config(_))));
        assert_ne!(s.fingerprint, m.fingerprint);
    }

    struct FailEveryOther;

    impl LandmarkDetector for FailEveryOther {
        fn detect(&self, image: &ImageTensor) -> Result<Option<LandmarkSet>> {
            if image.get(0, 0, 0) > 0.5 {
                Ok(None)
            } else {
                Ok(Some(LandmarkSet::new(vec![[1.0, 2.0]; 68])?))
            }
        }
    }

    #[test]
    fn pseudo_landmarks_flag_failures_and_need_a_detector() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for (i, v) in [0.2, 0.9].iter().enumerate() {
            let name = format!("{i}.png");
            ImageTensor::filled(4, 4, crate::tensor::RangeTag::Unit, [*v; 3])
                .unwrap()
                .save_png(&dir.path().join(&name))
                .unwrap();
            records.push(Record {
                image: name,
                identity: None,
                attributes: BTreeMap::new(),
                landmarks: None,
                detection_failed: false,
                split: Split::Train,
            });
        }
        let m = DatasetManifest::new("synthetic", records);
        assert!(matches!(
            generate_pseudo_landmarks(&m, dir.path(), None),
            Err(Error::Dependency(_))
        ));
        let out = generate_pseudo_landmarks(&m, dir.path(), Some(&FailEveryOther)).unwrap();
        assert!(out.records[0].landmarks.is_some());
        assert!(out.records[1].detection_failed);
        assert_eq!(landmark_records(&out, Split::Train), vec![0]);
        let again = generate_pseudo_landmarks(&m, dir.path(), Some(&FailEveryOther)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn toy_config_bounds() {
        let cfg = ToyDatasetConfig { n_identities: 1, ..Default::default() };
        assert!(matches!(sample_toy_dataset(&cfg, 0), Err(Error::Config(_))));
        let cfg = ToyDatasetConfig { smile_prior: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn manifest_load_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyDatasetConfig { n_identities: 2, renders_per_identity: 1, ..Default::default() };
        let m = gen_toy_dataset(dir.path(), &cfg, 1).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
        let text = fs::read_to_string(&path).unwrap();
        let mut tampered: DatasetManifest = serde_json::from_str(&text).unwrap();
        tampered.records[0].identity = Some(99);
        fs::write(&path, serde_json::to_string(&tampered).unwrap()).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Input(_))));
    }
}
