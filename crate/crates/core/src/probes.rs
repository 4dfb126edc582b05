//! Regressors and classifiers trained on top of frozen descriptors (or, for
//! the landmark CNN, on images) to measure what a descriptor reveals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, LayerSpec, Loss, Network, OptimizerKind, OptimizerSpec, TrainSpec};
use crate::soft_histogram::{emd, Histogram, HistogramSpec};
use crate::tensor::{Descriptor, ImageTensor, LandmarkSet, RangeTag, CROP_SIZE, LANDMARK_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Binary attribute from a descriptor.
    Binary,
    /// 68 landmark coordinates from a descriptor.
    LandmarksFromId,
    /// Normalized color histogram from a descriptor.
    HistogramFromId,
    /// 68 landmark coordinates from an image (convolutional).
    LandmarksFromImage,
}

impl ProbeKind {
    fn output_dim(self, hist: &HistogramSpec) -> usize {
        match self {
            ProbeKind::Binary => 1,
            ProbeKind::LandmarksFromId | ProbeKind::LandmarksFromImage => 2 * LANDMARK_COUNT,
            ProbeKind::HistogramFromId => 3 * hist.n,
        }
    }

    fn is_landmarks(self) -> bool {
        matches!(self, ProbeKind::LandmarksFromId | ProbeKind::LandmarksFromImage)
    }
}

/// Architecture and training recipe of a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    /// Widths of the hidden fully connected layers (ReLU activations).
    pub hidden: Vec<usize>,
    /// Output channels of the stride-2 3x3 convolutions (image probes only).
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    /// Box-pooling factor applied to the crop before the convolutions.
    #[serde(default = "default_input_pool")]
    pub input_pool: usize,
    pub loss: Loss,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
    /// Landmark targets are regressed as `(pixel - center) / scale`. The
    /// identity (0, 1) regresses raw pixels.
    #[serde(default = "default_landmark_center")]
    pub landmark_center: f64,
    #[serde(default = "default_landmark_scale")]
    pub landmark_scale: f64,
    #[serde(default)]
    pub histogram: HistogramSpec,
}

fn default_input_pool() -> usize {
    8
}

fn default_landmark_center() -> f64 {
    0.0
}

fn default_landmark_scale() -> f64 {
    1.0
}

impl ProbeSpec {
    /// Default recipe of each probe kind.
    pub fn default_for(kind: ProbeKind) -> Self {
        let adam = |lr| OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: lr,
        };
        let sgd = OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-3,
        };
        let base = |hidden: Vec<usize>, loss, optimizer, batch_size, epochs| ProbeSpec {
            kind,
            hidden,
            conv_channels: Vec::new(),
            input_pool: default_input_pool(),
            loss,
            optimizer,
            batch_size,
            epochs,
            landmark_center: default_landmark_center(),
            landmark_scale: default_landmark_scale(),
            histogram: HistogramSpec::default(),
        };
        match kind {
            ProbeKind::Binary => base(vec![256, 256], Loss::Bce, adam(1e-3), 32, 20),
            ProbeKind::HistogramFromId => base(vec![8], Loss::Mse, adam(1e-6), 32, 20),
            ProbeKind::LandmarksFromId => base(vec![256, 256], Loss::Mse, sgd, 16, 150),
            ProbeKind::LandmarksFromImage => ProbeSpec {
                conv_channels: vec![16, 32, 64, 64, 128],
                landmark_center: CROP_SIZE as f64 / 2.0,
                landmark_scale: CROP_SIZE as f64 / 2.0,
                ..base(vec![256], Loss::Mse, adam(1e-3), 16, 150)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch size must be positive".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("probe learning rate must be positive".into()));
        }
        if !(self.landmark_scale > 0.0) {
            return Err(Error::Config("landmark scale must be positive".into()));
        }
        if self.hidden.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.kind == ProbeKind::LandmarksFromImage
            && (self.input_pool == 0 || CROP_SIZE % self.input_pool != 0)
        {
            return Err(Error::Config(format!(
                "input pool {} must divide {CROP_SIZE}",
                self.input_pool
            )));
        }
        let expected = match self.kind {
            ProbeKind::Binary => Loss::Bce,
            _ => Loss::Mse,
        };
        if self.loss != expected {
            return Err(Error::Config(format!(
                "{:?} probes are trained with {expected:?}, not {:?}",
                self.kind, self.loss
            )));
        }
        self.histogram.validate()
    }

    fn build(&self, input_dim: usize, seed: u64) -> Result<Network> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        if self.kind == ProbeKind::LandmarksFromImage {
            if input_dim != CROP_SIZE * CROP_SIZE * 3 {
                return Err(Error::Config("image probes take full crops".into()));
            }
            let mut side = CROP_SIZE / self.input_pool;
            layers.push(LayerSpec::AvgPool {
                height: CROP_SIZE,
                width: CROP_SIZE,
                channels: 3,
                factor: self.input_pool,
            });
            let mut channels = 3;
            for &out in &self.conv_channels {
                let conv = LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: out,
                    height: side,
                    width: side,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                side = conv.conv_output_hw().expect("conv layer").0;
                layers.push(conv);
                layers.push(LayerSpec::Relu);
                channels = out;
            }
            width = channels * side * side;
        }
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense {
                input: width,
                output: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense {
            input: width,
            output: self.kind.output_dim(&self.histogram),
        });
        match self.kind {
            ProbeKind::Binary => layers.push(LayerSpec::Sigmoid),
            ProbeKind::HistogramFromId => layers.push(LayerSpec::GroupSoftmax { groups: 3 }),
            _ => {}
        }
        Network::new(input_dim, layers, seed, true)
    }

    fn decode_landmarks(&self, out: &[f64]) -> Result<LandmarkSet> {
        let px: Vec<f64> = out
            .iter()
            .map(|v| self.landmark_center + self.landmark_scale * v)
            .collect();
        LandmarkSet::from_flat(&px)
    }
}

/// Training or test data for one probe kind. Image inputs are stored after
/// the parameter-free pooling front-end.
#[derive(Clone, Debug)]
pub struct ProbeData {
    kind: ProbeKind,
    inputs: Array2<f64>,
    /// Targets in natural units: labels, landmark pixels or histogram mass.
    targets: Array2<f64>,
    fingerprint: String,
}

fn hash_f64s(hasher: &mut Sha256, values: &[f64]) {
    for v in values {
        hasher.update(v.to_le_bytes());
    }
}

impl ProbeData {
    fn from_rows(kind: ProbeKind, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Input(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Input("probe data is empty".into()));
        }
        let mut hasher = Sha256::new();
        for (x, y) in inputs.iter().zip(&targets) {
            hash_f64s(&mut hasher, x);
            hash_f64s(&mut hasher, y);
        }
        Ok(Self {
            kind,
            inputs: nn::stack_rows(&inputs)?,
            targets: nn::stack_rows(&targets)?,
            fingerprint: hex::encode(hasher.finalize()),
        })
    }

    pub fn binary(descriptors: &[Descriptor], labels: &[bool]) -> Result<Self> {
        let x = descriptors.iter().map(|d| d.values.clone()).collect();
        let y = labels.iter().map(|&l| vec![if l { 1.0 } else { 0.0 }]).collect();
        Self::from_rows(ProbeKind::Binary, x, y)
    }

    pub fn landmarks(descriptors: &[Descriptor], landmarks: &[LandmarkSet]) -> Result<Self> {
        let x = descriptors.iter().map(|d| d.values.clone()).collect();
        let y = landmarks.iter().map(LandmarkSet::to_flat).collect();
        Self::from_rows(ProbeKind::LandmarksFromId, x, y)
    }

    pub fn histograms(descriptors: &[Descriptor], histograms: &[Histogram]) -> Result<Self> {
        let x = descriptors.iter().map(|d| d.values.clone()).collect();
        let y = histograms.iter().map(Histogram::to_flat).collect();
        Self::from_rows(ProbeKind::HistogramFromId, x, y)
    }

    /// Image/landmark pairs for the landmark CNN. Images are converted to
    /// the unit range and pooled by `input_pool` as they arrive.
    pub fn images<I>(input_pool: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = Result<(ImageTensor, LandmarkSet)>>,
    {
        if input_pool == 0 || CROP_SIZE % input_pool != 0 {
            return Err(Error::Config(format!("input pool {input_pool} must divide {CROP_SIZE}")));
        }
        let pool = Network::new(
            CROP_SIZE * CROP_SIZE * 3,
            vec![LayerSpec::AvgPool {
                height: CROP_SIZE,
                width: CROP_SIZE,
                channels: 3,
                factor: input_pool,
            }],
            0,
            false,
        )?;
        let mut hasher = Sha256::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for pair in pairs {
            let (image, lm) = pair?;
            image.check_crop()?;
            let unit = image.to_range(RangeTag::Unit);
            let flat = lm.to_flat();
            hash_f64s(&mut hasher, unit.pixels());
            hash_f64s(&mut hasher, &flat);
            x.push(pool.predict_one(unit.pixels()));
            y.push(flat);
        }
        if x.is_empty() {
            return Err(Error::Input("probe data is empty".into()));
        }
        Ok(Self {
            kind: ProbeKind::LandmarksFromImage,
            inputs: nn::stack_rows(&x)?,
            targets: nn::stack_rows(&y)?,
            fingerprint: hex::encode(hasher.finalize()),
        })
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Constant predictor used as a reference point: the majority class or the
/// mean training target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Baseline {
    MajorityClass { positive_rate: f64 },
    MeanTarget { values: Vec<f64> },
}

impl Baseline {
    fn fit(kind: ProbeKind, targets: &Array2<f64>) -> Self {
        let mean = targets
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty targets")
            .to_vec();
        match kind {
            ProbeKind::Binary => Baseline::MajorityClass {
                positive_rate: mean[0],
            },
            _ => Baseline::MeanTarget { values: mean },
        }
    }
}

/// A probe output in natural units.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Probability(f64),
    Landmarks(LandmarkSet),
    Histogram(Histogram),
}

impl Prediction {
    pub fn label(&self) -> Option<bool> {
        match self {
            Prediction::Probability(p) => Some(*p >= 0.5),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub input_dim: usize,
    pub n_train: usize,
    pub data_fingerprint: String,
    pub baseline: Baseline,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub spec: ProbeSpec,
    pub network: Network,
    pub training_log: Vec<f64>,
    pub meta: ProbeMeta,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    spec: ProbeSpec,
    meta: ProbeMeta,
}

const SPEC_FILE: &str = "spec.json";
const WEIGHTS_STEM: &str = "weights";
const LOG_FILE: &str = "training_log.csv";

impl ProbeModel {
    /// Writes `spec.json`, `weights.json`/`weights.bin` and `training_log.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = ProbeFile {
            spec: self.spec.clone(),
            meta: self.meta.clone(),
        };
        let spec_path = dir.join(SPEC_FILE);
        fs::write(&spec_path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&spec_path, e))?;
        self.network.save(dir, WEIGHTS_STEM)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in self.training_log.iter().enumerate() {
            writeln!(csv, "{},{l}", i + 1).expect("string write");
        }
        let log_path = dir.join(LOG_FILE);
        fs::write(&log_path, csv).map_err(|e| Error::io(&log_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let file: ProbeFile = serde_json::from_str(&text)?;
        let network = Network::load(dir, WEIGHTS_STEM)?;
        if network.input_dim() != file.meta.input_dim {
            return Err(Error::Config(format!(
                "probe weights take {} inputs, spec declares {}",
                network.input_dim(),
                file.meta.input_dim
            )));
        }
        let log_path = dir.join(LOG_FILE);
        let training_log = match fs::read_to_string(&log_path) {
            Ok(csv) => csv
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').nth(1)?.parse().ok())
                .collect(),
            Err(_) => Vec::new(),
        };
        Ok(Self {
            spec: file.spec,
            network,
            training_log,
            meta: file.meta,
        })
    }

    fn suffix_start(&self) -> usize {
        if self.spec.kind == ProbeKind::LandmarksFromImage {
            self.network.frozen_prefix_len()
        } else {
            0
        }
    }

    fn decode(&self, out: &[f64]) -> Result<Prediction> {
        Ok(match self.spec.kind {
            ProbeKind::Binary => Prediction::Probability(out[0]),
            ProbeKind::LandmarksFromId | ProbeKind::LandmarksFromImage => {
                Prediction::Landmarks(self.spec.decode_landmarks(out)?)
            }
            ProbeKind::HistogramFromId => Prediction::Histogram(Histogram::from_flat(self.spec.histogram, out)?),
        })
    }

    fn baseline_prediction(&self) -> Result<Prediction> {
        match &self.meta.baseline {
            Baseline::MajorityClass { positive_rate } => Ok(Prediction::Probability(if *positive_rate >= 0.5 {
                1.0
            } else {
                0.0
            })),
            Baseline::MeanTarget { values } => match self.spec.kind {
                ProbeKind::HistogramFromId => {
                    Ok(Prediction::Histogram(Histogram::from_flat(self.spec.histogram, values)?))
                }
                _ => Ok(Prediction::Landmarks(LandmarkSet::from_flat(values)?)),
            },
        }
    }
}

/// Trains a probe of `spec.kind` on `data`.
pub fn train_probe(spec: &ProbeSpec, data: &ProbeData, seed: u64) -> Result<ProbeModel> {
    spec.validate()?;
    if spec.kind != data.kind {
        return Err(Error::Config(format!(
            "{:?} probe cannot train on {:?} data",
            spec.kind, data.kind
        )));
    }
    if spec.kind == ProbeKind::HistogramFromId && data.targets.ncols() != 3 * spec.histogram.n {
        return Err(Error::Config(format!(
            "histogram targets have {} values, spec expects {}",
            data.targets.ncols(),
            3 * spec.histogram.n
        )));
    }
    let input_dim = match spec.kind {
        ProbeKind::LandmarksFromImage => CROP_SIZE * CROP_SIZE * 3,
        _ => data.inputs.ncols(),
    };
    let mut network = spec.build(input_dim, seed)?;
    let start = if spec.kind == ProbeKind::LandmarksFromImage {
        network.frozen_prefix_len()
    } else {
        0
    };
    let mut trainable = network.suffix(start);
    if trainable.input_dim() != data.inputs.ncols() {
        return Err(Error::Config(format!(
            "probe data has {} features, network expects {}",
            data.inputs.ncols(),
            trainable.input_dim()
        )));
    }
    let targets = if spec.kind.is_landmarks() {
        data.targets.mapv(|v| (v - spec.landmark_center) / spec.landmark_scale)
    } else {
        data.targets.clone()
    };
    let train_spec = TrainSpec {
        loss: spec.loss,
        optimizer: spec.optimizer,
        batch_size: spec.batch_size,
        epochs: spec.epochs,
    };
    let training_log = nn::train(&mut trainable, &data.inputs, &targets, &train_spec, seed ^ 0x9e37)?;
    network.set_suffix_params(start, &trainable);
    Ok(ProbeModel {
        spec: spec.clone(),
        network,
        training_log,
        meta: ProbeMeta {
            input_dim,
            n_train: data.len(),
            data_fingerprint: data.fingerprint.clone(),
            baseline: Baseline::fit(spec.kind, &data.targets),
            seed,
        },
    })
}

/// Applies a descriptor probe.
pub fn predict(model: &ProbeModel, descriptor: &Descriptor) -> Result<Prediction> {
    if model.spec.kind == ProbeKind::LandmarksFromImage {
        return Err(Error::Config("image probes take images, not descriptors".into()));
    }
    if descriptor.dim() != model.meta.input_dim {
        return Err(Error::Input(format!(
            "probe expects {}-dimensional descriptors, got {}",
            model.meta.input_dim,
            descriptor.dim()
        )));
    }
    model.decode(&model.network.predict_one(&descriptor.values))
}

/// The constant reference prediction of a trained probe.
pub fn baseline_predict(model: &ProbeModel) -> Result<Prediction> {
    model.baseline_prediction()
}

fn check_image_probe(model: &ProbeModel, image: &ImageTensor) -> Result<()> {
    if model.spec.kind != ProbeKind::LandmarksFromImage {
        return Err(Error::Config(format!("{:?} probes do not take images", model.spec.kind)));
    }
    image.check_crop()
}

pub fn predict_landmarks_from_image(model: &ProbeModel, image: &ImageTensor) -> Result<LandmarkSet> {
    check_image_probe(model, image)?;
    let unit = image.to_range(RangeTag::Unit);
    model.spec.decode_landmarks(&model.network.predict_one(unit.pixels()))
}

/// Landmarks predicted from `image` and the gradient of
/// `Σ cotangent · landmarks` (pixel units) w.r.t. the image, in its own range.
pub fn predict_landmarks_from_image_vjp(
    model: &ProbeModel,
    image: &ImageTensor,
    cotangent: &[f64],
) -> Result<(LandmarkSet, Vec<f64>)> {
    check_image_probe(model, image)?;
    if cotangent.len() != 2 * LANDMARK_COUNT {
        return Err(Error::Input(format!(
            "landmark cotangent must have length {}, got {}",
            2 * LANDMARK_COUNT,
            cotangent.len()
        )));
    }
    let unit = image.to_range(RangeTag::Unit);
    let scaled: Vec<f64> = cotangent.iter().map(|c| c * model.spec.landmark_scale).collect();
    let (out, mut grad) = model.network.vjp_one(unit.pixels(), &scaled);
    let to_unit = 1.0 / image.range().max_value();
    if to_unit != 1.0 {
        grad.iter_mut().for_each(|g| *g *= to_unit);
    }
    Ok((model.spec.decode_landmarks(&out)?, grad))
}

/// Test-set summary of a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub kind: ProbeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark_err_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emd: Option<f64>,
    pub baseline: f64,
    pub n_test: usize,
    pub seed: u64,
}

impl ProbeMetrics {
    /// The headline number, whichever kind it is.
    pub fn value(&self) -> f64 {
        self.accuracy_pct
            .or(self.landmark_err_pct)
            .or(self.emd)
            .expect("one metric is always set")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates a probe and its baseline on held-out data. Refuses data
/// identical to the training set.
pub fn evaluate_probe(model: &ProbeModel, test: &ProbeData) -> Result<ProbeMetrics> {
    if test.kind != model.spec.kind {
        return Err(Error::Config(format!(
            "{:?} probe cannot be evaluated on {:?} data",
            model.spec.kind, test.kind
        )));
    }
    if test.fingerprint == model.meta.data_fingerprint {
        return Err(Error::Usage("evaluation data is identical to the training data".into()));
    }
    let net = model.network.suffix(model.suffix_start());
    if net.input_dim() != test.inputs.ncols() {
        return Err(Error::Input(format!(
            "test data has {} features, probe expects {}",
            test.inputs.ncols(),
            net.input_dim()
        )));
    }
    let outputs = net.predict(test.inputs.clone());
    let baseline = model.baseline_prediction()?;
    let mut metrics = ProbeMetrics {
        kind: model.spec.kind,
        accuracy_pct: None,
        landmark_err_pct: None,
        emd: None,
        baseline: 0.0,
        n_test: test.len(),
        seed: model.meta.seed,
    };
    let rows = outputs.rows().into_iter().zip(test.targets.rows());
    match model.spec.kind {
        ProbeKind::Binary => {
            let actual: Vec<bool> = test.targets.column(0).iter().map(|&v| v >= 0.5).collect();
            let predicted: Vec<bool> = outputs.column(0).iter().map(|&p| p >= 0.5).collect();
            let base = baseline.label().expect("binary baseline");
            metrics.accuracy_pct = Some(metrics::accuracy_pct(&predicted, &actual)?);
            metrics.baseline = metrics::accuracy_pct(&vec![base; actual.len()], &actual)?;
        }
        ProbeKind::LandmarksFromId | ProbeKind::LandmarksFromImage => {
            let Prediction::Landmarks(base) = baseline else {
                unreachable!("landmark baseline")
            };
            let (mut err, mut base_err) = (0.0, 0.0);
            for (out, target) in rows {
                let gt = LandmarkSet::from_flat(target.as_slice().expect("contiguous row"))?;
                let pred = model.spec.decode_landmarks(&out.to_vec())?;
                err += metrics::landmark_error(&pred, &gt)?;
                base_err += metrics::landmark_error(&base, &gt)?;
            }
            metrics.landmark_err_pct = Some(err / test.len() as f64);
            metrics.baseline = base_err / test.len() as f64;
        }
        ProbeKind::HistogramFromId => {
            let Prediction::Histogram(base) = baseline else {
                unreachable!("histogram baseline")
            };
            let spec = model.spec.histogram;
            let (mut total, mut base_total) = (0.0, 0.0);
            for (out, target) in rows {
                let gt = Histogram::from_flat(spec, target.as_slice().expect("contiguous row"))?;
                let pred = Histogram::from_flat(spec, &out.to_vec())?;
                total += emd(&pred, &gt)?;
                base_total += emd(&base, &gt)?;
            }
            metrics.emd = Some(total / test.len() as f64);
            metrics.baseline = base_total / test.len() as f64;
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn descriptors(n: usize, dim: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Descriptor::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), "t").unwrap())
            .collect()
    }

    #[test]
    fn untrained_probes_start_at_neutral_outputs() {
        let d = descriptors(4, 6, 0);
        let data = ProbeData::binary(&d, &[true, false, true, true]).unwrap();
        let spec = ProbeSpec {
            epochs: 0,
            ..ProbeSpec::default_for(ProbeKind::Binary)
        };
        let model = train_probe(&spec, &data, 1).unwrap();
        assert_eq!(predict(&model, &d[0]).unwrap(), Prediction::Probability(0.5));
        assert_eq!(baseline_predict(&model).unwrap(), Prediction::Probability(1.0));

        let hists: Vec<Histogram> = (0..4)
            .map(|_| Histogram::from_flat(HistogramSpec::default(), &[0.1; 30]).unwrap())
            .collect();
        let data = ProbeData::histograms(&d, &hists).unwrap();
        let spec = ProbeSpec {
            epochs: 0,
            ..ProbeSpec::default_for(ProbeKind::HistogramFromId)
        };
        let model = train_probe(&spec, &data, 1).unwrap();
        let Prediction::Histogram(h) = predict(&model, &d[1]).unwrap() else { panic!() };
        assert!(h.is_normalized(1e-12));
    }

    #[test]
    fn binary_probe_learns_a_linear_rule() {
        let train = descriptors(400, 8, 1);
        let test = descriptors(200, 8, 2);
        let label = |d: &Descriptor| d.values[0] + 0.5 * d.values[3] > 0.0;
        let data = ProbeData::binary(&train, &train.iter().map(label).collect::<Vec<_>>()).unwrap();
        let model = train_probe(&ProbeSpec::default_for(ProbeKind::Binary), &data, 3).unwrap();
        let test_data = ProbeData::binary(&test, &test.iter().map(label).collect::<Vec<_>>()).unwrap();
        let m = evaluate_probe(&model, &test_data).unwrap();
        assert!(m.accuracy_pct.unwrap() > 90.0, "{m:?}");
        assert!(m.baseline < 70.0);
        assert!(model.training_log.last() < model.training_log.first());
    }

    #[test]
    fn evaluation_refuses_training_data() {
        let d = descriptors(10, 3, 4);
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let data = ProbeData::binary(&d, &labels).unwrap();
        let model = train_probe(&ProbeSpec::default_for(ProbeKind::Binary), &data, 0).unwrap();
        assert!(matches!(evaluate_probe(&model, &data), Err(Error::Usage(_))));
    }

    #[test]
    fn kind_and_shape_mismatches_are_rejected() {
        let d = descriptors(10, 3, 4);
        let labels = vec![true; 10];
        let data = ProbeData::binary(&d, &labels).unwrap();
        let spec = ProbeSpec::default_for(ProbeKind::LandmarksFromId);
        assert!(matches!(train_probe(&spec, &data, 0), Err(Error::Config(_))));
        let model = train_probe(&ProbeSpec::default_for(ProbeKind::Binary), &data, 0).unwrap();
        let wrong = Descriptor::new(vec![0.0; 4], "t").unwrap();
        assert!(matches!(predict(&model, &wrong), Err(Error::Input(_))));
        let img = ImageTensor::filled(CROP_SIZE, CROP_SIZE, RangeTag::Unit, [0.5; 3]).unwrap();
        assert!(matches!(predict_landmarks_from_image(&model, &img), Err(Error::Config(_))));
        let bad = ProbeSpec {
            loss: Loss::Mse,
            ..ProbeSpec::default_for(ProbeKind::Binary)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let d = descriptors(20, 5, 5);
        let lms: Vec<LandmarkSet> = d
            .iter()
            .map(|x| LandmarkSet::from_flat(&vec![100.0 + 10.0 * x.values[0]; 136]).unwrap())
            .collect();
        let data = ProbeData::landmarks(&d, &lms).unwrap();
        let spec = ProbeSpec {
            epochs: 3,
            ..ProbeSpec::default_for(ProbeKind::LandmarksFromId)
        };
        let model = train_probe(&spec, &data, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = ProbeModel::load(dir.path()).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(predict(&loaded, &d[0]).unwrap(), predict(&model, &d[0]).unwrap());
    }

    #[test]
    fn image_probe_vjp_matches_finite_differences() {
        let spec = ProbeSpec {
            conv_channels: vec![2, 3],
            hidden: vec![5],
            input_pool: 16,
            epochs: 0,
            ..ProbeSpec::default_for(ProbeKind::LandmarksFromImage)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = ImageTensor::new(
            CROP_SIZE,
            CROP_SIZE,
            RangeTag::Byte,
            (0..CROP_SIZE * CROP_SIZE * 3).map(|_| rng.random_range(0.0..255.0)).collect(),
        )
        .unwrap();
        let lm = LandmarkSet::from_flat(&[112.0; 136]).unwrap();
        let data = ProbeData::images(16, [Ok((img.clone(), lm))]).unwrap();
        let mut model = train_probe(&spec, &data, 0).unwrap();
        // give the zero-initialized head some weights
        let last = model.network.params().len() - 1;
        for (i, w) in model.network.params_mut()[last].iter_mut().enumerate() {
            *w = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        let cot: Vec<f64> = (0..136).map(|i| ((i * 31) % 7) as f64 - 3.0).collect();
        let (lms, grad) = predict_landmarks_from_image_vjp(&model, &img, &cot).unwrap();
        assert_eq!(lms, predict_landmarks_from_image(&model, &img).unwrap());
        let f = |im: &ImageTensor| -> f64 {
            let l = predict_landmarks_from_image(&model, im).unwrap().to_flat();
            l.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        for idx in [0usize, 5000, 77777, 150000] {
            let h = 1e-3;
            let mut p = img.pixels().to_vec();
            p[idx] += h;
            let plus = f(&ImageTensor::new(CROP_SIZE, CROP_SIZE, RangeTag::Byte, p.clone()).unwrap());
            p[idx] -= 2.0 * h;
            let minus = f(&ImageTensor::new(CROP_SIZE, CROP_SIZE, RangeTag::Byte, p).unwrap());
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{idx}: {fd} vs {}", grad[idx]);
        }
    }
}
