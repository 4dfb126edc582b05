//! Descriptor-to-image reconstruction: a regression network proposes a
//! starting latent code, then Adam minimizes the weighted identity,
//! landmark and histogram objective through the generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapters::{Embedder, Generator};
use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, Loss, Network, Optimizer, OptimizerKind, OptimizerSpec, TrainSpec};
use crate::probes::{self, Prediction, ProbeKind, ProbeModel};
use crate::soft_histogram::{soft_image_histogram, soft_image_histogram_vjp, Histogram, HistogramSpec};
use crate::tensor::{Descriptor, ImageTensor, LandmarkSet, LatentCode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitRegressorConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the sampled pairs held out to measure latent error.
    pub validation_fraction: f64,
}

impl Default for InitRegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![2048; 3],
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            validation_fraction: 0.1,
        }
    }
}

pub const MIN_INIT_SAMPLES: usize = 1000;

/// MLP from descriptor to latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct InitRegressor {
    pub network: Network,
    pub training_log: Vec<f64>,
    pub report: InitReport,
}

/// Held-out latent error against the zero (prior mean) predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub n_train: usize,
    pub n_validation: usize,
    pub validation_mse: f64,
    pub prior_mean_mse: f64,
    pub seed: u64,
}

const INIT_STEM: &str = "init_regressor";
const INIT_REPORT: &str = "init_report.json";
const INIT_LOG: &str = "training_log.csv";

fn dependency(what: &str, e: Error) -> Error {
    match e {
        Error::Dependency(_) => e,
        other => Error::Dependency(format!("{what} failed: {other}")),
    }
}

/// Converts `image` to the embedder's range; the returned factor maps
/// embedder-range pixel gradients back to the image's own range.
fn for_embedder(image: &ImageTensor, e: &dyn Embedder) -> (ImageTensor, f64) {
    let converted = image.to_range(e.input_range());
    let factor = e.input_range().max_value() / image.range().max_value();
    (converted, factor)
}

/// Trains the initialization regressor on pairs `(embed(generate(z)), z)`
/// with `z` drawn from the generator prior.
pub fn train_init_regressor(
    g: &dyn Generator,
    e: &dyn Embedder,
    n_samples: usize,
    cfg: &InitRegressorConfig,
    seed: u64,
) -> Result<InitRegressor> {
    if n_samples < MIN_INIT_SAMPLES {
        return Err(Error::Config(format!(
            "init regressor needs at least {MIN_INIT_SAMPLES} samples, got {n_samples}"
        )));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
    }
    if cfg.hidden.contains(&0) || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("invalid init regressor hyperparameters".into()));
    }
    let mut inputs = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let z = g.sample_latent(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
        let image = g.generate(&z).map_err(|err| dependency("generator", err))?;
        let (image, _) = for_embedder(&image, e);
        let d = e.embed(&image).map_err(|err| dependency("embedder", err))?;
        inputs.push(d.values);
        targets.push(z.values);
    }
    let n_val = ((n_samples as f64) * cfg.validation_fraction).round() as usize;
    let n_train = n_samples - n_val;
    let mut layers = Vec::new();
    let mut width = e.dim();
    for &h in &cfg.hidden {
        layers.push(LayerSpec::Dense { input: width, output: h });
        layers.push(LayerSpec::Relu);
        width = h;
    }
    layers.push(LayerSpec::Dense {
        input: width,
        output: g.latent_dim(),
    });
    let mut network = Network::new(e.dim(), layers, seed, true)?;
    let spec = TrainSpec {
        loss: Loss::Mse,
        optimizer: OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: cfg.learning_rate,
        },
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
    };
    let x = nn::stack_rows(&inputs[..n_train])?;
    let y = nn::stack_rows(&targets[..n_train])?;
    let training_log = nn::train(&mut network, &x, &y, &spec, seed ^ 0x1717)?;

    let (mut val_mse, mut prior_mse) = (0.0, 0.0);
    let count = (n_val * g.latent_dim()).max(1) as f64;
    for (d, z) in inputs[n_train..].iter().zip(&targets[n_train..]) {
        let pred = network.predict_one(d);
        val_mse += pred.iter().zip(z).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        prior_mse += z.iter().map(|t| t * t).sum::<f64>();
    }
    Ok(InitRegressor {
        network,
        training_log,
        report: InitReport {
            n_train,
            n_validation: n_val,
            validation_mse: val_mse / count,
            prior_mean_mse: prior_mse / count,
            seed,
        },
    })
}

impl InitRegressor {
    pub fn predict(&self, d: &Descriptor) -> Result<LatentCode> {
        if d.dim() != self.network.input_dim() {
            return Err(Error::Input(format!(
                "init regressor expects {}-dimensional descriptors, got {}",
                self.network.input_dim(),
                d.dim()
            )));
        }
        LatentCode::new(self.network.predict_one(&d.values))
    }

    pub fn latent_dim(&self) -> usize {
        self.network.output_dim()
    }

    /// Writes the weights, the held-out report and the training log.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.network.save(dir, INIT_STEM)?;
        let report = dir.join(INIT_REPORT);
        fs::write(&report, serde_json::to_string_pretty(&self.report)?).map_err(|e| Error::io(&report, e))?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in self.training_log.iter().enumerate() {
            writeln!(csv, "{},{l}", i + 1).expect("string write");
        }
        let log = dir.join(INIT_LOG);
        fs::write(&log, csv).map_err(|e| Error::io(&log, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let network = Network::load(dir, INIT_STEM)?;
        let report_path = dir.join(INIT_REPORT);
        let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let training_log = fs::read_to_string(dir.join(INIT_LOG))
            .map(|csv| {
                csv.lines()
                    .skip(1)
                    .filter_map(|l| l.split(',').nth(1)?.parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            network,
            training_log,
            report: serde_json::from_str(&text)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lr: f64,
    pub steps: usize,
    pub use_landmarks: bool,
    pub use_histogram: bool,
    /// Stop when the best total loss improves by less than
    /// `early_stop_tol` (relative) over `early_stop_window` steps.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub histogram: HistogramSpec,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.0006,
            w3: 0.01,
            lr: 0.001,
            steps: 500,
            use_landmarks: true,
            use_histogram: true,
            early_stop_window: 25,
            early_stop_tol: 1e-6,
            histogram: HistogramSpec::default(),
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative weight")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        self.histogram.validate()
    }

    /// The same configuration restricted to the terms of `losses`.
    pub fn with_losses(&self, losses: LossSet) -> Self {
        let (use_landmarks, use_histogram) = match losses {
            LossSet::Id => (false, false),
            LossSet::IdLandmarks => (true, false),
            LossSet::IdLandmarksHistogram => (true, true),
        };
        Self {
            use_landmarks,
            use_histogram,
            ..self.clone()
        }
    }
}

/// Loss configurations compared side by side in an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSet {
    Id,
    IdLandmarks,
    IdLandmarksHistogram,
}

impl LossSet {
    pub const ALL: [LossSet; 3] = [LossSet::Id, LossSet::IdLandmarks, LossSet::IdLandmarksHistogram];

    pub fn dir_name(self) -> &'static str {
        match self {
            LossSet::Id => "id",
            LossSet::IdLandmarks => "id_lm",
            LossSet::IdLandmarksHistogram => "id_lm_hist",
        }
    }
}

/// Everything an inversion needs besides the target descriptor.
#[derive(Clone, Copy)]
pub struct InversionModels<'a> {
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub init: &'a InitRegressor,
    pub landmarks_from_id: Option<&'a ProbeModel>,
    pub landmarks_from_image: Option<&'a ProbeModel>,
    pub histogram_from_id: Option<&'a ProbeModel>,
}

/// A loss value and its gradient w.r.t. the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_kind<'m>(model: Option<&'m ProbeModel>, kind: ProbeKind, what: &str) -> Result<&'m ProbeModel> {
    let m = model.ok_or_else(|| Error::Dependency(format!("{what} probe is not available")))?;
    if m.spec.kind != kind {
        return Err(Error::Config(format!(
            "{what} probe has kind {:?}, expected {kind:?}",
            m.spec.kind
        )));
    }
    Ok(m)
}

/// Squared Euclidean distance and its gradient w.r.t. `a`.
fn sq_dist(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let value = diff.iter().map(|d| d * d).sum();
    (value, diff.into_iter().map(|d| 2.0 * d).collect())
}

/// The objective for one target descriptor, with the descriptor-side
/// targets computed once.
pub struct Objective<'a> {
    models: InversionModels<'a>,
    descriptor: Descriptor,
    landmark_target: Option<LandmarkSet>,
    histogram_target: Option<Histogram>,
    histogram_spec: HistogramSpec,
}

/// Per-term values at one latent code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_id: f64,
    pub l_lm: f64,
    pub l_hist: f64,
    pub total: f64,
}

impl<'a> Objective<'a> {
    pub fn new(
        models: InversionModels<'a>,
        descriptor: &Descriptor,
        use_landmarks: bool,
        use_histogram: bool,
        histogram_spec: HistogramSpec,
    ) -> Result<Self> {
        if descriptor.dim() != models.embedder.dim() {
            return Err(Error::Input(format!(
                "target descriptor has dimension {}, embedder produces {}",
                descriptor.dim(),
                models.embedder.dim()
            )));
        }
        let landmark_target = if use_landmarks {
            let from_id = check_kind(models.landmarks_from_id, ProbeKind::LandmarksFromId, "landmarks-from-ID")?;
            check_kind(models.landmarks_from_image, ProbeKind::LandmarksFromImage, "landmarks-from-image")?;
            match probes::predict(from_id, descriptor)? {
                Prediction::Landmarks(l) => Some(l),
                _ => unreachable!("landmark probe"),
            }
        } else {
            None
        };
        let histogram_target = if use_histogram {
            let probe = check_kind(models.histogram_from_id, ProbeKind::HistogramFromId, "histogram")?;
            if probe.spec.histogram != histogram_spec {
                return Err(Error::Config(
                    "histogram probe and inversion use different bin specifications".into(),
                ));
            }
            match probes::predict(probe, descriptor)? {
                Prediction::Histogram(h) => Some(h),
                _ => unreachable!("histogram probe"),
            }
        } else {
            None
        };
        Ok(Self {
            models,
            descriptor: descriptor.clone(),
            landmark_target,
            histogram_target,
            histogram_spec,
        })
    }

    pub fn landmark_target(&self) -> Option<&LandmarkSet> {
        self.landmark_target.as_ref()
    }

    pub fn histogram_target(&self) -> Option<&Histogram> {
        self.histogram_target.as_ref()
    }

    /// Loss terms at `z` and the gradient of `w1·L_ID + w2·L_lm + w3·L_hist`.
    /// Disabled terms are reported as zero.
    pub fn evaluate(&self, z: &LatentCode, w: [f64; 3]) -> Result<(LossTerms, Vec<f64>)> {
        let g = self.models.generator;
        if z.dim() != g.latent_dim() {
            return Err(Error::Input(format!(
                "latent code has dimension {}, generator expects {}",
                z.dim(),
                g.latent_dim()
            )));
        }
        let image = g.generate(z)?;
        let mut cot = vec![0.0; image.pixels().len()];

        let (e_image, factor) = for_embedder(&image, self.models.embedder);
        let current = self.models.embedder.embed(&e_image)?;
        let (l_id, d_cot) = sq_dist(&current.values, &self.descriptor.values);
        let scaled: Vec<f64> = d_cot.iter().map(|c| w[0] * c).collect();
        let (_, pix) = self.models.embedder.embed_vjp(&e_image, &scaled)?;
        for (c, p) in cot.iter_mut().zip(pix) {
            *c += factor * p;
        }

        let mut l_lm = 0.0;
        if let Some(target) = &self.landmark_target {
            let cnn = self.models.landmarks_from_image.expect("checked at construction");
            let current = probes::predict_landmarks_from_image(cnn, &image)?;
            let (value, lm_cot) = sq_dist(&current.to_flat(), &target.to_flat());
            l_lm = value;
            let scaled: Vec<f64> = lm_cot.iter().map(|c| w[1] * c).collect();
            let (_, pix) = probes::predict_landmarks_from_image_vjp(cnn, &image, &scaled)?;
            for (c, p) in cot.iter_mut().zip(pix) {
                *c += p;
            }
        }

        let mut l_hist = 0.0;
        if let Some(target) = &self.histogram_target {
            let current = soft_image_histogram(&image, &self.histogram_spec)?;
            let (value, h_cot) = sq_dist(&current.to_flat(), &target.to_flat());
            l_hist = value;
            let scaled: Vec<f64> = h_cot.iter().map(|c| w[2] * c).collect();
            let pix = soft_image_histogram_vjp(&image, &self.histogram_spec, &scaled)?;
            for (c, p) in cot.iter_mut().zip(pix) {
                *c += p;
            }
        }

        let grad = g.generate_vjp(z, &cot)?;
        let terms = LossTerms {
            l_id,
            l_lm,
            l_hist,
            total: w[0] * l_id + w[1] * l_lm + w[2] * l_hist,
        };
        Ok((terms, grad))
    }
}

fn single_term(
    models: InversionModels<'_>,
    z: &LatentCode,
    d: &Descriptor,
    which: usize,
) -> Result<LossValue> {
    let obj = Objective::new(models, d, which == 1, which == 2, HistogramSpec::default())?;
    let mut w = [0.0; 3];
    w[which] = 1.0;
    let (terms, grad) = obj.evaluate(z, w)?;
    let value = [terms.l_id, terms.l_lm, terms.l_hist][which];
    Ok(LossValue { value, grad })
}

/// `‖E(G(z)) − d‖²` and its gradient.
pub fn id_loss(models: InversionModels<'_>, z: &LatentCode, d: &Descriptor) -> Result<LossValue> {
    single_term(models, z, d, 0)
}

/// `‖CNN(G(z)) − f_lm(d)‖²` (pixel units) and its gradient.
pub fn landmark_loss(models: InversionModels<'_>, z: &LatentCode, d: &Descriptor) -> Result<LossValue> {
    single_term(models, z, d, 1)
}

/// `‖H(G(z)) − f_hist(d)‖²` over the 3·N bins and its gradient, using the
/// default bin specification.
pub fn histogram_loss(models: InversionModels<'_>, z: &LatentCode, d: &Descriptor) -> Result<LossValue> {
    single_term(models, z, d, 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub latent: LatentCode,
    pub initial_latent: LatentCode,
    pub image: ImageTensor,
    /// One row per evaluated iterate, starting with the initialization.
    pub trajectory: Vec<TrajectoryRow>,
    pub best_step: usize,
    pub wall_clock: Duration,
    pub config: InversionConfig,
}

#[derive(Serialize, Deserialize)]
struct LatentFile {
    values: Vec<f64>,
    initial: Vec<f64>,
    best_step: usize,
}

impl InversionResult {
    pub fn initial(&self) -> &LossTerms {
        &self.trajectory[0].terms
    }

    pub fn best(&self) -> &LossTerms {
        &self.trajectory[self.best_step].terms
    }

    pub fn trajectory_csv(&self) -> String {
        let mut csv = String::from("step,l_id,l_lm,l_hist,total\n");
        for r in &self.trajectory {
            let t = r.terms;
            writeln!(csv, "{},{},{},{},{}", r.step, t.l_id, t.l_lm, t.l_hist, t.total).expect("string write");
        }
        csv
    }

    /// Writes `result.png`, `trajectory.csv`, `config.json` and `latent.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.image.save_png(&dir.join("result.png"))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("trajectory.csv", self.trajectory_csv())?;
        write("config.json", serde_json::to_string_pretty(&self.config)?)?;
        let latent = LatentFile {
            values: self.latent.values.clone(),
            initial: self.initial_latent.values.clone(),
            best_step: self.best_step,
        };
        write("latent.json", serde_json::to_string_pretty(&latent)?)
    }
}

/// Reconstructs an image whose descriptor approximates `d`.
pub fn invert(models: InversionModels<'_>, d: &Descriptor, cfg: &InversionConfig) -> Result<InversionResult> {
    cfg.validate()?;
    let start = Instant::now();
    if models.init.latent_dim() != models.generator.latent_dim() {
        return Err(Error::Config(format!(
            "init regressor produces {} latents, generator takes {}",
            models.init.latent_dim(),
            models.generator.latent_dim()
        )));
    }
    let objective = Objective::new(models, d, cfg.use_landmarks, cfg.use_histogram, cfg.histogram)?;
    let w = [cfg.w1, cfg.w2, cfg.w3];
    let z0 = models.init.predict(d)?;
    let mut z = z0.values.clone();
    let mut opt = Optimizer::new(
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: cfg.lr,
        },
        [z.len()],
    );
    let mut trajectory: Vec<TrajectoryRow> = Vec::with_capacity(cfg.steps + 1);
    let mut best_history: Vec<f64> = Vec::with_capacity(cfg.steps + 1);
    let mut best = (0usize, z.clone());
    let mut last_finite = Vec::new();
    for step in 0..=cfg.steps {
        let finite_z = z.iter().all(|v| v.is_finite());
        let evaluated = if finite_z {
            Some(objective.evaluate(&LatentCode { values: z.clone() }, w)?)
        } else {
            None
        };
        let Some((terms, grad)) =
            evaluated.filter(|(t, g)| t.total.is_finite() && g.iter().all(|v| v.is_finite()))
        else {
            let last = trajectory.last();
            return Err(Error::Divergence {
                step,
                msg: "objective or gradient became non-finite".into(),
                last_total: last.map_or(f64::NAN, |r| r.terms.total),
                last_latent: last_finite,
            });
        };
        last_finite.clone_from(&z);
        trajectory.push(TrajectoryRow { step, terms });
        let best_total = trajectory[best.0].terms.total;
        if step == 0 || terms.total < best_total {
            best = (step, z.clone());
        }
        let best_total = trajectory[best.0].terms.total;
        best_history.push(best_total);
        if step == cfg.steps {
            break;
        }
        if cfg.early_stop_window > 0 && step >= cfg.early_stop_window {
            let earlier = best_history[step - cfg.early_stop_window];
            let gain = earlier - best_total;
            if gain <= cfg.early_stop_tol * earlier.abs() {
                break;
            }
        }
        let mut params = [std::mem::take(&mut z)];
        opt.step(params.iter_mut(), &[grad]);
        let [next] = params;
        z = next;
    }
    let latent = LatentCode::new(best.1)?;
    let image = models.generator.generate(&latent)?;
    Ok(InversionResult {
        latent,
        initial_latent: z0,
        image,
        trajectory,
        best_step: best.0,
        wall_clock: start.elapsed(),
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::adapters::{init_toy_embedder, NetworkEmbedder, ToyEmbedderConfig, ToyGenerator};
    use crate::data_ingest::toy_prior_probe_data;
    use crate::probes::{train_probe, ProbeSpec};
    use crate::toy_face::{landmarks_of, BACKGROUND};

    struct Stack {
        embedder: NetworkEmbedder,
        init: InitRegressor,
        lm_id: ProbeModel,
        cnn: ProbeModel,
        hist: ProbeModel,
    }

    fn tiny_stack() -> Stack {
        let cfg = ToyEmbedderConfig {
            descriptor_dim: 16,
            hidden: 32,
            pool: 16,
            ..Default::default()
        };
        let embedder = init_toy_embedder(&cfg, 3).unwrap();
        let hs = HistogramSpec::default();
        let data = toy_prior_probe_data(&embedder, 24, 24, 16, &hs, 1).unwrap();
        let adam = OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-2,
        };
        let lm_spec = ProbeSpec {
            hidden: vec![16],
            optimizer: adam,
            epochs: 3,
            landmark_center: 112.0,
            landmark_scale: 112.0,
            ..ProbeSpec::default_for(ProbeKind::LandmarksFromId)
        };
        let cnn_spec = ProbeSpec {
            conv_channels: vec![4, 8],
            hidden: vec![16],
            input_pool: 16,
            epochs: 3,
            ..ProbeSpec::default_for(ProbeKind::LandmarksFromImage)
        };
        let hist_spec = ProbeSpec {
            optimizer: adam,
            epochs: 3,
            ..ProbeSpec::default_for(ProbeKind::HistogramFromId)
        };
        let net = Network::new(
            16,
            vec![
                LayerSpec::Dense { input: 16, output: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 8, output: 12 },
            ],
            5,
            false,
        )
        .unwrap();
        Stack {
            lm_id: train_probe(&lm_spec, &data.landmarks_from_id, 1).unwrap(),
            cnn: train_probe(&cnn_spec, &data.landmarks_from_image, 1).unwrap(),
            hist: train_probe(&hist_spec, &data.histogram_from_id, 1).unwrap(),
            embedder,
            init: InitRegressor {
                network: net,
                training_log: Vec::new(),
                report: InitReport {
                    n_train: 0,
                    n_validation: 0,
                    validation_mse: 0.0,
                    prior_mean_mse: 0.0,
                    seed: 5,
                },
            },
        }
    }

    fn models<'a>(s: &'a Stack, g: &'a dyn Generator) -> InversionModels<'a> {
        InversionModels {
            generator: g,
            embedder: &s.embedder,
            init: &s.init,
            landmarks_from_id: Some(&s.lm_id),
            landmarks_from_image: Some(&s.cnn),
            histogram_from_id: Some(&s.hist),
        }
    }

    fn target(s: &Stack, seed: u64) -> (LatentCode, Descriptor) {
        let z = ToyGenerator.sample_latent(seed);
        let d = s.embedder.embed(&ToyGenerator.generate(&z).unwrap()).unwrap();
        (z, d)
    }

    #[test]
    fn id_loss_vanishes_at_the_source_latent_and_matches_oracle() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (z, d) = target(&s, 11);
        assert_eq!(id_loss(m, &z, &d).unwrap().value, 0.0);
        let (z2, _) = target(&s, 12);
        let e = s.embedder.embed(&ToyGenerator.generate(&z2).unwrap()).unwrap();
        let mut oracle = 0.0;
        for i in 0..d.dim() {
            oracle += (e.values[i] - d.values[i]) * (e.values[i] - d.values[i]);
        }
        let v = id_loss(m, &z2, &d).unwrap().value;
        assert!((v - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (_, d) = target(&s, 21);
        let (z, _) = target(&s, 22);
        type Term = fn(InversionModels<'_>, &LatentCode, &Descriptor) -> Result<LossValue>;
        for (name, f) in [("id", id_loss as Term), ("lm", landmark_loss), ("hist", histogram_loss)] {
            let analytic = f(m, &z, &d).unwrap().grad;
            let h = 1e-5;
            let mut num = vec![0.0; z.dim()];
            for (i, n) in num.iter_mut().enumerate() {
                let mut p = z.clone();
                p.values[i] += h;
                let mut q = z.clone();
                q.values[i] -= h;
                *n = (f(m, &p, &d).unwrap().value - f(m, &q, &d).unwrap().value) / (2.0 * h);
            }
            let err: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(err <= 1e-4 * scale.max(1e-12), "{name}: {err} vs {scale}");
        }
    }

    #[test]
    fn histogram_loss_sees_background_but_landmarks_do_not() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (z, d) = target(&s, 31);
        let mut z2 = z.clone();
        z2.values[BACKGROUND[0]] += 2.0;
        let a = histogram_loss(m, &z, &d).unwrap().value;
        let b = histogram_loss(m, &z2, &d).unwrap().value;
        assert!((a - b).abs() > 1e-6);
        let p1 = ToyGenerator.params(&z).unwrap();
        let p2 = ToyGenerator.params(&z2).unwrap();
        assert_eq!(landmarks_of(&p1).unwrap(), landmarks_of(&p2).unwrap());
    }

    #[test]
    fn invert_keeps_the_best_iterate_and_logs_every_step() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (_, d) = target(&s, 41);
        let cfg = InversionConfig {
            steps: 12,
            lr: 0.05,
            ..Default::default()
        };
        let r = invert(m, &d, &cfg).unwrap();
        assert_eq!(r.trajectory.len(), 13);
        assert!(r.best().total <= r.initial().total);
        for (i, row) in r.trajectory.iter().enumerate() {
            assert_eq!(row.step, i);
            let t = row.terms;
            let sum = cfg.w1 * t.l_id + cfg.w2 * t.l_lm + cfg.w3 * t.l_hist;
            assert!((t.total - sum).abs() <= 1e-9 * sum.abs().max(1e-300));
        }
        let min = r.trajectory.iter().map(|t| t.terms.total).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best().total, min);
        assert_eq!(r.initial_latent, s.init.predict(&d).unwrap());
        let again = invert(m, &d, &cfg).unwrap();
        assert_eq!(again.trajectory, r.trajectory);
        assert_eq!(again.latent, r.latent);
    }

    #[test]
    fn zero_weights_match_disabled_terms() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (_, d) = target(&s, 51);
        let weighted = InversionConfig {
            steps: 8,
            lr: 0.05,
            w2: 0.0,
            w3: 0.0,
            ..Default::default()
        };
        let a = invert(m, &d, &weighted).unwrap();
        let b = invert(m, &d, &weighted.with_losses(LossSet::Id)).unwrap();
        assert_eq!(a.latent, b.latent);
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(x.terms.l_id, y.terms.l_id);
            assert_eq!(x.terms.total, y.terms.total);
        }
        assert_eq!(b.trajectory[0].terms.l_lm, 0.0);
    }

    #[test]
    fn early_stop_after_a_flat_window() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (_, d) = target(&s, 61);
        let cfg = InversionConfig {
            lr: 1e-14,
            steps: 100,
            ..Default::default()
        };
        let r = invert(m, &d, &cfg).unwrap();
        assert_eq!(r.trajectory.len(), cfg.early_stop_window + 1);
    }

    #[test]
    fn missing_probes_and_bad_configs_are_reported() {
        let s = tiny_stack();
        let mut m = models(&s, &ToyGenerator);
        let (_, d) = target(&s, 71);
        m.histogram_from_id = None;
        let cfg = InversionConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(invert(m, &d, &cfg), Err(Error::Dependency(_))));
        assert!(invert(m, &d, &cfg.with_losses(LossSet::IdLandmarks)).is_ok());
        let bad = InversionConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(invert(m, &d, &bad), Err(Error::Config(_))));
        let bad = InversionConfig {
            w2: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let short = Descriptor::new(vec![1.0; 3], "t").unwrap();
        assert!(matches!(invert(m, &short, &cfg), Err(Error::Input(_))));
        assert!(matches!(
            train_init_regressor(&ToyGenerator, &s.embedder, 0, &InitRegressorConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    /// Toy generator whose gradient turns non-finite after a few calls.
    struct Exploding {
        calls: AtomicUsize,
        after: usize,
    }

    impl Generator for Exploding {
        fn name(&self) -> &str {
            "exploding"
        }

        fn latent_dim(&self) -> usize {
            ToyGenerator.latent_dim()
        }

        fn generate(&self, z: &LatentCode) -> Result<ImageTensor> {
            ToyGenerator.generate(z)
        }

        fn generate_vjp(&self, z: &LatentCode, cotangent: &[f64]) -> Result<Vec<f64>> {
            let mut g = ToyGenerator.generate_vjp(z, cotangent)?;
            if self.calls.fetch_add(1, Ordering::SeqCst) >= self.after {
                g[0] = f64::NAN;
            }
            Ok(g)
        }
    }

    #[test]
    fn divergence_reports_the_last_finite_state() {
        let s = tiny_stack();
        let g = Exploding {
            calls: AtomicUsize::new(0),
            after: 3,
        };
        let m = models(&s, &g);
        let (_, d) = target(&s, 81);
        let cfg = InversionConfig {
            steps: 10,
            ..Default::default()
        };
        match invert(m, &d, &cfg) {
            Err(Error::Divergence {
                step,
                last_total,
                last_latent,
                ..
            }) => {
                assert_eq!(step, 3);
                assert!(last_total.is_finite());
                assert_eq!(last_latent.len(), 12);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.best_step)),
        }
    }

    #[test]
    fn result_artifacts_are_written() {
        let s = tiny_stack();
        let m = models(&s, &ToyGenerator);
        let (_, d) = target(&s, 91);
        let cfg = InversionConfig {
            steps: 3,
            ..Default::default()
        };
        let r = invert(m, &d, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        for f in ["result.png", "trajectory.csv", "config.json", "latent.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("step,l_id,l_lm,l_hist,total"));
        assert_eq!(csv.lines().count(), r.trajectory.len() + 1);
        let echoed: InversionConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(echoed, cfg);
    }
}
