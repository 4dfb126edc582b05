//! `train-init` and `invert`.

use std::path::{Path, PathBuf};

use idleak::adapters::{Embedder, Generator, ToyGenerator};
use idleak::inversion::{invert, train_init_regressor, InversionConfig, InversionModels, LossSet};
use idleak::probes::ProbeKind;
use idleak::tensor::{Descriptor, ImageTensor, LandmarkSet, CROP_SIZE};
use idleak::toy_face::landmarks_of;
use idleak::{Error, Result};
use rayon::prelude::*;

use crate::workspace::{progress, write_file, Workspace};

pub const TARGET_DESCRIPTOR: &str = "target_descriptor.json";
pub const TARGET_IMAGE: &str = "target.png";
pub const TARGET_LANDMARKS: &str = "target_landmarks.json";
const TOY_TARGET_SEED: u64 = 900_000;

pub fn train_init(ws: &Workspace) -> Result<()> {
    let g = ws.generator()?;
    let e = ws.embedder()?;
    let init = &ws.config.init;
    progress(format!("training init regressor on {} prior samples", init.n_samples));
    let model = train_init_regressor(g.as_ref(), &e, init.n_samples, &init.regressor, ws.seed())?;
    let dir = ws.init_dir();
    ws.prepare_output(&dir)?;
    model.save(&dir)?;
    let r = &model.report;
    println!(
        "init regressor | held-out latent mse {:.4} | prior-mean mse {:.4} | n_train={} n_validation={}",
        r.validation_mse, r.prior_mean_mse, r.n_train, r.n_validation
    );
    Ok(())
}

/// What to invert.
pub enum TargetSource {
    Descriptor(PathBuf),
    Image(PathBuf),
    /// Renders from the generator prior.
    Toy,
}

struct Target {
    name: String,
    descriptor: Descriptor,
    image: Option<ImageTensor>,
    landmarks: Option<LandmarkSet>,
}

/// Directory name of a loss configuration.
pub fn loss_label(cfg: &InversionConfig) -> &'static str {
    match (cfg.use_landmarks, cfg.use_histogram) {
        (false, false) => LossSet::Id.dir_name(),
        (true, false) => LossSet::IdLandmarks.dir_name(),
        (true, true) => LossSet::IdLandmarksHistogram.dir_name(),
        (false, true) => "id_hist",
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "target".into())
}

fn targets(ws: &Workspace, source: &TargetSource, g: &dyn Generator, e: &dyn Embedder) -> Result<Vec<Target>> {
    match source {
        TargetSource::Descriptor(path) => {
            if !path.exists() {
                return Err(Error::Dependency(format!("descriptor file not found: {}", path.display())));
            }
            let descriptor = Descriptor::load(path)?;
            Ok(vec![Target {
                name: file_stem(path),
                descriptor,
                image: None,
                landmarks: None,
            }])
        }
        TargetSource::Image(path) => {
            if !path.exists() {
                return Err(Error::Dependency(format!("image not found: {}", path.display())));
            }
            let mut image = ImageTensor::load(path)?;
            if image.height() != CROP_SIZE || image.width() != CROP_SIZE {
                image = image.center_crop_resize(CROP_SIZE);
            }
            // only the descriptor reaches the optimizer
            let descriptor = e.embed(&image.to_range(e.input_range()))?;
            Ok(vec![Target {
                name: file_stem(path),
                descriptor,
                image: Some(image),
                landmarks: None,
            }])
        }
        TargetSource::Toy => (0..ws.config.inversion.toy_targets as u64)
            .into_par_iter()
            .map(|k| {
                let z = g.sample_latent(ws.seed().wrapping_mul(0x9e37_79b9).wrapping_add(TOY_TARGET_SEED + k));
                let image = g.generate(&z)?;
                let landmarks = if g.name() == "toy" {
                    Some(landmarks_of(&ToyGenerator.params(&z)?)?)
                } else {
                    None
                };
                Ok(Target {
                    name: format!("toy_{k:03}"),
                    descriptor: e.embed(&image.to_range(e.input_range()))?,
                    image: Some(image),
                    landmarks,
                })
            })
            .collect(),
    }
}

pub fn run(ws: &Workspace, source: &TargetSource, ablation: bool) -> Result<()> {
    let g = ws.generator()?;
    let e = ws.embedder()?;
    let base = InversionConfig {
        seed: ws.seed(),
        ..ws.config.inversion.settings.clone()
    };
    let configs: Vec<InversionConfig> = if ablation {
        LossSet::ALL.iter().map(|&l| base.with_losses(l)).collect()
    } else {
        vec![base]
    };
    let need_lm = configs.iter().any(|c| c.use_landmarks);
    let need_hist = configs.iter().any(|c| c.use_histogram);
    let init = ws.init_regressor()?;
    let lm_id = need_lm.then(|| ws.probe(ProbeKind::LandmarksFromId)).transpose()?;
    let lm_img = need_lm.then(|| ws.probe(ProbeKind::LandmarksFromImage)).transpose()?;
    let hist = need_hist.then(|| ws.probe(ProbeKind::HistogramFromId)).transpose()?;
    let models = InversionModels {
        generator: g.as_ref(),
        embedder: &e,
        init: &init,
        landmarks_from_id: lm_id.as_ref(),
        landmarks_from_image: lm_img.as_ref(),
        histogram_from_id: hist.as_ref(),
    };

    let targets = targets(ws, source, g.as_ref(), &e)?;
    let root = ws.inversions_dir();
    for t in &targets {
        let dir = root.join(&t.name);
        ws.prepare_output(&dir)?;
        write_file(&dir.join(TARGET_DESCRIPTOR), serde_json::to_string_pretty(&t.descriptor)?)?;
        if let Some(img) = &t.image {
            img.save_png(&dir.join(TARGET_IMAGE))?;
        }
        if let Some(lm) = &t.landmarks {
            write_file(&dir.join(TARGET_LANDMARKS), serde_json::to_string_pretty(&lm.to_flat())?)?;
        }
    }
    let jobs: Vec<(&Target, &InversionConfig)> =
        targets.iter().flat_map(|t| configs.iter().map(move |c| (t, c))).collect();
    progress(format!("running {} inversions", jobs.len()));
    jobs.par_iter()
        .map(|(t, cfg)| {
            let result = invert(models, &t.descriptor, cfg)?;
            let dir = root.join(&t.name).join(loss_label(cfg));
            ws.prepare_output(&dir)?;
            result.save(&dir)?;
            progress(format!(
                "{}/{}: total {:.5} -> {:.5} in {} steps",
                t.name,
                loss_label(cfg),
                result.initial().total,
                result.best().total,
                result.trajectory.len() - 1
            ));
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}
