//! `train-probe` and `eval-probe`.

use std::path::Path;

use idleak::adapters::Embedder;
use idleak::data_ingest::{landmark_records, toy_prior_probe_data, DatasetManifest, Split};
use idleak::probes::{evaluate_probe, train_probe, ProbeData, ProbeKind, ProbeMetrics};
use idleak::soft_histogram::soft_image_histogram;
use idleak::tensor::LandmarkSet;
use idleak::{Error, Result};
use rayon::prelude::*;

use crate::config::{kind_name, ProbeSource};
use crate::workspace::{progress, Workspace};

const PRIOR_TEST_SEED: u64 = 0x7e57_da7a;

pub fn train(ws: &Workspace, kind: ProbeKind) -> Result<()> {
    let spec = ws.config.probes.spec(kind, &ws.config.histogram);
    let embedder = ws.embedder()?;
    let data = probe_data(ws, &embedder, kind, Split::Train, spec.input_pool)?;
    progress(format!("training {} probe on {} samples", kind_name(kind), data.len()));
    let model = train_probe(&spec, &data, ws.seed())?;
    let dir = ws.probe_dir(kind);
    ws.prepare_output(&dir)?;
    model.save(&dir)?;
    progress(format!("saved {}", dir.display()));
    Ok(())
}

pub fn eval(ws: &Workspace, kind: ProbeKind) -> Result<ProbeMetrics> {
    let model = ws.probe(kind)?;
    let embedder = ws.embedder()?;
    let data = probe_data(ws, &embedder, kind, Split::Test, model.spec.input_pool)?;
    let metrics = evaluate_probe(&model, &data)?;
    let dir = ws.probe_dir(kind);
    metrics.save(&dir.join("metrics.json"))?;
    println!("{}", table_row(ws, &metrics));
    Ok(metrics)
}

/// One attribute-prediction table row: method, measure, probe value, baseline.
pub fn table_row(ws: &Workspace, m: &ProbeMetrics) -> String {
    let (what, unit) = match m.kind {
        ProbeKind::Binary => (format!("{} accuracy", ws.config.probes.attribute), "%"),
        ProbeKind::LandmarksFromId => ("landmark error".to_owned(), "% iod"),
        ProbeKind::LandmarksFromImage => ("landmark error (image CNN)".to_owned(), "% iod"),
        ProbeKind::HistogramFromId => ("histogram EMD".to_owned(), " bins"),
    };
    format!(
        "{} | {what} | probe {:.2}{unit} | baseline {:.2}{unit} | n={}",
        kind_name(m.kind),
        m.value(),
        m.baseline,
        m.n_test
    )
}

fn probe_data(
    ws: &Workspace,
    embedder: &dyn Embedder,
    kind: ProbeKind,
    split: Split,
    input_pool: usize,
) -> Result<ProbeData> {
    if kind != ProbeKind::Binary && ws.config.probes.source == ProbeSource::GeneratorPrior {
        return prior_data(ws, embedder, kind, split, input_pool);
    }
    let (manifest, data_dir) = ws.manifest()?;
    let rows = match kind {
        ProbeKind::Binary | ProbeKind::HistogramFromId => manifest.indices(split),
        ProbeKind::LandmarksFromId | ProbeKind::LandmarksFromImage => landmark_records(&manifest, split),
    };
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "manifest has no usable {split:?} records for the {} probe (set dataset.toy.test_count or split the manifest)",
            kind_name(kind)
        )));
    }
    match kind {
        ProbeKind::Binary => {
            let attribute = &ws.config.probes.attribute;
            let labels = rows
                .iter()
                .map(|&i| {
                    manifest.records[i].attributes.get(attribute).copied().ok_or_else(|| {
                        Error::Input(format!("record {} lacks attribute {attribute}", manifest.records[i].image))
                    })
                })
                .collect::<Result<Vec<bool>>>()?;
            let d = ws.embed_records(embedder, &manifest, &data_dir, &rows)?;
            ProbeData::binary(&d, &labels)
        }
        ProbeKind::LandmarksFromId => {
            let d = ws.embed_records(embedder, &manifest, &data_dir, &rows)?;
            ProbeData::landmarks(&d, &record_landmarks(&manifest, &rows)?)
        }
        ProbeKind::HistogramFromId => {
            let d = ws.embed_records(embedder, &manifest, &data_dir, &rows)?;
            let spec = ws.config.histogram;
            let h = rows
                .par_iter()
                .map(|&i| soft_image_histogram(&manifest.load_image(&data_dir, i)?, &spec))
                .collect::<Result<Vec<_>>>()?;
            ProbeData::histograms(&d, &h)
        }
        ProbeKind::LandmarksFromImage => {
            let lms = record_landmarks(&manifest, &rows)?;
            let dir: &Path = &data_dir;
            let manifest = &manifest;
            ProbeData::images(
                input_pool,
                rows.iter()
                    .zip(lms)
                    .map(|(&i, lm)| Ok((manifest.load_image(dir, i)?, lm))),
            )
        }
    }
}

fn record_landmarks(manifest: &DatasetManifest, rows: &[usize]) -> Result<Vec<LandmarkSet>> {
    rows.iter()
        .map(|&i| LandmarkSet::from_flat(manifest.records[i].landmarks.as_deref().expect("filtered")))
        .collect()
}

fn prior_data(
    ws: &Workspace,
    embedder: &dyn Embedder,
    kind: ProbeKind,
    split: Split,
    input_pool: usize,
) -> Result<ProbeData> {
    if ws.config.adapters.generator.name != "toy" {
        return Err(Error::Config("generator-prior probe data needs the toy generator".into()));
    }
    let prior = &ws.config.probes.prior;
    let (n, seed) = match split {
        Split::Test => (prior.n_test, ws.seed() ^ PRIOR_TEST_SEED),
        _ => (prior.n_train, ws.seed()),
    };
    let n_images = if kind == ProbeKind::LandmarksFromImage {
        prior.n_images.min(n)
    } else {
        1
    };
    let data = toy_prior_probe_data(embedder, n, n_images, input_pool, &ws.config.histogram, seed)?;
    Ok(match kind {
        ProbeKind::LandmarksFromId => data.landmarks_from_id,
        ProbeKind::HistogramFromId => data.histogram_from_id,
        ProbeKind::LandmarksFromImage => data.landmarks_from_image,
        ProbeKind::Binary => unreachable!("binary probes read the manifest"),
    })
}
