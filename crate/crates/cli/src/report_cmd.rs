//! `report`: reconstruction-quality table, similarity distribution and the
//! probe table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use idleak::adapters::{Embedder, ToyGenerator};
use idleak::metrics::{cosine_similarity, image_metrics, landmark_error, summarize_scores, Psnr};
use idleak::probes::ProbeMetrics;
use idleak::soft_histogram::{emd, hard_image_histogram};
use idleak::tensor::{Descriptor, ImageTensor, LandmarkSet, LatentCode};
use idleak::toy_face::landmarks_of;
use idleak::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{kind_name, KINDS};
use crate::invert_cmd::{TARGET_DESCRIPTOR, TARGET_IMAGE, TARGET_LANDMARKS};
use crate::workspace::{io_error, progress, write_file, Workspace};

/// Loss configurations in column order.
const LABELS: [&str; 4] = ["id", "id_lm", "id_hist", "id_lm_hist"];

#[derive(Default)]
struct Column {
    mse: Vec<f64>,
    psnr: Vec<Psnr>,
    ssim: Vec<f64>,
    landmark_err: Vec<f64>,
    emd: Vec<f64>,
}

struct RunMeasure {
    label: &'static str,
    mse: Option<(f64, Psnr, f64)>,
    landmark_err: Option<f64>,
    emd: Option<f64>,
    descriptor: Descriptor,
}

#[derive(Serialize)]
struct SimilaritySummary {
    n: usize,
    mean: f64,
    median: f64,
    std: f64,
    /// Mean cosine of reconstructions against other targets' descriptors.
    shuffled_null_mean: f64,
    shuffled_null_std: f64,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn read_latent(path: &Path) -> Result<LatentCode> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let values = v["values"]
        .as_array()
        .ok_or_else(|| Error::Input(format!("{} has no latent values", path.display())))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::Input("latent value is not a number".into())))
        .collect::<Result<Vec<_>>>()?;
    LatentCode::new(values)
}

fn measure_target(ws: &Workspace, dir: &Path, e: &dyn Embedder) -> Result<(String, Descriptor, Vec<RunMeasure>)> {
    let name = dir.file_name().expect("subdir").to_string_lossy().into_owned();
    let target = Descriptor::load(&dir.join(TARGET_DESCRIPTOR))?;
    let image = dir
        .join(TARGET_IMAGE)
        .exists()
        .then(|| ImageTensor::load(&dir.join(TARGET_IMAGE)))
        .transpose()?;
    let landmarks = if dir.join(TARGET_LANDMARKS).exists() && ws.config.adapters.generator.name == "toy" {
        let text = fs::read_to_string(dir.join(TARGET_LANDMARKS)).map_err(|e| io_error(dir, e))?;
        Some(LandmarkSet::from_flat(&serde_json::from_str::<Vec<f64>>(&text)?)?)
    } else {
        None
    };
    let hist = ws.config.histogram;
    let mut runs = Vec::new();
    for label in LABELS {
        let run = dir.join(label);
        if !run.join("result.png").exists() {
            continue;
        }
        let recon = ImageTensor::load(&run.join("result.png"))?;
        let descriptor = e.embed(&recon.to_range(e.input_range()))?;
        let (mse, emd_value) = match &image {
            Some(img) => {
                let m = image_metrics(&recon, img)?;
                let d = emd(&hard_image_histogram(&recon, &hist)?, &hard_image_histogram(img, &hist)?)?;
                (Some((m.mse, m.psnr, m.ssim)), Some(d))
            }
            None => (None, None),
        };
        let landmark_err = match &landmarks {
            Some(gt) => {
                let z = read_latent(&run.join("latent.json"))?;
                Some(landmark_error(&landmarks_of(&ToyGenerator.params(&z)?)?, gt)?)
            }
            None => None,
        };
        runs.push(RunMeasure {
            label,
            mse,
            landmark_err,
            emd: emd_value,
            descriptor,
        });
    }
    Ok((name, target, runs))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_psnr(v: &[Psnr]) -> String {
    if v.contains(&Psnr::Infinite) {
        return "inf".into();
    }
    let finite: Vec<f64> = v
        .iter()
        .map(|p| match p {
            Psnr::Finite(x) => *x,
            Psnr::Infinite => unreachable!("checked above"),
        })
        .collect();
    format!("{:.6}", mean(&finite))
}

pub fn run(ws: &Workspace) -> Result<()> {
    let root = ws.inversions_dir();
    if !root.exists() {
        return Err(Error::Dependency(format!(
            "no inversion results in {} (run invert)",
            root.display()
        )));
    }
    let e = ws.embedder()?;
    let measured = sorted_subdirs(&root)?
        .par_iter()
        .map(|dir| measure_target(ws, dir, &e))
        .collect::<Result<Vec<_>>>()?;
    let measured: Vec<_> = measured.into_iter().filter(|(_, _, runs)| !runs.is_empty()).collect();
    if measured.is_empty() {
        return Err(Error::Dependency(format!(
            "no inversion results in {} (run invert)",
            root.display()
        )));
    }
    let out = ws.report_dir();
    ws.prepare_output(&out)?;

    let mut columns: BTreeMap<usize, Column> = BTreeMap::new();
    for (_, _, runs) in &measured {
        for r in runs {
            let col = columns
                .entry(LABELS.iter().position(|l| *l == r.label).expect("known label"))
                .or_default();
            if let Some((m, p, s)) = r.mse {
                col.mse.push(m);
                col.psnr.push(p);
                col.ssim.push(s);
            }
            col.landmark_err.extend(r.landmark_err);
            col.emd.extend(r.emd);
        }
    }
    let mut table = String::from("metric");
    for k in columns.keys() {
        write!(table, ",{}", LABELS[*k]).expect("string write");
    }
    table.push('\n');
    type Cell = fn(&Column) -> Option<String>;
    let rows: [(&str, Cell); 5] = [
        ("mse", |c| (!c.mse.is_empty()).then(|| format!("{:.6}", mean(&c.mse)))),
        ("psnr", |c| (!c.psnr.is_empty()).then(|| mean_psnr(&c.psnr))),
        ("ssim", |c| (!c.ssim.is_empty()).then(|| format!("{:.6}", mean(&c.ssim)))),
        ("landmark_err_pct", |c| {
            (!c.landmark_err.is_empty()).then(|| format!("{:.6}", mean(&c.landmark_err)))
        }),
        ("histogram_emd", |c| (!c.emd.is_empty()).then(|| format!("{:.6}", mean(&c.emd)))),
    ];
    for (name, cell) in rows {
        let cells: Vec<Option<String>> = columns.values().map(cell).collect();
        if cells.iter().all(Option::is_none) {
            continue;
        }
        table.push_str(name);
        for c in cells {
            write!(table, ",{}", c.unwrap_or_default()).expect("string write");
        }
        table.push('\n');
    }
    write_file(&out.join("reconstruction_table.csv"), &table)?;
    print!("{table}");

    // similarity of each target's most complete reconstruction
    let recon: Vec<&Descriptor> = measured
        .iter()
        .map(|(_, _, runs)| &runs.last().expect("non-empty").descriptor)
        .collect();
    let targets: Vec<&Descriptor> = measured.iter().map(|(_, t, _)| t).collect();
    let scores = recon
        .iter()
        .zip(&targets)
        .map(|(r, t)| cosine_similarity(r, t))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("target,loss,cosine\n");
    for ((name, _, runs), s) in measured.iter().zip(&scores) {
        writeln!(csv, "{name},{},{s:.12}", runs.last().expect("non-empty").label).expect("string write");
    }
    let report = summarize_scores(scores);
    report.save(&out, "similarity")?;
    write_file(&out.join("similarity_by_target.csv"), csv)?;
    let mut null = Vec::new();
    for (i, r) in recon.iter().enumerate() {
        for (j, t) in targets.iter().enumerate() {
            if i != j {
                null.push(cosine_similarity(r, t)?);
            }
        }
    }
    let (null_mean, null_std) = if null.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = mean(&null);
        (m, (null.iter().map(|x| (x - m).powi(2)).sum::<f64>() / null.len() as f64).sqrt())
    };
    let summary = SimilaritySummary {
        n: report.n,
        mean: report.mean,
        median: report.median,
        std: report.std,
        shuffled_null_mean: null_mean,
        shuffled_null_std: null_std,
    };
    write_file(&out.join("similarity_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "identity similarity | mean {:.4} | median {:.4} | shuffled null mean {:.4} | n={}",
        summary.mean, summary.median, summary.shuffled_null_mean, summary.n
    );

    let mut probes = String::from("probe,value,baseline,n_test\n");
    let mut any = false;
    for kind in KINDS {
        let path = ws.probe_dir(kind).join("metrics.json");
        if let Ok(text) = fs::read_to_string(&path) {
            let m: ProbeMetrics = serde_json::from_str(&text)?;
            writeln!(probes, "{},{:.6},{:.6},{}", kind_name(kind), m.value(), m.baseline, m.n_test)
                .expect("string write");
            any = true;
        }
    }
    if any {
        write_file(&out.join("probe_table.csv"), probes)?;
    }
    progress(format!("report written to {}", out.display()));
    Ok(())
}
